//! Structured-output schemas with total validation.

use std::fmt;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldType {
    String,
    /// A string that must not be blank.
    NonEmptyString,
    Integer,
    Number,
    Bool,
    List(Box<FieldType>),
    Object(Vec<FieldSpec>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub ty: FieldType,
    pub required: bool,
}

impl FieldSpec {
    pub fn required(name: &str, ty: FieldType) -> Self {
        Self {
            name: name.to_string(),
            ty,
            required: true,
        }
    }

    pub fn optional(name: &str, ty: FieldType) -> Self {
        Self {
            name: name.to_string(),
            ty,
            required: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub id: String,
    pub fields: Vec<FieldSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldFailure {
    /// JSON-path-like location, `$` for the whole document.
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("output does not match schema {schema_id}: {}", diagnostics(.failures))]
pub struct SchemaViolation {
    pub schema_id: String,
    pub failures: Vec<FieldFailure>,
}

impl SchemaViolation {
    pub fn diagnostics(&self) -> String {
        diagnostics(&self.failures)
    }
}

fn diagnostics(failures: &[FieldFailure]) -> String {
    failures
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Schema {
    pub fn new(id: &str, fields: Vec<FieldSpec>) -> Self {
        Self {
            id: id.to_string(),
            fields,
        }
    }

    /// Extracts a JSON object from model output and validates it.
    pub fn validate_text(&self, text: &str) -> Result<Value, SchemaViolation> {
        let value = extract_json(text).map_err(|message| {
            self.violation(vec![FieldFailure {
                path: "$".into(),
                message,
            }])
        })?;
        self.validate_value(&value)?;
        Ok(value)
    }

    /// Checks every field and reports all failures at once.
    pub fn validate_value(&self, value: &Value) -> Result<(), SchemaViolation> {
        let mut failures = Vec::new();
        check_object(&self.fields, value, "$", &mut failures);
        if failures.is_empty() {
            Ok(())
        } else {
            Err(self.violation(failures))
        }
    }

    fn violation(&self, failures: Vec<FieldFailure>) -> SchemaViolation {
        SchemaViolation {
            schema_id: self.id.clone(),
            failures,
        }
    }

    /// JSON skeleton shown to the model, e.g. `{"subtasks": [{"file_name": "<string>"}]}`.
    pub fn skeleton(&self) -> String {
        skeleton_object(&self.fields)
    }
}

fn check_object(fields: &[FieldSpec], value: &Value, path: &str, failures: &mut Vec<FieldFailure>) {
    let Some(map) = value.as_object() else {
        failures.push(FieldFailure {
            path: path.to_string(),
            message: format!("expected an object, found {}", kind_of(value)),
        });
        return;
    };
    for field in fields {
        let field_path = format!("{path}.{}", field.name);
        match map.get(&field.name) {
            None | Some(Value::Null) if field.required => failures.push(FieldFailure {
                path: field_path,
                message: "missing required field".into(),
            }),
            None | Some(Value::Null) => {}
            Some(v) => check_value(&field.ty, v, &field_path, failures),
        }
    }
}

fn check_value(ty: &FieldType, value: &Value, path: &str, failures: &mut Vec<FieldFailure>) {
    let mut fail = |expected: &str| {
        failures.push(FieldFailure {
            path: path.to_string(),
            message: format!("expected {expected}, found {}", kind_of(value)),
        })
    };
    match ty {
        FieldType::String => {
            if !value.is_string() {
                fail("a string");
            }
        }
        FieldType::NonEmptyString => match value.as_str() {
            Some(s) if !s.trim().is_empty() => {}
            Some(_) => failures.push(FieldFailure {
                path: path.to_string(),
                message: "must not be empty".into(),
            }),
            None => fail("a string"),
        },
        FieldType::Integer => {
            if !(value.is_i64() || value.is_u64()) {
                fail("an integer");
            }
        }
        FieldType::Number => {
            if !value.is_number() {
                fail("a number");
            }
        }
        FieldType::Bool => {
            if !value.is_boolean() {
                fail("a boolean");
            }
        }
        FieldType::List(inner) => match value.as_array() {
            Some(items) => {
                for (i, item) in items.iter().enumerate() {
                    check_value(inner, item, &format!("{path}[{i}]"), failures);
                }
            }
            None => fail("a list"),
        },
        FieldType::Object(fields) => check_object(fields, value, path, failures),
    }
}

fn kind_of(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "a list",
        Value::Object(_) => "an object",
    }
}

fn skeleton_object(fields: &[FieldSpec]) -> String {
    let parts: Vec<String> = fields
        .iter()
        .map(|f| format!("\"{}\": {}", f.name, skeleton_type(&f.ty)))
        .collect();
    format!("{{{}}}", parts.join(", "))
}

fn skeleton_type(ty: &FieldType) -> String {
    match ty {
        FieldType::String | FieldType::NonEmptyString => "\"<string>\"".into(),
        FieldType::Integer => "<integer>".into(),
        FieldType::Number => "<number>".into(),
        FieldType::Bool => "<true|false>".into(),
        FieldType::List(inner) => format!("[{}]", skeleton_type(inner)),
        FieldType::Object(fields) => skeleton_object(fields),
    }
}

/// Finds the JSON document in model output: the whole text, a fenced block,
/// or the outermost `{...}` span.
pub fn extract_json(text: &str) -> Result<Value, String> {
    let trimmed = strip_code_fences(text);
    if let Ok(v) = serde_json::from_str::<Value>(trimmed.trim()) {
        return Ok(v);
    }
    let (Some(start), Some(end)) = (trimmed.find('{'), trimmed.rfind('}')) else {
        return Err("response contains no JSON object".into());
    };
    if end < start {
        return Err("response contains no JSON object".into());
    }
    serde_json::from_str(&trimmed[start..=end])
        .map_err(|e| format!("response is not valid JSON: {e}"))
}

/// Removes a surrounding Markdown code fence (```lang ... ```), if present.
/// Text without a fence is returned unchanged.
pub fn strip_code_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(start) = t.find("```") else {
        return text;
    };
    let body = &t[start + 3..];
    let body = match body.find('\n') {
        Some(nl) if !body[..nl].trim().contains(' ') => &body[nl + 1..],
        _ => body,
    };
    match body.rfind("```") {
        Some(end) => &body[..end],
        None => body,
    }
}

/// `{subtasks: [{file_name, folder_name}]}`.
pub fn decomposition_schema() -> Schema {
    Schema::new(
        "task_decomposition",
        vec![FieldSpec::required(
            "subtasks",
            FieldType::List(Box::new(FieldType::Object(vec![
                FieldSpec::required("file_name", FieldType::NonEmptyString),
                FieldSpec::required("folder_name", FieldType::String),
            ]))),
        )],
    )
}

/// The four case-description fields.
pub fn case_description_schema() -> Schema {
    Schema::new(
        "case_description",
        vec![
            FieldSpec::required("case_name", FieldType::NonEmptyString),
            FieldSpec::required("case_domain", FieldType::String),
            FieldSpec::required("case_category", FieldType::String),
            FieldSpec::required("case_solver", FieldType::NonEmptyString),
        ],
    )
}

/// `{list_foamfile: [{file_name, folder_name, content}]}`.
pub fn file_correction_schema() -> Schema {
    Schema::new(
        "file_correction",
        vec![FieldSpec::required(
            "list_foamfile",
            FieldType::List(Box::new(FieldType::Object(vec![
                FieldSpec::required("file_name", FieldType::NonEmptyString),
                FieldSpec::required("folder_name", FieldType::String),
                FieldSpec::required("content", FieldType::String),
            ]))),
        )],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_decomposition() {
        let v = decomposition_schema()
            .validate_text(r#"{"subtasks":[{"file_name":"U","folder_name":"0"}]}"#)
            .unwrap();
        assert_eq!(v["subtasks"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn every_failure_is_reported() {
        let err = decomposition_schema()
            .validate_text(r#"{"subtasks":[{"file_name":""},{"folder_name":3}]}"#)
            .unwrap_err();
        let paths: Vec<_> = err.failures.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(
            paths,
            [
                "$.subtasks[0].file_name",
                "$.subtasks[0].folder_name",
                "$.subtasks[1].file_name",
                "$.subtasks[1].folder_name"
            ]
        );
    }

    #[test]
    fn non_json_is_a_violation_not_a_panic() {
        for text in ["", "hello", "}{", "```json\n{\"a\":\n```", "[1,2]"] {
            assert!(
                decomposition_schema().validate_text(text).is_err(),
                "{text:?}"
            );
        }
    }

    #[test]
    fn fenced_and_chatty_json_is_found() {
        let s = decomposition_schema();
        assert!(s.validate_text("```json\n{\"subtasks\": []}\n```").is_ok());
        assert!(s
            .validate_text("Here you go: {\"subtasks\": []} hope it helps")
            .is_ok());
    }

    #[test]
    fn fences_are_stripped() {
        assert_eq!(
            strip_code_fences("```\nblockMesh\nicoFoam\n```"),
            "blockMesh\nicoFoam\n"
        );
        assert_eq!(strip_code_fences("```bash\nicoFoam\n```"), "icoFoam\n");
        assert_eq!(strip_code_fences("plain"), "plain");
    }

    #[test]
    fn skeleton_shape() {
        assert_eq!(
            decomposition_schema().skeleton(),
            r#"{"subtasks": [{"file_name": "<string>", "folder_name": "<string>"}]}"#
        );
    }
}
