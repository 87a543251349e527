//! The tool table with its JSON schemas, and a validator for the schema
//! subset it uses.

use serde::Serialize;
use serde_json::{json, Value};

use crate::llm::FieldFailure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CallMode {
    Sync,
    /// Returns a job id at once; the work runs on the worker pool.
    Async,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolSpec {
    pub name: &'static str,
    pub description: &'static str,
    pub mode: CallMode,
    #[serde(rename = "inputSchema")]
    pub input_schema: Value,
    #[serde(rename = "outputSchema")]
    pub output_schema: Value,
}

impl ToolSpec {
    pub fn validate_input(&self, args: &Value) -> Result<(), Vec<FieldFailure>> {
        check(&self.input_schema, args)
    }

    pub fn validate_output(&self, value: &Value) -> Result<(), Vec<FieldFailure>> {
        check(&self.output_schema, value)
    }
}

fn object(properties: Value, required: &[&str]) -> Value {
    json!({
        "type": "object",
        "properties": properties,
        "required": required,
        "additionalProperties": false,
    })
}

fn text() -> Value {
    json!({"type": "string"})
}

fn id() -> Value {
    json!({"type": "string", "minLength": 1})
}

fn count() -> Value {
    json!({"type": "integer", "minimum": 1})
}

fn mesh_config() -> Value {
    object(
        json!({
            "strategy": {"enum": ["native", "gmsh", "external"]},
            "description": text(),
            "external_path": id(),
        }),
        &["strategy"],
    )
}

fn hpc_config() -> Value {
    object(
        json!({
            "account": id(),
            "constraint": id(),
            "qos": id(),
            "partition": id(),
            "nodes": count(),
            "ntasks": count(),
            "ntasks_per_node": count(),
            "walltime": {"type": "string", "pattern": "^[0-9]+:[0-5][0-9]:[0-5][0-9]$"},
            "job_name": id(),
            "memory": id(),
            "output": id(),
            "error": id(),
            "workdir": id(),
            "platform_docs": text(),
        }),
        &["account"],
    )
}

fn log_entry() -> Value {
    object(
        json!({
            "command": text(),
            "log_file": text(),
            "text": text(),
            "exit_code": {"type": ["integer", "null"]},
            "timed_out": {"type": "boolean"},
        }),
        &["command", "text"],
    )
}

fn error_record() -> Value {
    object(
        json!({
            "severity": {"enum": ["fatal", "error", "warning"]},
            "message": text(),
            "location": text(),
        }),
        &["severity", "message", "location"],
    )
}

fn logs() -> Value {
    object(
        json!({
            "job_id": id(),
            "entries": {"type": "array", "items": log_entry()},
            "errors": {"type": "array", "items": error_record()},
        }),
        &["entries"],
    )
}

fn modification() -> Value {
    object(
        json!({"file": id(), "folder": text(), "content": text()}),
        &["file", "folder", "content"],
    )
}

fn job_status() -> Value {
    let optional_text = json!({"type": ["string", "null"]});
    object(
        json!({
            "job_id": id(),
            "case_id": id(),
            "kind": {"enum": ["mesh", "simulation", "visualization"]},
            "status": {"enum": ["pending", "running", "succeeded", "failed"]},
            "error": optional_text,
            "logs_ref": optional_text,
            "outputs": {"type": "array", "items": text()},
            "created_at": {"type": "integer", "minimum": 0},
            "updated_at": {"type": "integer", "minimum": 0},
        }),
        &[
            "job_id",
            "case_id",
            "kind",
            "status",
            "created_at",
            "updated_at",
        ],
    )
}

fn job_id_output() -> Value {
    object(json!({"job_id": id()}), &["job_id"])
}

/// The eleven functions, in table order.
pub fn tool_specs() -> Vec<ToolSpec> {
    vec![
        ToolSpec {
            name: "create_case",
            description: "Initializes a new CFD simulation case and its workspace.",
            mode: CallMode::Sync,
            input_schema: object(json!({"user_prompt": id()}), &["user_prompt"]),
            output_schema: object(json!({"case_id": id()}), &["case_id"]),
        },
        ToolSpec {
            name: "plan_simulation_structure",
            description: "Plans the required file and directory structure based on the user prompt.",
            mode: CallMode::Sync,
            input_schema: object(json!({"case_id": id()}), &["case_id"]),
            output_schema: object(
                json!({"plan": {"type": "array", "items": object(json!({"file": id(), "folder": text()}), &["file", "folder"])}}),
                &["plan"],
            ),
        },
        ToolSpec {
            name: "generate_file_content",
            description: "Generates the content for a single specified configuration file.",
            mode: CallMode::Sync,
            input_schema: object(json!({"case_id": id(), "file": id(), "folder": text()}), &["case_id", "file", "folder"]),
            output_schema: object(json!({"content": text()}), &["content"]),
        },
        ToolSpec {
            name: "generate_mesh",
            description: "Asynchronously generates the computational mesh using a specified method.",
            mode: CallMode::Async,
            input_schema: object(json!({"case_id": id(), "mesh_config": mesh_config()}), &["case_id", "mesh_config"]),
            output_schema: job_id_output(),
        },
        ToolSpec {
            name: "generate_hpc_script",
            description: "Generates a Slurm job submission script for a high-performance computing cluster.",
            mode: CallMode::Sync,
            input_schema: object(json!({"case_id": id(), "hpc_config": hpc_config()}), &["case_id", "hpc_config"]),
            output_schema: object(json!({"script_content": text()}), &["script_content"]),
        },
        ToolSpec {
            name: "run_simulation",
            description: "Asynchronously executes the simulation locally or by submitting to an HPC cluster.",
            mode: CallMode::Async,
            input_schema: object(
                json!({"case_id": id(), "environment": {"enum": ["local", "hpc"]}}),
                &["case_id", "environment"],
            ),
            output_schema: job_id_output(),
        },
        ToolSpec {
            name: "check_job_status",
            description: "Checks the status of any asynchronous job (meshing, simulation, visualization).",
            mode: CallMode::Sync,
            input_schema: object(json!({"job_id": id()}), &["job_id"]),
            output_schema: object(json!({"status": job_status()}), &["status"]),
        },
        ToolSpec {
            name: "get_simulation_logs",
            description: "Retrieves detailed logs for a job to enable error diagnosis.",
            mode: CallMode::Sync,
            input_schema: object(json!({"case_id": id(), "job_id": id()}), &["case_id", "job_id"]),
            output_schema: object(json!({"logs": logs()}), &["logs"]),
        },
        ToolSpec {
            name: "review_and_suggest_fix",
            description: "Analyzes error logs and proposes corrective actions. Logs are given inline or as a job id.",
            mode: CallMode::Sync,
            input_schema: object(
                json!({"case_id": id(), "logs": {"anyOf": [id(), logs()]}}),
                &["case_id", "logs"],
            ),
            output_schema: object(
                json!({"suggestions": object(
                    json!({
                        "analysis": text(),
                        "modifications": {"type": "array", "items": modification()},
                        "dropped": {"type": "array", "items": object(json!({"path": text(), "reason": text()}), &["path", "reason"])},
                    }),
                    &["analysis", "modifications", "dropped"],
                )}),
                &["suggestions"],
            ),
        },
        ToolSpec {
            name: "apply_fix",
            description: "Applies suggested modifications to the relevant case files.",
            mode: CallMode::Sync,
            input_schema: object(
                json!({"case_id": id(), "modifications": {"type": "array", "items": modification(), "minItems": 1}}),
                &["case_id", "modifications"],
            ),
            output_schema: object(json!({"status": id()}), &["status"]),
        },
        ToolSpec {
            name: "generate_visualization",
            description: "Asynchronously generates a visualization of the simulation results.",
            mode: CallMode::Async,
            input_schema: object(
                json!({
                    "case_id": id(),
                    "quantity": id(),
                    "plane": id(),
                    "time": id(),
                    "toolchain": {"enum": ["pyvista", "paraview"]},
                }),
                &["case_id", "quantity"],
            ),
            output_schema: job_id_output(),
        },
    ]
}

pub fn tool_spec(name: &str) -> Option<ToolSpec> {
    tool_specs().into_iter().find(|t| t.name == name)
}

/// Validates `value` and reports every failure with its path.
pub fn check(schema: &Value, value: &Value) -> Result<(), Vec<FieldFailure>> {
    let mut failures = Vec::new();
    check_at(schema, value, "$", &mut failures);
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures)
    }
}

fn fail(failures: &mut Vec<FieldFailure>, path: &str, message: String) {
    failures.push(FieldFailure {
        path: path.to_string(),
        message,
    });
}

fn type_matches(ty: &str, value: &Value) -> bool {
    match ty {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "integer" => value.is_i64() || value.is_u64(),
        "number" => value.is_number(),
        "boolean" => value.is_boolean(),
        "null" => value.is_null(),
        _ => false,
    }
}

fn check_at(schema: &Value, value: &Value, path: &str, failures: &mut Vec<FieldFailure>) {
    if let Some(branches) = schema.get("anyOf").and_then(Value::as_array) {
        if !branches.iter().any(|b| check(b, value).is_ok()) {
            fail(failures, path, "matches none of the accepted forms".into());
        }
        return;
    }
    if let Some(ty) = schema.get("type") {
        let types: Vec<&str> = match ty {
            Value::String(s) => vec![s.as_str()],
            Value::Array(items) => items.iter().filter_map(Value::as_str).collect(),
            _ => Vec::new(),
        };
        if !types.iter().any(|t| type_matches(t, value)) {
            fail(failures, path, format!("expected {}", types.join(" or ")));
            return;
        }
    }
    if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
        if !allowed.contains(value) {
            fail(
                failures,
                path,
                format!("must be one of {}", Value::Array(allowed.clone())),
            );
            return;
        }
    }
    match value {
        Value::String(s) => {
            if let Some(min) = schema.get("minLength").and_then(Value::as_u64) {
                if (s.trim().chars().count() as u64) < min {
                    fail(failures, path, "must not be empty".into());
                }
            }
            if let Some(pattern) = schema.get("pattern").and_then(Value::as_str) {
                if !matches_clock(pattern, s) {
                    fail(failures, path, format!("must match {pattern}"));
                }
            }
        }
        Value::Number(n) => {
            if let (Some(min), Some(v)) =
                (schema.get("minimum").and_then(Value::as_f64), n.as_f64())
            {
                if v < min {
                    fail(failures, path, format!("must be at least {min}"));
                }
            }
        }
        Value::Array(items) => {
            if let Some(min) = schema.get("minItems").and_then(Value::as_u64) {
                if (items.len() as u64) < min {
                    fail(failures, path, format!("needs at least {min} item(s)"));
                }
            }
            if let Some(item_schema) = schema.get("items") {
                for (i, item) in items.iter().enumerate() {
                    check_at(item_schema, item, &format!("{path}[{i}]"), failures);
                }
            }
        }
        Value::Object(map) => {
            let properties = schema.get("properties").and_then(Value::as_object);
            for name in schema
                .get("required")
                .and_then(Value::as_array)
                .into_iter()
                .flatten()
            {
                let name = name.as_str().unwrap_or_default();
                if !map.contains_key(name) {
                    fail(
                        failures,
                        &format!("{path}.{name}"),
                        "missing required field".into(),
                    );
                }
            }
            for (key, v) in map {
                match properties.and_then(|p| p.get(key)) {
                    Some(sub) => check_at(sub, v, &format!("{path}.{key}"), failures),
                    None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                        fail(failures, &format!("{path}.{key}"), "unknown field".into())
                    }
                    None => {}
                }
            }
        }
        _ => {}
    }
}

/// The only pattern in the table is the `H+:MM:SS` clock.
fn matches_clock(pattern: &str, s: &str) -> bool {
    debug_assert_eq!(pattern, "^[0-9]+:[0-5][0-9]:[0-5][0-9]$");
    let parts: Vec<&str> = s.split(':').collect();
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    parts.len() == 3
        && digits(parts[0])
        && parts[1..]
            .iter()
            .all(|p| p.len() == 2 && digits(p) && p.as_bytes()[0] <= b'5')
}
