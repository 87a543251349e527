//! Turns a tutorial tree into knowledge records.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::commands::CommandDoc;
use super::KbError;
use crate::case::{parse_dictionary, DictNode, FileKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    CaseMetadata,
    DirectoryStructure,
    FileContent,
    ExecutionScript,
    /// Help text from the command corpus.
    CommandDoc,
}

impl Dimension {
    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::CaseMetadata => "case_metadata",
            Dimension::DirectoryStructure => "directory_structure",
            Dimension::FileContent => "file_content",
            Dimension::ExecutionScript => "execution_script",
            Dimension::CommandDoc => "command_doc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub record_id: String,
    pub dimension: Dimension,
    pub case_name: String,
    /// Case directory relative to the corpus root.
    pub case_path: String,
    pub domain: String,
    pub category: String,
    pub solver: String,
    /// File inside the case this record describes, when there is one.
    #[serde(default)]
    pub file_path: Option<String>,
    /// Text that gets embedded.
    pub text: String,
    /// Payload injected into prompts: a file list, a file body or a script.
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestWarning {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub cases: usize,
    pub records: usize,
    pub warnings: Vec<IngestWarning>,
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cases: {}", self.cases)?;
        writeln!(f, "records: {}", self.records)?;
        writeln!(f, "warnings: {}", self.warnings.len())?;
        for w in &self.warnings {
            writeln!(f, "- {}: {}", w.path, w.message)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ingested {
    pub records: Vec<KnowledgeRecord>,
    pub report: IngestReport,
}

/// Finds every case below `root` (a directory with `system/controlDict`) and
/// emits its records in path order. Malformed cases are skipped and reported.
pub fn ingest_tutorials(root: &Path) -> Result<Ingested, KbError> {
    let mut cases = Vec::new();
    find_cases(root, &mut cases)?;
    cases.sort();
    let mut out = Ingested::default();
    for case_dir in cases {
        let rel = rel_path(root, &case_dir);
        match ingest_case(&case_dir, &rel, &mut out.report.warnings) {
            Ok(records) => {
                out.report.cases += 1;
                out.records.extend(records);
            }
            Err(message) => out
                .report
                .warnings
                .push(IngestWarning { path: rel, message }),
        }
    }
    out.report.records = out.records.len();
    Ok(out)
}

fn find_cases(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), KbError> {
    if dir.join("system/controlDict").is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(|e| KbError::io(dir, e))? {
        let entry = entry.map_err(|e| KbError::io(dir, e))?;
        if entry
            .file_type()
            .map_err(|e| KbError::io(entry.path(), e))?
            .is_dir()
        {
            find_cases(&entry.path(), out)?;
        }
    }
    Ok(())
}

fn rel_path(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Domain and category from the leading path segments, e.g.
/// `incompressible/icoFoam/cavity` gives (`incompressible`, `icoFoam`).
pub fn classify_path(case_path: &str) -> (String, String) {
    let segments: Vec<&str> = case_path.split('/').filter(|s| !s.is_empty()).collect();
    let domain = if segments.len() >= 2 { segments[0] } else { "" };
    let category = if segments.len() >= 3 { segments[1] } else { "" };
    (domain.to_string(), category.to_string())
}

fn list_files(case_dir: &Path) -> Result<Vec<String>, String> {
    let mut files = Vec::new();
    let mut stack = vec![case_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        for entry in entries {
            let entry = entry.map_err(|e| format!("{}: {e}", dir.display()))?;
            let path = entry.path();
            let rel = rel_path(case_dir, &path);
            if crate::case::state::is_artifact(&rel) || rel.starts_with("constant/triSurface") {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(rel);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Indented tree text of a sorted file list.
pub fn tree_text(case_name: &str, files: &[String]) -> String {
    let mut out = format!("{case_name}\n");
    let mut open: Vec<&str> = Vec::new();
    for file in files {
        let parts: Vec<&str> = file.split('/').collect();
        let (dirs, name) = parts.split_at(parts.len() - 1);
        let common = open.iter().zip(dirs).take_while(|(a, b)| a == b).count();
        open.truncate(common);
        for d in &dirs[common..] {
            out.push_str(&"  ".repeat(open.len() + 1));
            out.push_str(d);
            out.push('\n');
            open.push(d);
        }
        out.push_str(&"  ".repeat(open.len() + 1));
        out.push_str(name[0]);
        out.push('\n');
    }
    out
}

fn is_script(file: &str) -> bool {
    !file.contains('/') && file.starts_with("All")
}

fn ingest_case(
    case_dir: &Path,
    rel: &str,
    warnings: &mut Vec<IngestWarning>,
) -> Result<Vec<KnowledgeRecord>, String> {
    let files = list_files(case_dir)?;
    let control = fs::read_to_string(case_dir.join("system/controlDict"))
        .map_err(|e| format!("system/controlDict: {e}"))?;
    let control = parse_dictionary(&control).map_err(|e| format!("system/controlDict: {e}"))?;
    let solver = control
        .get("application")
        .and_then(DictNode::as_word)
        .unwrap_or_default()
        .to_string();
    if solver.is_empty() {
        warnings.push(IngestWarning {
            path: format!("{rel}/system/controlDict"),
            message: "no application entry; solver left empty".into(),
        });
    }
    let case_name = rel.rsplit('/').next().unwrap_or(rel).to_string();
    let (domain, category) = classify_path(rel);
    let header = format!(
        "case name: {case_name}\ncase domain: {domain}\ncase category: {category}\ncase solver: {solver}"
    );
    let base = KnowledgeRecord {
        record_id: String::new(),
        dimension: Dimension::CaseMetadata,
        case_name: case_name.clone(),
        case_path: rel.to_string(),
        domain,
        category,
        solver,
        file_path: None,
        text: String::new(),
        detail: String::new(),
    };

    let mut records = Vec::new();
    records.push(KnowledgeRecord {
        record_id: format!("{rel}#case_metadata"),
        text: format!("{header}\nfiles: {}", files.join(" ")),
        detail: header.clone(),
        ..base.clone()
    });
    let structure = tree_text(&case_name, &files);
    records.push(KnowledgeRecord {
        record_id: format!("{rel}#directory_structure"),
        dimension: Dimension::DirectoryStructure,
        text: format!("{header}\n{structure}"),
        detail: files.join("\n"),
        ..base.clone()
    });
    for file in &files {
        let kind = FileKind::guess(file);
        let dimension = if is_script(file) {
            Dimension::ExecutionScript
        } else if kind == FileKind::Dictionary {
            Dimension::FileContent
        } else {
            continue;
        };
        let path = case_dir.join(file);
        let content = match fs::read_to_string(&path) {
            Ok(c) => c,
            Err(e) => {
                warnings.push(IngestWarning {
                    path: format!("{rel}/{file}"),
                    message: format!("unreadable: {e}"),
                });
                continue;
            }
        };
        if dimension == Dimension::FileContent {
            if let Err(e) = parse_dictionary(&content) {
                warnings.push(IngestWarning {
                    path: format!("{rel}/{file}"),
                    message: format!("kept as text, does not parse: {e}"),
                });
            }
        }
        if content.trim().is_empty() {
            continue;
        }
        records.push(KnowledgeRecord {
            record_id: format!("{rel}#{}#{file}", dimension.as_str()),
            dimension,
            file_path: Some(file.clone()),
            text: format!("{header}\nfile: {file}\n{content}"),
            detail: content,
            ..base.clone()
        });
    }
    Ok(records)
}

/// Records for the command documentation index.
pub fn command_records(docs: &[CommandDoc]) -> Vec<KnowledgeRecord> {
    let mut records: Vec<KnowledgeRecord> = docs
        .iter()
        .map(|d| KnowledgeRecord {
            record_id: format!("command#{}", d.name),
            dimension: Dimension::CommandDoc,
            case_name: String::new(),
            case_path: String::new(),
            domain: String::new(),
            category: d.category.clone(),
            solver: String::new(),
            file_path: None,
            text: d.help_line(),
            detail: d.help_line(),
        })
        .collect();
    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    records
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_and_category() {
        assert_eq!(
            classify_path("incompressible/icoFoam/cavity"),
            ("incompressible".into(), "icoFoam".into())
        );
        assert_eq!(classify_path("cavity"), (String::new(), String::new()));
        assert_eq!(
            classify_path("icoFoam/cavity"),
            ("icoFoam".into(), String::new())
        );
    }

    #[test]
    fn tree_is_indented() {
        let files = [
            "0/U",
            "0/p",
            "constant/transportProperties",
            "system/controlDict",
        ]
        .map(String::from);
        assert_eq!(
            tree_text("cavity", &files),
            "cavity\n  0\n    U\n    p\n  constant\n    transportProperties\n  system\n    controlDict\n"
        );
    }
}
