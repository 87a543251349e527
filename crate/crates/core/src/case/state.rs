//! In-memory case trees, their on-disk mirror and patch application.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dict::{parse_dictionary, serialize_dictionary, DictNode};

/// Directory holding engine bookkeeping inside a case.
pub const ENGINE_DIR: &str = ".foamflow";
pub const TRANSCRIPT_FILE: &str = "llm_transcript.log";

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid case path {path:?}: {reason}")]
    InvalidPath { path: String, reason: &'static str },
    #[error("patch targets {0} more than once")]
    PatchConflict(String),
}

impl CaseError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CaseError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Checks that `path` is relative, `/`-separated and free of `..` and empty
/// components.
pub fn validate_case_path(path: &str) -> Result<(), CaseError> {
    let bad = |reason| {
        Err(CaseError::InvalidPath {
            path: path.to_string(),
            reason,
        })
    };
    if path.is_empty() {
        return bad("empty");
    }
    if path.starts_with('/') || path.contains('\\') || path.contains(':') {
        return bad("not a relative slash-separated path");
    }
    for part in path.split('/') {
        match part {
            "" | "." => return bad("empty component"),
            ".." => return bad("parent component"),
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Dictionary,
    Script,
    Mesh,
    Other,
}

impl FileKind {
    /// Kind suggested by the path alone; dictionaries still have to parse.
    pub fn guess(path: &str) -> FileKind {
        let name = path.rsplit('/').next().unwrap_or(path);
        if name.starts_with("All")
            || name.ends_with(".sh")
            || name.ends_with(".slurm")
            || name.ends_with(".py")
        {
            FileKind::Script
        } else if name.ends_with(".msh") || path.starts_with("constant/polyMesh/") {
            FileKind::Mesh
        } else if ["system/", "constant/", "0/"]
            .iter()
            .any(|p| path.starts_with(p))
        {
            FileKind::Dictionary
        } else {
            FileKind::Other
        }
    }
}

/// One file of a case. The bytes are authoritative; `tree` is the parsed
/// dictionary when the file is one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseFile {
    pub path: String,
    pub kind: FileKind,
    bytes: Vec<u8>,
    tree: Option<DictNode>,
}

impl CaseFile {
    /// Classifies and, for dictionary paths, parses the content. Files that
    /// fail to parse become [`FileKind::Other`].
    pub fn from_bytes(path: impl Into<String>, bytes: Vec<u8>) -> Result<Self, CaseError> {
        let path = path.into();
        validate_case_path(&path)?;
        let mut kind = FileKind::guess(&path);
        let mut tree = None;
        if kind == FileKind::Dictionary {
            match std::str::from_utf8(&bytes).ok().map(parse_dictionary) {
                Some(Ok(node)) => tree = Some(node),
                _ => kind = FileKind::Other,
            }
        }
        Ok(Self {
            path,
            kind,
            bytes,
            tree,
        })
    }

    pub fn from_text(path: impl Into<String>, text: impl Into<String>) -> Result<Self, CaseError> {
        Self::from_bytes(path, text.into().into_bytes())
    }

    pub fn from_dict(path: impl Into<String>, node: DictNode) -> Result<Self, CaseError> {
        let path = path.into();
        validate_case_path(&path)?;
        Ok(Self {
            bytes: serialize_dictionary(&node).into_bytes(),
            path,
            kind: FileKind::Dictionary,
            tree: Some(node),
        })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn text(&self) -> Option<&str> {
        std::str::from_utf8(&self.bytes).ok()
    }

    /// Lossy text view for prompts and logs.
    pub fn text_lossy(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }

    pub fn dictionary(&self) -> Option<&DictNode> {
        self.tree.as_ref()
    }

    pub fn folder(&self) -> &str {
        self.path.rsplit_once('/').map(|(d, _)| d).unwrap_or("")
    }

    pub fn file_name(&self) -> &str {
        self.path
            .rsplit_once('/')
            .map(|(_, f)| f)
            .unwrap_or(&self.path)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseMetadata {
    pub case_name: String,
    pub case_domain: String,
    pub case_category: String,
    pub case_solver: String,
}

impl CaseMetadata {
    /// `key: value` lines, the form injected into prompts.
    pub fn describe(&self) -> String {
        format!(
            "case name: {}\ncase domain: {}\ncase category: {}\ncase solver: {}",
            self.case_name, self.case_domain, self.case_category, self.case_solver
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchProvenance {
    Reviewer,
    User,
    McpApplyFix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub path: String,
    pub new_content: String,
}

impl PatchEntry {
    pub fn new(path: impl Into<String>, new_content: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            new_content: new_content.into(),
        }
    }

    /// Builds an entry from a folder and file name. An empty or `.` folder
    /// places the file at the case root.
    pub fn in_folder(folder: &str, file: &str, new_content: impl Into<String>) -> Self {
        let folder = folder.trim_matches('/');
        let path = if folder.is_empty() || folder == "." {
            file.to_string()
        } else {
            format!("{folder}/{file}")
        };
        Self::new(path, new_content)
    }

    pub fn folder(&self) -> &str {
        self.path.rsplit_once('/').map(|(d, _)| d).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigPatch {
    pub entries: Vec<PatchEntry>,
    pub provenance: PatchProvenance,
}

impl ConfigPatch {
    pub fn new(provenance: PatchProvenance) -> Self {
        Self {
            entries: Vec::new(),
            provenance,
        }
    }

    pub fn with(mut self, entry: PatchEntry) -> Self {
        self.entries.push(entry);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.path.as_str())
    }

    /// Rejects invalid paths and duplicate targets.
    pub fn validate(&self) -> Result<(), CaseError> {
        let mut seen = HashSet::new();
        for entry in &self.entries {
            validate_case_path(&entry.path)?;
            if !seen.insert(entry.path.as_str()) {
                return Err(CaseError::PatchConflict(entry.path.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseState {
    pub case_id: String,
    pub root: PathBuf,
    pub files: BTreeMap<String, CaseFile>,
    pub metadata: CaseMetadata,
    pub generation: u64,
}

impl CaseState {
    pub fn new(case_id: impl Into<String>, root: impl Into<PathBuf>) -> Self {
        Self {
            case_id: case_id.into(),
            root: root.into(),
            files: BTreeMap::new(),
            metadata: CaseMetadata::default(),
            generation: 0,
        }
    }

    pub fn get(&self, path: &str) -> Option<&CaseFile> {
        self.files.get(path)
    }

    pub fn text(&self, path: &str) -> Option<&str> {
        self.get(path).and_then(CaseFile::text)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.files.contains_key(path)
    }

    /// Inserts a file and writes it to disk. Does not bump the generation;
    /// initial generation is not a patch.
    pub fn put(&mut self, file: CaseFile) -> Result<(), CaseError> {
        write_atomic(&self.root, &file)?;
        self.files.insert(file.path.clone(), file);
        Ok(())
    }

    /// Files under one folder, e.g. `"0"`.
    pub fn files_in<'a>(&'a self, folder: &'a str) -> impl Iterator<Item = &'a CaseFile> + 'a {
        self.files.values().filter(move |f| f.folder() == folder)
    }

    /// Applies a patch in place: replaced or created files are written via a
    /// temporary file and rename, the generation grows by exactly one.
    pub fn apply(&mut self, patch: &ConfigPatch) -> Result<(), CaseError> {
        patch.validate()?;
        let mut staged = Vec::with_capacity(patch.entries.len());
        for entry in &patch.entries {
            staged.push(CaseFile::from_text(
                entry.path.clone(),
                entry.new_content.clone(),
            )?);
        }
        for file in &staged {
            write_atomic(&self.root, file)?;
        }
        for file in staged {
            self.files.insert(file.path.clone(), file);
        }
        self.generation += 1;
        Ok(())
    }

    pub fn abs_path(&self, path: &str) -> PathBuf {
        self.root.join(path)
    }

    pub fn engine_dir(&self) -> PathBuf {
        self.root.join(ENGINE_DIR)
    }
}

/// `S ⊕ ΔS` as a value-level operation.
pub fn apply_patch(mut state: CaseState, patch: &ConfigPatch) -> Result<CaseState, CaseError> {
    state.apply(patch)?;
    Ok(state)
}

fn write_atomic(root: &Path, file: &CaseFile) -> Result<(), CaseError> {
    let target = root.join(&file.path);
    let dir = target.parent().unwrap_or(root);
    fs::create_dir_all(dir).map_err(|e| CaseError::io(dir, e))?;
    let tmp = dir.join(format!(".{}.tmp", file.file_name()));
    let result = (|| {
        let mut out = fs::File::create(&tmp)?;
        out.write_all(&file.bytes)?;
        out.sync_all()?;
        drop(out);
        if file.kind == FileKind::Script {
            set_executable(&tmp)?;
        }
        fs::rename(&tmp, &target)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| CaseError::io(&target, e))
}

#[cfg(unix)]
fn set_executable(path: &Path) -> std::io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(path, fs::Permissions::from_mode(0o755))
}

#[cfg(not(unix))]
fn set_executable(_path: &Path) -> std::io::Result<()> {
    Ok(())
}

/// Whether a root-relative path is run output or bookkeeping rather than
/// case configuration.
pub fn is_artifact(rel: &str) -> bool {
    let first = rel.split('/').next().unwrap_or(rel);
    let name = rel.rsplit('/').next().unwrap_or(rel);
    first == ENGINE_DIR
        || rel == TRANSCRIPT_FILE
        || name.starts_with("log.")
        || first.starts_with("processor")
        || is_result_time(first)
        || rel.starts_with("constant/polyMesh")
        || first == "postProcessing"
        || first == "dynamicCode"
        || name.ends_with(".tmp")
}

/// Time directories other than `0`: `0.5`, `100`, `1e-05`.
pub fn is_result_time(name: &str) -> bool {
    name != "0"
        && name.parse::<f64>().is_ok_and(|t| t.is_finite() && t > 0.0)
        && !name.contains('/')
}

/// Reads every configuration file under `root`. Malformed dictionaries load
/// as opaque text; artifacts and engine bookkeeping are skipped.
pub fn load_case_tree(root: &Path) -> Result<CaseState, CaseError> {
    let case_id = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut state = CaseState::new(case_id, root);
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| CaseError::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| CaseError::io(&dir, e))?;
            let path = entry.path();
            let rel = relative(root, &path);
            if is_artifact(&rel) {
                continue;
            }
            let ty = entry.file_type().map_err(|e| CaseError::io(&path, e))?;
            if ty.is_dir() {
                stack.push(path);
            } else if ty.is_file() {
                let bytes = fs::read(&path).map_err(|e| CaseError::io(&path, e))?;
                let file = CaseFile::from_bytes(rel, bytes)?;
                state.files.insert(file.path.clone(), file);
            }
        }
    }
    if let Some(solver) = state
        .get("system/controlDict")
        .and_then(CaseFile::dictionary)
        .and_then(|d| d.get("application"))
        .and_then(DictNode::as_word)
    {
        state.metadata.case_solver = solver.to_string();
    }
    state.metadata.case_name = state.case_id.clone();
    Ok(state)
}

/// Writes every file of the state below its root.
pub fn write_case_tree(state: &CaseState) -> Result<(), CaseError> {
    fs::create_dir_all(&state.root).map_err(|e| CaseError::io(&state.root, e))?;
    for file in state.files.values() {
        write_atomic(&state.root, file)?;
    }
    Ok(())
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}
