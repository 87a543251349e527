//! Per-case persistence of workflow progress and the run report.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{OrchestratorConfig, OrchestratorError};
use crate::agents::{HistoryEntry, MeshResult, RunStatus, VizArtifact, WorkflowRequest};
use crate::case::state::ENGINE_DIR;
use crate::case::{CaseMetadata, Plan};
use crate::llm::TokenUsage;

pub const STATE_FILE: &str = "state";
pub const REPORT_FILE: &str = "report";
const FORMAT_VERSION: u32 = 1;

/// The last completed stage; resuming starts with the stage after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    Created,
    Planned,
    Meshed,
    Written,
    /// Ready to start run attempt `attempt`.
    Running {
        attempt: u32,
    },
    Finished,
}

/// Terminal result, kept free of timings so checkpoints are reproducible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: RunStatus,
    pub iterations: u32,
    pub visualization: Option<VizArtifact>,
    pub error: Option<String>,
    pub visualization_error: Option<String>,
    pub job_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub case_id: String,
    pub request: WorkflowRequest,
    pub config: OrchestratorConfig,
    pub stage: Stage,
    pub metadata: Option<CaseMetadata>,
    pub plan: Option<Plan>,
    pub mesh: Option<MeshResult>,
    pub history: Vec<HistoryEntry>,
    pub generation: u64,
    /// Run attempts started so far.
    pub attempts: u32,
    pub verdict: Option<Verdict>,
    /// Hard error that stopped the last invocation before a terminal state.
    pub last_error: Option<String>,
}

impl Checkpoint {
    pub fn new(
        case_id: impl Into<String>,
        request: WorkflowRequest,
        config: OrchestratorConfig,
    ) -> Self {
        Self {
            version: FORMAT_VERSION,
            case_id: case_id.into(),
            request,
            config,
            stage: Stage::Created,
            metadata: None,
            plan: None,
            mesh: None,
            history: Vec::new(),
            generation: 0,
            attempts: 0,
            verdict: None,
            last_error: None,
        }
    }
}

pub fn state_path(root: &Path) -> PathBuf {
    root.join(ENGINE_DIR).join(STATE_FILE)
}

pub fn report_path(root: &Path) -> PathBuf {
    root.join(ENGINE_DIR).join(REPORT_FILE)
}

fn io(path: &Path, e: std::io::Error) -> OrchestratorError {
    OrchestratorError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes through a temporary file so a crash never leaves half a state.
pub(crate) fn write_atomic(path: &Path, text: &str) -> Result<(), OrchestratorError> {
    let dir = path.parent().expect("engine files live in a directory");
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

pub fn save_checkpoint(root: &Path, checkpoint: &Checkpoint) -> Result<(), OrchestratorError> {
    let text = serde_json::to_string_pretty(checkpoint).expect("checkpoints serialize");
    write_atomic(&state_path(root), &format!("{text}\n"))
}

pub fn load_checkpoint(root: &Path) -> Result<Checkpoint, OrchestratorError> {
    let path = state_path(root);
    let text = match fs::read_to_string(&path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(OrchestratorError::UnknownCase(root.display().to_string()))
        }
        Err(e) => return Err(io(&path, e)),
    };
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).map_err(|e| OrchestratorError::CorruptCheckpoint {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    if checkpoint.version != FORMAT_VERSION {
        return Err(OrchestratorError::CorruptCheckpoint {
            path,
            reason: format!("unsupported format version {}", checkpoint.version),
        });
    }
    Ok(checkpoint)
}

/// Wall time of one stage in one invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub iterations: u32,
    pub tokens: TokenUsage,
    pub wall_time_ms: u64,
    pub stages: Vec<StageTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub case_id: String,
    pub status: RunStatus,
    pub history_len: usize,
    pub verdict: Verdict,
    pub metrics: Metrics,
}

pub fn save_report(root: &Path, report: &RunReport) -> Result<(), OrchestratorError> {
    let text = serde_json::to_string_pretty(report).expect("reports serialize");
    write_atomic(&report_path(root), &format!("{text}\n"))
}

pub fn load_report(root: &Path) -> Option<RunReport> {
    let text = fs::read_to_string(report_path(root)).ok()?;
    serde_json::from_str(&text).ok()
}
