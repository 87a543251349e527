//! The specialised agents, each a typed operation over a [`CaseState`].

pub mod allrun;
pub mod architect;
pub mod exec;
pub mod hpc;
pub mod logs;
pub mod mesh;
pub mod reviewer;
pub mod runner;
pub mod viz;
pub mod writer;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::CaseError;
use crate::llm::{FieldFailure, Gateway, LlmError, SchemaViolation};
use crate::retrieval::{RetrievalError, Retriever};

pub use allrun::{generate_allrun, validate_allrun, AllrunCheck};
pub use architect::{architect_classify, architect_plan, MANDATORY_FILES};
pub use exec::{
    CommandOutput, CommandSpec, Executor, FakeExecutor, FakeOutcome, FakeProgram, FileProbe,
    SubprocessExecutor,
};
pub use hpc::{
    generate_slurm, parse_sbatch, render_slurm_template, submit_and_monitor, FakeScheduler,
    HpcConfig, JobState, SchedulerClient, SlurmClient,
};
pub use logs::{parse_errors, ErrorRecord, ExecutionLogs, LogEntry, Severity};
pub use mesh::{generate_mesh, MeshResult, MeshSpec, MeshStrategy};
pub use reviewer::{render_error_logs, render_history, review, HistoryEntry, ReviewOutcome};
pub use runner::{clean_case, parse_allrun, run_case, RunStatus};
pub use viz::{requested_fields, visualize, VizArtifact, VizConfig, VizToolchain};
pub use writer::{write_file, Predecessor};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("solver {0:?} is not in the known solver list")]
    UnknownSolver(String),
    #[error("the plan has no usable tasks")]
    EmptyPlan,
    #[error("mesh tool {0:?} is not available")]
    MeshToolMissing(String),
    #[error("mesh script failed: {0}")]
    MeshScriptFailure(String),
    #[error("executor cannot run {0:?}")]
    ExecutorUnavailable(String),
    #[error("job submission failed: {0}")]
    SubmitFailure(String),
    #[error("job did not finish within {0:?}")]
    PollTimeout(Duration),
    #[error("scheduler error: {0}")]
    Scheduler(String),
    #[error("review produced no file changes")]
    EmptyPatch { analysis: String },
    #[error("visualization tool {0:?} is not available")]
    VizToolMissing(String),
    #[error("visualization retries exhausted; last log:\n{0}")]
    RetriesExhausted(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AgentError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AgentError::Io {
            path: path.into(),
            source,
        }
    }

    /// A schema violation for generated scripts that break a rule.
    pub(crate) fn script_violation(schema_id: &str, failures: Vec<(String, String)>) -> Self {
        AgentError::Llm(LlmError::SchemaViolation(SchemaViolation {
            schema_id: schema_id.to_string(),
            failures: failures
                .into_iter()
                .map(|(path, message)| FieldFailure { path, message })
                .collect(),
        }))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionTarget {
    #[default]
    Local,
    Hpc,
}

impl std::str::FromStr for ExecutionTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(ExecutionTarget::Local),
            "hpc" => Ok(ExecutionTarget::Hpc),
            other => Err(format!(
                "unknown execution target {other:?} (expected local or hpc)"
            )),
        }
    }
}

/// A natural-language simulation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowRequest {
    pub text: String,
    #[serde(default)]
    pub attachments: Vec<PathBuf>,
    #[serde(default)]
    pub execution_target: ExecutionTarget,
    #[serde(default)]
    pub hpc: Option<HpcConfig>,
}

impl WorkflowRequest {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            attachments: Vec::new(),
            execution_target: ExecutionTarget::Local,
            hpc: None,
        }
    }

    /// Whether the requirement asks for a plot or rendering.
    pub fn visualization_requested(&self) -> bool {
        let t = self.text.to_lowercase();
        ["visualiz", "visualis", "plot", "render"]
            .iter()
            .any(|k| t.contains(k))
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.text.trim().is_empty() {
            return Err(AgentError::Precondition(
                "the requirement text is empty".into(),
            ));
        }
        if let Some(missing) = self.attachments.iter().find(|p| !p.is_file()) {
            return Err(AgentError::Precondition(format!(
                "attachment {} does not exist",
                missing.display()
            )));
        }
        if let Some(hpc) = &self.hpc {
            hpc.validate()?;
        }
        Ok(())
    }
}

/// Everything an agent may call out to.
#[derive(Clone)]
pub struct Services {
    pub gateway: Gateway,
    pub retriever: Retriever,
    pub executor: Arc<dyn Executor>,
    pub scheduler: Option<Arc<dyn SchedulerClient>>,
}

impl std::fmt::Debug for Services {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Services")
            .field("gateway", &self.gateway)
            .field("retriever", &self.retriever)
            .finish_non_exhaustive()
    }
}

impl Services {
    /// The same services logging to one more audit transcript.
    pub fn with_audit(&self, log: Arc<crate::llm::AuditLog>) -> Self {
        Self {
            gateway: self.gateway.with_audit(log),
            ..self.clone()
        }
    }
}

/// `<tag name="path">content</tag>` blocks for every text file in `files`.
pub(crate) fn render_files<'a>(
    tag: &str,
    files: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> String {
    files
        .into_iter()
        .map(|(path, text)| format!("<{tag} name=\"{path}\">\n{}\n</{tag}>", text.trim_end()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Newline-separated relative paths of the case configuration.
pub(crate) fn dir_structure(state: &crate::case::CaseState) -> String {
    state.files.keys().cloned().collect::<Vec<_>>().join("\n")
}

/// Path relative to `root`, slash-separated, or the path itself outside it.
pub(crate) fn rel_display(root: &Path, path: &Path) -> String {
    match path.strip_prefix(root) {
        Ok(rel) if rel.as_os_str().is_empty() => ".".to_string(),
        Ok(rel) => rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/"),
        Err(_) => path.display().to_string(),
    }
}
