//! The engine as a tool server: eleven functions with strict schemas, an
//! asynchronous job registry and per-case persistence.

pub mod registry;
pub mod schema;
pub mod service;
pub mod transport;

use std::path::PathBuf;

use serde_json::{json, Value};
use thiserror::Error;

use crate::agents::AgentError;
use crate::case::CaseError;
use crate::llm::FieldFailure;
use crate::orchestrator::OrchestratorError;

pub use registry::{
    CaseRecord, JobKind, JobRecord, JobStatus, LoadReport, Registry, RESTART_REASON,
};
pub use schema::{tool_spec, tool_specs, CallMode, ToolSpec};
pub use service::{McpService, ServiceConfig};
pub use transport::{bind_socket, handle_message, serve_socket, serve_stdio, PROTOCOL_VERSION};

pub const UNKNOWN_FUNCTION: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;
pub const INTERNAL_ERROR: i64 = -32603;
pub const UNKNOWN_CASE: i64 = -32001;
pub const UNKNOWN_JOB: i64 = -32002;

#[derive(Debug, Error)]
pub enum McpError {
    #[error("unknown function {0:?}")]
    UnknownFunction(String),
    #[error("arguments of {function} do not match its schema: {}", list(.failures))]
    SchemaViolation {
        function: String,
        failures: Vec<FieldFailure>,
    },
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("another server is using the store at {0}")]
    StoreLocked(PathBuf),
    #[error("another server is listening on {0}")]
    AddressInUse(PathBuf),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Internal(String),
}

fn list(failures: &[FieldFailure]) -> String {
    failures
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl From<OrchestratorError> for McpError {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::UnknownCase(id) => McpError::UnknownCase(id),
            OrchestratorError::Agent(e) => McpError::Agent(e),
            OrchestratorError::Io { path, source } => McpError::Io { path, source },
            other => McpError::Internal(other.to_string()),
        }
    }
}

impl McpError {
    /// The protocol error code; each client-visible kind has its own.
    pub fn code(&self) -> i64 {
        match self {
            McpError::UnknownFunction(_) => UNKNOWN_FUNCTION,
            McpError::SchemaViolation { .. } => INVALID_PARAMS,
            McpError::UnknownCase(_) => UNKNOWN_CASE,
            McpError::UnknownJob(_) => UNKNOWN_JOB,
            _ => INTERNAL_ERROR,
        }
    }

    /// Structured detail sent with the error.
    pub fn data(&self) -> Option<Value> {
        match self {
            McpError::SchemaViolation { failures, .. } => Some(json!({
                "failures": failures
                    .iter()
                    .map(|f| json!({"path": f.path, "message": f.message}))
                    .collect::<Vec<_>>(),
            })),
            _ => None,
        }
    }
}
