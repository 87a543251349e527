//! Line-delimited audit records. The same format serves as replay fixtures.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::LlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRecord {
    pub template_id: String,
    pub request_hash: String,
    pub replay_key: String,
    pub model: String,
    pub temperature: f64,
    #[serde(default)]
    pub schema_id: Option<String>,
    /// 1 for the first request, incremented by each schema-repair retry.
    pub attempt: u32,
    pub system: String,
    pub user: String,
    pub response: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub text_hash: String,
    pub chars: usize,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubprocessRecord {
    pub program: String,
    pub args: Vec<String>,
    pub cwd: String,
    pub exit_code: Option<i32>,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranscriptRecord {
    Chat(ChatRecord),
    Embedding(EmbeddingRecord),
    Subprocess(SubprocessRecord),
}

/// Append-only transcript file shared by concurrent writers.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    lock: Mutex<()>,
}

impl AuditLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &TranscriptRecord) -> Result<(), LlmError> {
        let line = serde_json::to_string(record).expect("transcript records serialize");
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)
                .map_err(|e| LlmError::Transcript(format!("{}: {e}", dir.display())))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| LlmError::Transcript(format!("{}: {e}", self.path.display())))?;
        writeln!(file, "{line}")
            .map_err(|e| LlmError::Transcript(format!("{}: {e}", self.path.display())))
    }
}

/// Reads a transcript file. Blank lines are skipped; a malformed line is an
/// error naming the line number.
pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, LlmError> {
    let file = fs::File::open(path)
        .map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| LlmError::Transcript(format!("{}:{}: {e}", path.display(), n + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Chat records of a transcript, in order.
pub fn chat_records(records: &[TranscriptRecord]) -> impl Iterator<Item = &ChatRecord> {
    records.iter().filter_map(|r| match r {
        TranscriptRecord::Chat(c) => Some(c),
        _ => None,
    })
}
