//! Tutorial knowledge base: ingestion into four record dimensions and four
//! exact-search vector indices.

pub mod commands;
pub mod embedding;
pub mod index;
pub mod ingest;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use commands::{builtin_commands, find_command, known_solvers, CommandDoc};
pub use embedding::{hash_embedding, EmbeddingError, EmbeddingVector, EMBEDDING_DIM};
pub use index::{build_index, IndexKind, KnowledgeBase, ScoredDocument, VectorIndex};
pub use ingest::{
    command_records, ingest_tutorials, Dimension, IngestReport, Ingested, KnowledgeRecord,
};

#[derive(Debug, Error)]
pub enum KbError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("index {} was never built", .0.as_str())]
    MissingIndex(IndexKind),
    #[error("index {} is corrupt: {message}", .kind.as_str())]
    CorruptIndex { kind: IndexKind, message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

impl KbError {
    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        KbError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}
