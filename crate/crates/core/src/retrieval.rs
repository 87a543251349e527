//! Stage-indexed retrieval: embed the query, take the nearest documents from
//! the stage's index, keep those above the threshold whose solver matches, and
//! format them for a prompt.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::CaseMetadata;
use crate::kb::{EmbeddingVector, IndexKind, KbError, KnowledgeBase, ScoredDocument};
use crate::llm::{render_fragment, Gateway, LlmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkflowStage {
    Structure,
    Details,
    Scripts,
    Commands,
}

impl WorkflowStage {
    pub fn as_str(self) -> &'static str {
        match self {
            WorkflowStage::Structure => "structure",
            WorkflowStage::Details => "details",
            WorkflowStage::Scripts => "scripts",
            WorkflowStage::Commands => "commands",
        }
    }
}

pub fn select_index(stage: WorkflowStage) -> IndexKind {
    match stage {
        WorkflowStage::Structure => IndexKind::TutorialStructure,
        WorkflowStage::Details => IndexKind::TutorialDetails,
        WorkflowStage::Scripts => IndexKind::ExecutionScripts,
        WorkflowStage::Commands => IndexKind::CommandDocumentation,
    }
}

/// Case-insensitive solver match; an empty solver on either side matches.
pub fn validate_solver(doc: &ScoredDocument, query_meta: &CaseMetadata) -> bool {
    let doc_solver = doc.record.solver.trim();
    let query_solver = query_meta.case_solver.trim();
    doc_solver.is_empty()
        || query_solver.is_empty()
        || doc_solver.eq_ignore_ascii_case(query_solver)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub n_initial: usize,
    pub tau: f64,
    pub max_context: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            n_initial: 10,
            tau: 0.25,
            max_context: 3,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.max_context == 0 || self.max_context > self.n_initial {
            return Err(RetrievalError::InvalidConfig(format!(
                "need 1 <= max_context ({}) <= n_initial ({})",
                self.max_context, self.n_initial
            )));
        }
        if self.tau.is_nan() {
            return Err(RetrievalError::InvalidConfig("tau is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Embedding(#[from] LlmError),
    #[error(transparent)]
    Index(#[from] KbError),
    #[error("invalid retrieval configuration: {0}")]
    InvalidConfig(String),
}

/// Restricts a details retrieval to one case, and optionally one file, found
/// by an earlier stage.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Scope {
    pub case_path: String,
    pub file_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextKnowledge {
    pub stage: WorkflowStage,
    pub documents: Vec<ScoredDocument>,
    pub rendered: String,
    /// Set when nothing passed the filters and the best unfiltered document
    /// was used instead.
    pub low_confidence: bool,
}

impl ContextKnowledge {
    pub fn best(&self) -> Option<&ScoredDocument> {
        self.documents.first()
    }
}

/// Runs one retrieval. With a scope, documents of the scoped case (and file)
/// are ranked alone whenever the case has any; otherwise the whole index is used.
pub fn retrieve(
    query: &str,
    stage: WorkflowStage,
    config: &RetrievalConfig,
    kb: &KnowledgeBase,
    embed: &dyn Fn(&str) -> Result<EmbeddingVector, LlmError>,
    query_meta: &CaseMetadata,
    scope: Option<&Scope>,
) -> Result<ContextKnowledge, RetrievalError> {
    config.validate()?;
    let index = kb.index(select_index(stage))?;
    let query_vec = embed(query)?;

    let mut ranked = Vec::new();
    if let Some(scope) = scope {
        ranked = index.ranked_by(&query_vec, |r| {
            r.case_path == scope.case_path
                && scope
                    .file_path
                    .as_ref()
                    .is_none_or(|f| r.file_path.as_ref() == Some(f))
        });
    }
    if ranked.is_empty() {
        ranked = index.ranked_by(&query_vec, |_| true);
    }
    ranked.truncate(config.n_initial);

    let mut documents: Vec<ScoredDocument> = ranked
        .iter()
        .filter(|d| d.similarity > config.tau && validate_solver(d, query_meta))
        .take(config.max_context)
        .cloned()
        .collect();
    let low_confidence = documents.is_empty() && !ranked.is_empty();
    if low_confidence {
        documents.push(ranked[0].clone());
    }
    let rendered = render_documents(stage, &documents)?;
    Ok(ContextKnowledge {
        stage,
        documents,
        rendered,
        low_confidence,
    })
}

fn render_documents(
    stage: WorkflowStage,
    documents: &[ScoredDocument],
) -> Result<String, LlmError> {
    let mut body = String::new();
    for (rank, doc) in documents.iter().enumerate() {
        let r = &doc.record;
        let _ = write!(body, "[{}] case: {}", rank + 1, r.case_path);
        if !r.solver.is_empty() {
            let _ = write!(body, " (solver {})", r.solver);
        }
        if let Some(file) = &r.file_path {
            let _ = write!(body, ", file: {file}");
        }
        let _ = writeln!(body, ", similarity {:.3}", doc.similarity);
        body.push_str(r.detail.trim_end());
        body.push_str("\n\n");
    }
    if documents.is_empty() {
        body.push_str("(no reference documents)\n");
    }
    let vars = BTreeMap::from([("documents".to_string(), body.trim_end().to_string())]);
    render_fragment(&format!("context_{}", stage.as_str()), &vars)
}

/// A knowledge base with a configuration and a gateway for query embeddings.
#[derive(Debug, Clone)]
pub struct Retriever {
    pub kb: Arc<KnowledgeBase>,
    pub config: RetrievalConfig,
}

impl Retriever {
    pub fn new(kb: Arc<KnowledgeBase>, config: RetrievalConfig) -> Self {
        Self { kb, config }
    }

    pub fn retrieve(
        &self,
        gateway: &Gateway,
        query: &str,
        stage: WorkflowStage,
        meta: &CaseMetadata,
        scope: Option<&Scope>,
    ) -> Result<ContextKnowledge, RetrievalError> {
        retrieve(
            query,
            stage,
            &self.config,
            &self.kb,
            &|t| gateway.embed_text(t),
            meta,
            scope,
        )
    }
}
