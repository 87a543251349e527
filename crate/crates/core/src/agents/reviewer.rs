//! Error analysis and file correction in two model calls.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::logs::ErrorRecord;
use super::writer::normalize;
use super::{render_files, AgentError};
use crate::case::state::is_artifact;
use crate::case::{
    validate_case_path, CaseMetadata, CaseState, ConfigPatch, FileKind, PatchEntry, PatchProvenance,
};
use crate::llm::schema::file_correction_schema;
use crate::llm::{render_fragment, render_prompt, vars, Gateway};
use crate::retrieval::{Retriever, WorkflowStage};

/// One completed correction attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// 1-based loop iteration.
    pub iteration: u32,
    /// Case generation the errors were observed on.
    pub state_generation: u64,
    pub errors: Vec<ErrorRecord>,
    pub patch: ConfigPatch,
    pub review_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewOutcome {
    pub analysis: String,
    pub patch: ConfigPatch,
    /// Entries the model returned that were rejected, as `(path, reason)`.
    pub dropped: Vec<(String, String)>,
}

fn escape_attr(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('"', "&quot;")
        .replace('<', "&lt;")
}

/// `<error location=".." severity="..">message</error>` lines.
pub fn render_error_logs(errors: &[ErrorRecord]) -> String {
    errors
        .iter()
        .map(|e| {
            format!(
                "<error location=\"{}\" severity=\"{}\">{}</error>",
                escape_attr(&e.location),
                e.severity.as_str(),
                e.message
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// One `<Attempt N>` block per history entry.
pub fn render_history(history: &[HistoryEntry]) -> Result<String, AgentError> {
    let blocks = history
        .iter()
        .map(|h| {
            render_fragment(
                "history_attempt",
                &vars([
                    ("attempt_number", h.iteration.to_string()),
                    ("error_logs", render_error_logs(&h.errors)),
                    ("review_content", h.review_text.trim().to_string()),
                ]),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(blocks.join("\n"))
}

fn foamfiles(state: &CaseState) -> String {
    render_files(
        "foamfile",
        state
            .files
            .values()
            .filter(|f| matches!(f.kind, FileKind::Dictionary | FileKind::Script))
            .filter_map(|f| f.text().map(|t| (f.path.as_str(), t))),
    )
}

/// Why a returned entry cannot be applied, if it cannot.
fn rejection(path: &str, seen: &BTreeSet<String>) -> Option<String> {
    if let Err(e) = validate_case_path(path) {
        return Some(e.to_string());
    }
    if is_artifact(path) {
        return Some("run output and bookkeeping files cannot be patched".into());
    }
    if seen.contains(path) {
        return Some("duplicate entry".into());
    }
    None
}

/// Diagnoses the errors, then asks for corrected files. Entries with unsafe
/// or duplicate paths are dropped; an empty remainder is an error.
#[allow(clippy::too_many_arguments)]
pub fn review(
    errors: &[ErrorRecord],
    state: &CaseState,
    history: &[HistoryEntry],
    requirement: &str,
    meta: &CaseMetadata,
    retriever: &Retriever,
    gateway: &Gateway,
) -> Result<ReviewOutcome, AgentError> {
    if errors.is_empty() {
        return Err(AgentError::Precondition(
            "review needs at least one error record".into(),
        ));
    }
    let query = format!("{}\n{}", meta.describe(), requirement.trim());
    let reference = retriever.retrieve(gateway, &query, WorkflowStage::Details, meta, None)?;
    let files = foamfiles(state);
    let error_logs = render_error_logs(errors);
    let mut analysis_vars = vars([
        ("tutorial_reference", reference.rendered),
        ("foamfiles", files.clone()),
        ("error_logs", error_logs.clone()),
        ("user_requirement", requirement.trim().to_string()),
    ]);
    let template = if history.is_empty() {
        "error_analysis_initial"
    } else {
        analysis_vars.insert("history".into(), render_history(history)?);
        "error_analysis_subsequent"
    };
    let analysis = gateway
        .chat_text(&render_prompt(template, &analysis_vars)?)?
        .trim()
        .to_string();

    let correction = render_prompt(
        "file_correction",
        &vars([
            ("foamfiles", files),
            ("error_logs", error_logs),
            ("review_content", analysis.clone()),
            ("user_requirement", requirement.trim().to_string()),
        ]),
    )?;
    let value = gateway.chat_structured(&correction, &file_correction_schema())?;
    let mut patch = ConfigPatch::new(PatchProvenance::Reviewer);
    let mut dropped = Vec::new();
    let mut seen = BTreeSet::new();
    for item in value["list_foamfile"].as_array().into_iter().flatten() {
        let field = |k: &str| item[k].as_str().unwrap_or("").to_string();
        let entry = PatchEntry::in_folder(
            &field("folder_name"),
            &field("file_name"),
            normalize(&field("content")),
        );
        match rejection(&entry.path, &seen) {
            Some(why) => {
                log::warn!("dropping reviewer entry {:?}: {why}", entry.path);
                dropped.push((entry.path, why));
            }
            None => {
                seen.insert(entry.path.clone());
                patch.entries.push(entry);
            }
        }
    }
    if patch.is_empty() {
        return Err(AgentError::EmptyPatch { analysis });
    }
    patch.validate()?;
    Ok(ReviewOutcome {
        analysis,
        patch,
        dropped,
    })
}
