//! Prompt templates shipped with the crate and `{placeholder}` rendering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LlmError;

macro_rules! template {
    ($id:literal, $system:literal, $user:literal) => {
        (
            $id,
            include_str!(concat!("../../templates/", $system)),
            include_str!(concat!("../../templates/", $user)),
        )
    };
}

const TEMPLATES: &[(&str, &str, &str)] = &[
    template!(
        "case_description",
        "case_description.system.txt",
        "case_description.user.txt"
    ),
    template!(
        "task_decomposition",
        "task_decomposition.system.txt",
        "task_decomposition.user.txt"
    ),
    template!(
        "file_generation",
        "file_generation.system.txt",
        "file_generation.user.txt"
    ),
    template!(
        "command_generation",
        "command_generation.system.txt",
        "command_generation.user.txt"
    ),
    template!(
        "allrun_generation",
        "allrun_generation.system.txt",
        "allrun_generation.user.txt"
    ),
    template!(
        "error_analysis_initial",
        "error_analysis.system.txt",
        "error_analysis_initial.user.txt"
    ),
    template!(
        "error_analysis_subsequent",
        "error_analysis.system.txt",
        "error_analysis_subsequent.user.txt"
    ),
    template!(
        "file_correction",
        "file_correction.system.txt",
        "file_correction.user.txt"
    ),
    template!(
        "mesh_generation",
        "mesh_generation.system.txt",
        "mesh_generation.user.txt"
    ),
    template!(
        "gmsh_script",
        "gmsh_script.system.txt",
        "gmsh_script.user.txt"
    ),
    template!(
        "script_repair",
        "script_repair.system.txt",
        "script_repair.user.txt"
    ),
    template!(
        "output_repair",
        "output_repair.system.txt",
        "output_repair.user.txt"
    ),
    template!(
        "slurm_generation",
        "slurm_generation.system.txt",
        "slurm_generation.user.txt"
    ),
    template!(
        "visualization",
        "visualization.system.txt",
        "visualization.user.txt"
    ),
];

const FRAGMENTS: &[(&str, &str)] = &[
    (
        "history_attempt",
        include_str!("../../templates/history_attempt.user.txt"),
    ),
    (
        "context_structure",
        include_str!("../../templates/context_structure.txt"),
    ),
    (
        "context_details",
        include_str!("../../templates/context_details.txt"),
    ),
    (
        "context_scripts",
        include_str!("../../templates/context_scripts.txt"),
    ),
    (
        "context_commands",
        include_str!("../../templates/context_commands.txt"),
    ),
];

/// A rendered system/user prompt pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub template_id: String,
    pub system: String,
    pub user: String,
    pub variables: BTreeMap<String, String>,
}

impl PromptBundle {
    /// Bundle that did not come from a shipped template.
    pub fn ad_hoc(
        template_id: impl Into<String>,
        system: impl Into<String>,
        user: impl Into<String>,
    ) -> Self {
        Self {
            template_id: template_id.into(),
            system: system.into(),
            user: user.into(),
            variables: BTreeMap::new(),
        }
    }
}

pub fn template_ids() -> impl Iterator<Item = &'static str> {
    TEMPLATES.iter().map(|(id, _, _)| *id)
}

fn strip_final_newline(s: &str) -> &str {
    s.strip_suffix('\n').unwrap_or(s)
}

/// Renders a system/user template pair.
pub fn render_prompt(
    template_id: &str,
    variables: &BTreeMap<String, String>,
) -> Result<PromptBundle, LlmError> {
    let (_, system, user) = TEMPLATES
        .iter()
        .find(|(id, _, _)| *id == template_id)
        .ok_or_else(|| LlmError::UnknownTemplate(template_id.to_string()))?;
    Ok(PromptBundle {
        template_id: template_id.to_string(),
        system: render_text(strip_final_newline(system), variables)?,
        user: render_text(strip_final_newline(user), variables)?,
        variables: variables.clone(),
    })
}

/// Renders a single-text fragment such as a context or history template.
pub fn render_fragment(
    fragment_id: &str,
    variables: &BTreeMap<String, String>,
) -> Result<String, LlmError> {
    let (_, text) = FRAGMENTS
        .iter()
        .find(|(id, _)| *id == fragment_id)
        .ok_or_else(|| LlmError::UnknownTemplate(fragment_id.to_string()))?;
    render_text(strip_final_newline(text), variables)
}

/// Builds a variable map from string pairs.
pub fn vars<K: Into<String>, V: Into<String>>(
    pairs: impl IntoIterator<Item = (K, V)>,
) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.into(), v.into()))
        .collect()
}

/// Substitutes `{identifier}` placeholders in one pass; values are never
/// re-scanned. Braces around anything other than an identifier stay literal.
pub fn render_text(
    template: &str,
    variables: &BTreeMap<String, String>,
) -> Result<String, LlmError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after
            .find('}')
            .map(|close| &after[..close])
            .filter(|name| is_identifier(name))
        {
            Some(name) => {
                let value = variables
                    .get(name)
                    .ok_or_else(|| LlmError::UnboundPlaceholder(name.to_string()))?;
                out.push_str(value);
                rest = &after[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Placeholder names used by a template text.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut names = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        if let Some(name) = after
            .find('}')
            .map(|c| &after[..c])
            .filter(|n| is_identifier(n))
        {
            if !names.iter().any(|n| n == name) {
                names.push(name.to_string());
            }
        }
        rest = after;
    }
    names
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}
