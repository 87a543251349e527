//! Post-processing images from a finished case.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::exec::{run_logged, CommandSpec};
use super::writer::normalize;
use super::{rel_display, AgentError, Services};
use crate::case::state::is_result_time;
use crate::case::{CaseFile, CaseState};
use crate::llm::schema::strip_code_fences;
use crate::llm::{render_prompt, vars};

pub const VIZ_SCRIPT: &str = "viz/visualize.py";
pub const VIZ_OUTPUT_DIR: &str = "viz";
/// Logical command name of the visualization script run.
pub const VIZ_COMMAND: &str = "viz_script";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VizToolchain {
    #[default]
    Pyvista,
    Paraview,
}

impl VizToolchain {
    pub fn interpreter(self) -> &'static str {
        match self {
            VizToolchain::Pyvista => "python3",
            VizToolchain::Paraview => "pvpython",
        }
    }

    fn label(self) -> &'static str {
        match self {
            VizToolchain::Pyvista => "PyVista",
            VizToolchain::Paraview => "ParaView (paraview.simple)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VizConfig {
    pub toolchain: VizToolchain,
    /// Repair rounds after the first failed script.
    pub retry_limit: u32,
    /// Overrides the toolchain interpreter.
    pub interpreter: Option<String>,
    pub timeout_secs: Option<u64>,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self {
            toolchain: VizToolchain::Pyvista,
            retry_limit: 3,
            interpreter: None,
            timeout_secs: None,
        }
    }
}

impl VizConfig {
    pub fn interpreter(&self) -> String {
        self.interpreter
            .clone()
            .unwrap_or_else(|| self.toolchain.interpreter().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VizArtifact {
    /// Root-relative path of the first image produced.
    pub path: String,
    pub fields: Vec<String>,
    pub attempts: u32,
}

/// Fields named in the requirement: quoted names such as `('U')` and the
/// words velocity, pressure and temperature. Defaults to `U`.
pub fn requested_fields(requirement: &str) -> Vec<String> {
    let mut fields: Vec<String> = Vec::new();
    fn push(fields: &mut Vec<String>, f: &str) {
        if !fields.iter().any(|x| x == f) {
            fields.push(f.to_string());
        }
    }
    for quote in ['\'', '"'] {
        let parts: Vec<&str> = requirement.split(quote).collect();
        for inner in parts.iter().skip(1).step_by(2).take(parts.len() / 2) {
            if matches!(
                *inner,
                "U" | "p" | "T" | "k" | "omega" | "epsilon" | "nut" | "alpha.water" | "p_rgh"
            ) {
                push(&mut fields, inner);
            }
        }
    }
    let lower = requirement.to_lowercase();
    for (word, field) in [("velocity", "U"), ("pressure", "p"), ("temperature", "T")] {
        if lower.contains(word) {
            push(&mut fields, field);
        }
    }
    if fields.is_empty() {
        push(&mut fields, "U");
    }
    fields
}

fn png_files(dir: &Path, root: &Path, out: &mut BTreeSet<String>) {
    let Ok(entries) = fs::read_dir(dir) else {
        return;
    };
    for entry in entries.filter_map(|e| e.ok()) {
        let path = entry.path();
        if path.is_dir() {
            png_files(&path, root, out);
        } else if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            out.insert(rel_display(root, &path));
        }
    }
}

fn time_dirs(root: &Path) -> String {
    let mut times: Vec<(f64, String)> = fs::read_dir(root)
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n == "0" || is_result_time(n))
        .filter_map(|n| n.parse::<f64>().ok().map(|t| (t, n)))
        .collect();
    times.sort_by(|a, b| a.0.total_cmp(&b.0));
    if times.is_empty() {
        return "(none)".into();
    }
    times
        .into_iter()
        .map(|(_, n)| n)
        .collect::<Vec<_>>()
        .join(", ")
}

fn tail(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

/// Generates and runs a plotting script. Success needs a new `.png` under
/// the case root; a failure is repaired up to `retry_limit` times.
pub fn visualize(
    state: &mut CaseState,
    requirement: &str,
    services: &Services,
    config: &VizConfig,
) -> Result<VizArtifact, AgentError> {
    let interpreter = config.interpreter();
    if !services.executor.available(&interpreter) {
        return Err(AgentError::VizToolMissing(interpreter));
    }
    let fields = requested_fields(requirement);
    let bundle = render_prompt(
        "visualization",
        &vars([
            ("toolchain", config.toolchain.label().to_string()),
            ("output_dir", VIZ_OUTPUT_DIR.to_string()),
            ("user_requirement", requirement.trim().to_string()),
            ("fields", fields.join(", ")),
            ("time_dirs", time_dirs(&state.root)),
        ]),
    )?;
    let mut script = normalize(strip_code_fences(&services.gateway.chat_text(&bundle)?));
    let output_dir: PathBuf = state.root.join(VIZ_OUTPUT_DIR);
    let mut attempts = 0;
    loop {
        attempts += 1;
        state.put(CaseFile::from_text(VIZ_SCRIPT, script.clone())?)?;
        let mut stale = BTreeSet::new();
        png_files(&output_dir, &state.root, &mut stale);
        for rel in &stale {
            let path = state.root.join(rel);
            fs::remove_file(&path).map_err(|e| AgentError::io(&path, e))?;
        }
        let mut before = BTreeSet::new();
        png_files(&state.root, &state.root, &mut before);
        let cmd = CommandSpec::new(
            interpreter.clone(),
            vec![VIZ_SCRIPT.to_string()],
            &state.root,
        )
        .named(VIZ_COMMAND)
        .with_timeout(config.timeout_secs.map(Duration::from_secs));
        let output = run_logged(
            &services.gateway,
            services.executor.as_ref(),
            &cmd,
            &state.root,
        )?;
        let mut after = BTreeSet::new();
        png_files(&state.root, &state.root, &mut after);
        let produced = after.difference(&before).next().cloned();
        if let (true, Some(path)) = (output.success(), &produced) {
            return Ok(VizArtifact {
                path: path.clone(),
                fields,
                attempts,
            });
        }
        let mut error_log = tail(&output.combined(), 40);
        if output.success() {
            error_log.push_str(&format!(
                "\nthe script finished but wrote no .png file under {VIZ_OUTPUT_DIR}/"
            ));
        }
        if attempts > config.retry_limit {
            return Err(AgentError::RetriesExhausted(error_log));
        }
        log::warn!("visualization attempt {attempts} failed; requesting a repair");
        let repair = render_prompt(
            "script_repair",
            &vars([
                ("tool", "Visualization".to_string()),
                ("script", script.clone()),
                ("error_log", error_log),
                ("user_requirement", requirement.trim().to_string()),
            ]),
        )?;
        script = normalize(strip_code_fences(&services.gateway.chat_text(&repair)?));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fields_from_text() {
        assert_eq!(
            requested_fields("lid-driven cavity, visualize ('U')"),
            ["U"]
        );
        assert_eq!(
            requested_fields("plot the pressure and temperature"),
            ["p", "T"]
        );
        assert_eq!(requested_fields("plot 'p' and velocity"), ["p", "U"]);
        assert_eq!(requested_fields("make a picture"), ["U"]);
    }

    #[test]
    fn time_listing_is_numeric() {
        let dir = tempfile::tempdir().unwrap();
        for d in ["0", "10", "2", "system"] {
            fs::create_dir(dir.path().join(d)).unwrap();
        }
        assert_eq!(time_dirs(dir.path()), "0, 2, 10");
    }
}
