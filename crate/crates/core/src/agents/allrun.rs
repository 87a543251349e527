//! Allrun generation with a command whitelist and ordering guarantees.

use super::runner::parse_allrun;
use super::writer::normalize;
use super::{dir_structure, AgentError, ExecutionTarget};
use crate::case::{CaseFile, CaseMetadata, CaseState};
use crate::kb::builtin_commands;
use crate::llm::schema::strip_code_fences;
use crate::llm::{render_prompt, vars, Gateway};
use crate::retrieval::{Retriever, WorkflowStage};

/// File utilities allowed next to the curated OpenFOAM commands.
pub const SHELL_UTILITIES: [&str; 6] = ["cp", "mkdir", "mv", "ln", "touch", "sed"];

/// Result of checking a script against the whitelist.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AllrunCheck {
    /// `(line N, reason)` pairs.
    pub violations: Vec<(String, String)>,
}

impl AllrunCheck {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn diagnostics(&self) -> String {
        self.violations
            .iter()
            .map(|(at, why)| format!("{at}: {why}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn allowed(name: &str, solver: &str) -> bool {
    name == solver
        || SHELL_UTILITIES.contains(&name)
        || builtin_commands().iter().any(|c| c.name == name)
}

/// Checks every executable line against the command list plus the solver.
pub fn validate_allrun(script: &str, solver: &str) -> AllrunCheck {
    let mut check = AllrunCheck::default();
    for cmd in parse_allrun(script) {
        let at = format!("line {}", cmd.line);
        if let Some(why) = cmd.unsupported {
            check
                .violations
                .push((at, format!("{why} in {:?}", cmd.text)));
        } else if cmd.name.is_empty() {
            check
                .violations
                .push((at, format!("no command in {:?}", cmd.text)));
        } else if !allowed(&cmd.name, solver) {
            check.violations.push((
                at,
                format!("command {:?} is not in the allowed command list", cmd.name),
            ));
        }
    }
    check
}

fn position_of(lines: &[String], name: &str) -> Option<usize> {
    lines
        .iter()
        .position(|l| parse_allrun(l).first().is_some_and(|c| c.name == name))
}

/// Moves or inserts `command` so that it runs before the solver.
fn place_before_solver(lines: &mut Vec<String>, command: &str, solver: &str) {
    let name = command.split_whitespace().next().unwrap_or(command);
    let solver_at = position_of(lines, solver).expect("solver line present");
    match position_of(lines, name) {
        Some(i) if i < solver_at => {}
        Some(i) => {
            let line = lines.remove(i);
            let solver_at = position_of(lines, solver).expect("solver line present");
            lines.insert(solver_at, line);
        }
        None => lines.insert(solver_at, command.to_string()),
    }
}

/// Makes the ordering rules hold: mesh commands (and, for HPC,
/// `decomposePar`) precede the solver, and the HPC solver runs with
/// `-parallel` under the MPI launcher.
pub fn enforce_order(
    script: &str,
    mesh_commands: &[String],
    solver: &str,
    target: ExecutionTarget,
    np: u32,
) -> String {
    let mut lines: Vec<String> = script.lines().map(str::to_string).collect();
    if !lines.first().is_some_and(|l| l.starts_with("#!")) {
        lines.insert(0, "#!/bin/sh".into());
    }
    if position_of(&lines, solver).is_none() {
        lines.push(solver.to_string());
    }
    for command in mesh_commands {
        place_before_solver(&mut lines, command, solver);
    }
    if target == ExecutionTarget::Hpc {
        place_before_solver(&mut lines, "decomposePar", solver);
        let at = position_of(&lines, solver).expect("solver line present");
        let cmd = parse_allrun(&lines[at]).remove(0);
        if !cmd.parallel {
            let mut line = format!("mpirun -np {np} {solver}");
            for arg in &cmd.args {
                line.push(' ');
                line.push_str(arg);
            }
            line.push_str(" -parallel");
            lines[at] = line;
        }
    }
    normalize(&lines.join("\n"))
}

/// Generates the Allrun script, repairs whitelist violations once and
/// writes it as an executable file.
#[allow(clippy::too_many_arguments)]
pub fn generate_allrun(
    state: &mut CaseState,
    meta: &CaseMetadata,
    requirement: &str,
    mesh_commands: &[String],
    target: ExecutionTarget,
    np: u32,
    retriever: &Retriever,
    gateway: &Gateway,
) -> Result<CaseFile, AgentError> {
    let query = format!("{}\n{}", meta.describe(), requirement.trim());
    let reference = retriever.retrieve(gateway, &query, WorkflowStage::Scripts, meta, None)?;
    let commands_help = builtin_commands()
        .iter()
        .map(|c| c.help_line())
        .collect::<Vec<_>>()
        .join("\n");
    let mut case_info = meta.describe();
    if !mesh_commands.is_empty() {
        case_info.push_str(&format!(
            "\nmesh commands, run before the solver: {}",
            mesh_commands.join("; ")
        ));
    }
    if target == ExecutionTarget::Hpc {
        case_info.push_str(&format!(
            "\nexecution: parallel on {np} processes; run decomposePar first and the solver with -parallel"
        ));
    }
    let bundle = render_prompt(
        "allrun_generation",
        &vars([
            ("commands_help", commands_help),
            ("allrun_reference", reference.rendered),
            ("user_requirement", requirement.trim().to_string()),
            ("dir_structure", dir_structure(state)),
            ("case_info", case_info),
        ]),
    )?;
    let mut script = normalize(strip_code_fences(&gateway.chat_text(&bundle)?));
    let mut check = validate_allrun(&script, &meta.case_solver);
    if !check.is_ok() {
        log::warn!("Allrun rejected:\n{}", check.diagnostics());
        let repair = render_prompt(
            "script_repair",
            &vars([
                ("tool", "Allrun".to_string()),
                ("script", script.clone()),
                ("error_log", check.diagnostics()),
                ("user_requirement", requirement.trim().to_string()),
            ]),
        )?;
        script = normalize(strip_code_fences(&gateway.chat_text(&repair)?));
        check = validate_allrun(&script, &meta.case_solver);
    }
    if !check.is_ok() {
        return Err(AgentError::script_violation("allrun", check.violations));
    }
    let script = enforce_order(&script, mesh_commands, &meta.case_solver, target, np);
    let file = CaseFile::from_text("Allrun", script)?;
    state.put(file.clone())?;
    Ok(file)
}
