//! Classification of the requirement and decomposition into a file plan.

use std::collections::BTreeMap;

use serde_json::Value;

use super::{AgentError, ExecutionTarget, WorkflowRequest};
use crate::case::state::is_artifact;
use crate::case::{validate_case_path, CaseMetadata, PatchEntry, Plan, Task};
use crate::kb::known_solvers;
use crate::llm::schema::{case_description_schema, decomposition_schema};
use crate::llm::{render_prompt, vars, Gateway};
use crate::retrieval::{Retriever, Scope, WorkflowStage};

/// Files every plan contains.
pub const MANDATORY_FILES: [&str; 3] = [
    "system/controlDict",
    "system/fvSchemes",
    "system/fvSolution",
];

fn canonical_solver(name: &str) -> Option<&'static str> {
    known_solvers()
        .iter()
        .copied()
        .find(|s| s.eq_ignore_ascii_case(name.trim()))
}

fn metadata_from(value: &Value) -> CaseMetadata {
    let field = |k: &str| value[k].as_str().unwrap_or_default().trim().to_string();
    CaseMetadata {
        case_name: field("case_name"),
        case_domain: field("case_domain"),
        case_category: field("case_category"),
        case_solver: field("case_solver"),
    }
}

/// Classifies the requirement. The solver must come from the known list;
/// an unknown solver gets one corrective retry.
pub fn architect_classify(
    request: &WorkflowRequest,
    gateway: &Gateway,
) -> Result<CaseMetadata, AgentError> {
    let mut bundle = render_prompt(
        "case_description",
        &vars([("user_requirement", request.text.trim())]),
    )?;
    let solvers = known_solvers().join(", ");
    bundle
        .system
        .push_str(&format!("\nAvailable solvers are: {solvers}."));
    let schema = case_description_schema();

    let mut meta = metadata_from(&gateway.chat_structured(&bundle, &schema)?);
    if canonical_solver(&meta.case_solver).is_none() {
        log::warn!(
            "model chose unknown solver {:?}; asking again",
            meta.case_solver
        );
        let mut retry = bundle.clone();
        retry.user.push_str(&format!(
            "\n\nThe case solver {:?} is not available. Choose case_solver from: {solvers}.",
            meta.case_solver
        ));
        meta = metadata_from(&gateway.chat_structured(&retry, &schema)?);
    }
    match canonical_solver(&meta.case_solver) {
        Some(solver) => {
            meta.case_solver = solver.to_string();
            Ok(meta)
        }
        None => Err(AgentError::UnknownSolver(meta.case_solver)),
    }
}

fn retrieval_query(request: &WorkflowRequest, meta: &CaseMetadata) -> String {
    format!("{}\n{}", meta.describe(), request.text.trim())
}

/// `There are N files in Directory: d` lines for a newline-separated file list.
fn dir_counts(files: &str) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for file in files.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let dir = file.rsplit_once('/').map(|(d, _)| d).unwrap_or(".");
        *counts.entry(dir).or_default() += 1;
    }
    counts
        .iter()
        .map(|(d, n)| format!("There are {n} files in Directory: {d}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Whether a planned path is something the writer should generate.
fn plannable(path: &str) -> bool {
    validate_case_path(path).is_ok()
        && !is_artifact(path)
        && path != "Allrun"
        && !path.starts_with("mesh/")
        && !path.starts_with("viz/")
}

/// Retrieves a reference directory structure, asks for subtasks and turns
/// them into a tier-ordered plan with the mandatory system files.
pub fn architect_plan(
    request: &WorkflowRequest,
    meta: &CaseMetadata,
    retriever: &Retriever,
    gateway: &Gateway,
) -> Result<Plan, AgentError> {
    let query = retrieval_query(request, meta);
    let structure = retriever.retrieve(gateway, &query, WorkflowStage::Structure, meta, None)?;
    let (reference_case, reference_files) = match structure.best() {
        Some(doc) => (
            Some(doc.record.case_path.clone()),
            doc.record.detail.clone(),
        ),
        None => (None, String::new()),
    };
    let dir_structure = if reference_files.trim().is_empty() {
        "(none)".to_string()
    } else {
        reference_files.trim_end().to_string()
    };
    let bundle = render_prompt(
        "task_decomposition",
        &vars([
            ("user_requirement", request.text.trim().to_string()),
            ("dir_structure", dir_structure),
            ("dir_counts_str", dir_counts(&reference_files)),
        ]),
    )?;
    let value = gateway.chat_structured(&bundle, &decomposition_schema())?;

    let mut tasks = Vec::new();
    for subtask in value["subtasks"].as_array().into_iter().flatten() {
        let file = subtask["file_name"].as_str().unwrap_or_default().trim();
        let folder = subtask["folder_name"].as_str().unwrap_or_default().trim();
        let path = PatchEntry::in_folder(folder, file, "").path;
        if plannable(&path) {
            tasks.push(Task::new(path));
        } else {
            log::warn!("dropping planned path {path:?}");
        }
    }
    if tasks.is_empty() {
        return Err(AgentError::EmptyPlan);
    }
    let mut plan = Plan::from_tasks(tasks);
    for file in MANDATORY_FILES {
        plan.push(Task::new(file));
    }
    if request.execution_target == ExecutionTarget::Hpc {
        plan.push(Task::new("system/decomposeParDict"));
    }
    for task in &mut plan.tasks {
        task.constraints = file_context(
            retriever,
            gateway,
            request,
            meta,
            reference_case.as_deref(),
            &task.file,
        )?;
    }
    Ok(plan)
}

/// Reference content for one file, preferring the reference case.
pub fn file_context(
    retriever: &Retriever,
    gateway: &Gateway,
    request: &WorkflowRequest,
    meta: &CaseMetadata,
    reference_case: Option<&str>,
    file: &str,
) -> Result<String, AgentError> {
    let scope = reference_case.map(|case| Scope {
        case_path: case.to_string(),
        file_path: Some(file.to_string()),
    });
    let query = format!("{file}\n{}", retrieval_query(request, meta));
    let ctx = retriever.retrieve(
        gateway,
        &query,
        WorkflowStage::Details,
        meta,
        scope.as_ref(),
    )?;
    Ok(ctx.rendered)
}
