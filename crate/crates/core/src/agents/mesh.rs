//! Mesh generation by native dictionaries, a Gmsh script or an external file.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::architect::file_context;
use super::exec::{run_logged, CommandSpec};
use super::writer::{finalize_content, normalize};
use super::{AgentError, Services, WorkflowRequest};
use crate::case::{CaseFile, CaseMetadata, CaseState, Plan, Task};
use crate::llm::schema::strip_code_fences;
use crate::llm::{render_prompt, vars};

pub const GMSH_SCRIPT: &str = "mesh/make_mesh.py";
pub const GMSH_OUTPUT: &str = "mesh/geometry.msh";
/// Logical command name of the geometry script run.
pub const GMSH_COMMAND: &str = "mesh_script";

const MESH_DICTS: [&str; 2] = ["system/blockMeshDict", "system/snappyHexMeshDict"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshStrategy {
    Native,
    Gmsh,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub strategy: MeshStrategy,
    pub description: String,
    #[serde(default)]
    pub external_path: Option<PathBuf>,
}

impl MeshSpec {
    /// External when a file is attached, Gmsh when the text asks for it,
    /// native dictionaries otherwise.
    pub fn select(request: &WorkflowRequest) -> Self {
        let text = request.text.to_lowercase();
        let strategy = if !request.attachments.is_empty() {
            MeshStrategy::External
        } else if text.contains("gmsh") || text.contains("msh file") {
            MeshStrategy::Gmsh
        } else {
            MeshStrategy::Native
        };
        Self {
            strategy,
            description: request.text.trim().to_string(),
            external_path: request.attachments.first().cloned(),
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        match self.strategy {
            MeshStrategy::External => match &self.external_path {
                None => Err(AgentError::Precondition(
                    "external mesh needs a file".into(),
                )),
                Some(p) if !p.is_file() => Err(AgentError::Precondition(format!(
                    "external mesh file {} does not exist",
                    p.display()
                ))),
                Some(_) => Ok(()),
            },
            MeshStrategy::Gmsh if self.description.trim().is_empty() => Err(
                AgentError::Precondition("a Gmsh mesh needs a geometry description".into()),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshResult {
    pub strategy: MeshStrategy,
    /// Case files written by the mesh stage.
    pub files: Vec<String>,
    /// Commands the Allrun script must run before the solver.
    pub commands: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshOptions {
    /// Repair rounds for a failing geometry script.
    pub max_retries: u32,
    /// Interpreter for the geometry script.
    pub interpreter: String,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
    /// When false the geometry script is written but not run.
    #[serde(default = "yes")]
    pub execute: bool,
}

fn yes() -> bool {
    true
}

impl Default for MeshOptions {
    fn default() -> Self {
        Self {
            max_retries: 3,
            interpreter: "python3".into(),
            timeout_secs: None,
            execute: true,
        }
    }
}

fn drop_mesh_dicts(plan: &mut Plan) {
    if plan
        .tasks
        .iter()
        .any(|t| MESH_DICTS.contains(&t.file.as_str()))
    {
        let tasks = plan
            .tasks
            .iter()
            .filter(|t| !MESH_DICTS.contains(&t.file.as_str()))
            .cloned()
            .collect();
        *plan = Plan::from_tasks(tasks);
    }
}

/// Produces the mesh inputs for the chosen strategy and records which
/// commands must run before the solver.
pub fn generate_mesh(
    spec: &MeshSpec,
    state: &mut CaseState,
    plan: &mut Plan,
    request: &WorkflowRequest,
    meta: &CaseMetadata,
    services: &Services,
    options: &MeshOptions,
) -> Result<MeshResult, AgentError> {
    spec.validate()?;
    match spec.strategy {
        MeshStrategy::Native => native(spec, state, plan, request, meta, services),
        MeshStrategy::Gmsh => {
            drop_mesh_dicts(plan);
            gmsh(spec, state, request, services, options)
        }
        MeshStrategy::External => {
            drop_mesh_dicts(plan);
            let source = spec.external_path.as_ref().expect("validated");
            let bytes = std::fs::read(source).map_err(|e| AgentError::io(source, e))?;
            let name = source
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| {
                    AgentError::Precondition(format!("{} has no file name", source.display()))
                })?;
            state.put(CaseFile::from_bytes(name.clone(), bytes)?)?;
            Ok(MeshResult {
                strategy: MeshStrategy::External,
                files: vec![name.clone()],
                commands: vec![format!("gmshToFoam {name}")],
            })
        }
    }
}

fn native(
    spec: &MeshSpec,
    state: &mut CaseState,
    plan: &mut Plan,
    request: &WorkflowRequest,
    meta: &CaseMetadata,
    services: &Services,
) -> Result<MeshResult, AgentError> {
    let snappy = spec.description.to_lowercase().contains("snappyhexmesh");
    let mut files = vec![MESH_DICTS[0]];
    let mut commands = vec!["blockMesh".to_string()];
    if snappy {
        files.push(MESH_DICTS[1]);
        commands.push("snappyHexMesh -overwrite".into());
    }
    for path in &files {
        let reference = match plan
            .index_of(path)
            .map(|i| plan.tasks[i].constraints.clone())
        {
            Some(c) if !c.is_empty() => c,
            _ => file_context(
                &services.retriever,
                &services.gateway,
                request,
                meta,
                None,
                path,
            )?,
        };
        let dict_name = path.rsplit('/').next().unwrap_or(path);
        let bundle = render_prompt(
            "mesh_generation",
            &vars([
                ("mesh_dict", dict_name.to_string()),
                ("user_requirement", request.text.trim().to_string()),
                ("mesh_description", spec.description.clone()),
                ("reference", reference.clone()),
            ]),
        )?;
        let raw = services.gateway.chat_text(&bundle)?;
        let content = finalize_content(path, &raw, &services.gateway)?;
        state.put(CaseFile::from_text(*path, content)?)?;
        if !plan.contains(path) {
            let mut task = Task::new(*path);
            task.constraints = reference;
            plan.push(task);
        }
    }
    Ok(MeshResult {
        strategy: MeshStrategy::Native,
        files: files.iter().map(|f| f.to_string()).collect(),
        commands,
    })
}

fn tail(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

fn gmsh(
    spec: &MeshSpec,
    state: &mut CaseState,
    request: &WorkflowRequest,
    services: &Services,
    options: &MeshOptions,
) -> Result<MeshResult, AgentError> {
    if options.execute && !services.executor.available(&options.interpreter) {
        return Err(AgentError::MeshToolMissing(options.interpreter.clone()));
    }
    let msh_name = GMSH_OUTPUT.rsplit('/').next().unwrap_or(GMSH_OUTPUT);
    let bundle = render_prompt(
        "gmsh_script",
        &vars([
            ("msh_file", msh_name.to_string()),
            ("user_requirement", request.text.trim().to_string()),
            ("mesh_description", spec.description.clone()),
        ]),
    )?;
    let mut script = normalize(strip_code_fences(&services.gateway.chat_text(&bundle)?));
    let mesh_dir = state.root.join("mesh");
    let script_name = GMSH_SCRIPT.rsplit('/').next().unwrap_or(GMSH_SCRIPT);
    let mut attempt = 0;
    loop {
        state.put(CaseFile::from_text(GMSH_SCRIPT, script.clone())?)?;
        if !options.execute {
            break;
        }
        let _ = std::fs::remove_file(state.root.join(GMSH_OUTPUT));
        let cmd = CommandSpec::new(
            options.interpreter.clone(),
            vec![script_name.to_string()],
            &mesh_dir,
        )
        .named(GMSH_COMMAND)
        .with_timeout(options.timeout_secs.map(Duration::from_secs));
        let output = run_logged(
            &services.gateway,
            services.executor.as_ref(),
            &cmd,
            &state.root,
        )?;
        let produced = state.root.join(GMSH_OUTPUT).is_file();
        if output.success() && produced {
            break;
        }
        let mut error_log = tail(&output.combined(), 40);
        if output.success() {
            error_log.push_str(&format!(
                "\nthe script finished but {GMSH_OUTPUT} was not written"
            ));
        }
        if attempt >= options.max_retries {
            return Err(AgentError::MeshScriptFailure(error_log));
        }
        attempt += 1;
        log::warn!("geometry script failed; repair round {attempt}");
        let repair = render_prompt(
            "script_repair",
            &vars([
                ("tool", "Gmsh".to_string()),
                ("script", script.clone()),
                ("error_log", error_log),
                ("user_requirement", request.text.trim().to_string()),
            ]),
        )?;
        script = normalize(strip_code_fences(&services.gateway.chat_text(&repair)?));
    }
    Ok(MeshResult {
        strategy: MeshStrategy::Gmsh,
        files: vec![GMSH_SCRIPT.to_string()],
        commands: vec![format!("gmshToFoam {GMSH_OUTPUT}")],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_selection() {
        assert_eq!(
            MeshSpec::select(&WorkflowRequest::new("lid driven cavity")).strategy,
            MeshStrategy::Native
        );
        assert_eq!(
            MeshSpec::select(&WorkflowRequest::new("Use Gmsh to mesh a cylinder")).strategy,
            MeshStrategy::Gmsh
        );
        let mut req = WorkflowRequest::new("tandem wing");
        req.attachments.push("wing.msh".into());
        let spec = MeshSpec::select(&req);
        assert_eq!(spec.strategy, MeshStrategy::External);
        assert!(spec.validate().is_err());
    }
}
