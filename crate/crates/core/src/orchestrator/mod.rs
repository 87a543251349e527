//! The plan, mesh, write, run and repair loop as a resumable state machine.

pub mod checkpoint;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::hpc::{submit_and_monitor, HpcConfig};
use crate::agents::mesh::MeshOptions;
use crate::agents::runner::subdomains;
use crate::agents::writer::predecessors_for;
use crate::agents::{
    architect_classify, architect_plan, clean_case, generate_allrun, generate_mesh, generate_slurm,
    parse_errors, review, run_case, visualize, write_file, AgentError, ExecutionLogs,
    ExecutionTarget, HistoryEntry, MeshSpec, RunStatus, Services, VizArtifact, VizConfig,
    WorkflowRequest,
};
use crate::case::state::TRANSCRIPT_FILE;
use crate::case::{load_case_tree, topological_indices, CaseState, ConfigPatch, PatchProvenance};
use crate::llm::AuditLog;

pub use checkpoint::{
    load_checkpoint, load_report, report_path, save_checkpoint, state_path, Checkpoint, Metrics,
    RunReport, Stage, StageTiming, Verdict,
};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("checkpoint {path} is corrupt: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    /// Upper bound M on run attempts.
    pub max_iterations: u32,
    pub enable_reviewer: bool,
    pub enable_file_dependency: bool,
    pub mesh: MeshOptions,
    pub viz: VizConfig,
    /// Per-command limit for local runs.
    pub run_timeout_secs: Option<u64>,
    pub poll_interval_ms: u64,
    /// Limit on waiting for a batch job.
    pub job_wall_limit_secs: u64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            enable_reviewer: true,
            enable_file_dependency: true,
            mesh: MeshOptions::default(),
            viz: VizConfig::default(),
            run_timeout_secs: None,
            poll_interval_ms: 30_000,
            job_wall_limit_secs: 48 * 3600,
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.max_iterations < 1 {
            return Err(OrchestratorError::Config(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Run attempts allowed: one without the reviewer, M otherwise.
    pub fn attempt_limit(&self) -> u32 {
        if self.enable_reviewer {
            self.max_iterations
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowOutcome {
    pub case_id: String,
    pub status: RunStatus,
    pub final_state: CaseState,
    pub history: Vec<HistoryEntry>,
    pub visualization: Option<VizArtifact>,
    pub visualization_error: Option<String>,
    /// The hard error that ended the workflow, if any.
    pub error: Option<String>,
    pub job_id: Option<String>,
    pub metrics: Metrics,
}

struct Workflow {
    root: PathBuf,
    checkpoint: Checkpoint,
    state: CaseState,
    services: Services,
    timings: Vec<StageTiming>,
    started: Instant,
}

fn case_id_of(root: &Path) -> String {
    root.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into())
}

fn audited(root: &Path, services: &Services) -> Services {
    services.with_audit(Arc::new(AuditLog::new(root.join(TRANSCRIPT_FILE))))
}

impl Workflow {
    fn save(&mut self) -> Result<(), OrchestratorError> {
        self.checkpoint.generation = self.state.generation;
        save_checkpoint(&self.root, &self.checkpoint)
    }

    fn timed<T>(
        &mut self,
        stage: &str,
        f: impl FnOnce(&mut Self) -> Result<T, AgentError>,
    ) -> Result<T, OrchestratorError> {
        let start = Instant::now();
        let out = f(self);
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            millis: start.elapsed().as_millis() as u64,
        });
        Ok(out?)
    }

    fn request(&self) -> &WorkflowRequest {
        &self.checkpoint.request
    }

    /// Advances stage by stage; stops after the written stage when `prepare_only`.
    fn drive(&mut self, prepare_only: bool) -> Result<(), OrchestratorError> {
        loop {
            match self.checkpoint.stage {
                Stage::Created => self.plan()?,
                Stage::Planned => self.mesh(prepare_only)?,
                Stage::Meshed => self.write()?,
                Stage::Written if prepare_only => return Ok(()),
                Stage::Written => {
                    self.checkpoint.stage = Stage::Running { attempt: 1 };
                    self.save()?;
                }
                Stage::Running { attempt } if prepare_only => {
                    log::info!("case is already at run attempt {attempt}");
                    return Ok(());
                }
                Stage::Running { attempt } => self.attempt(attempt)?,
                Stage::Finished => return Ok(()),
            }
        }
    }

    fn plan(&mut self) -> Result<(), OrchestratorError> {
        let (meta, plan) = self.timed("plan", |w| {
            let meta = architect_classify(w.request(), &w.services.gateway)?;
            let plan = architect_plan(
                w.request(),
                &meta,
                &w.services.retriever,
                &w.services.gateway,
            )?;
            Ok((meta, plan))
        })?;
        self.state.metadata = meta.clone();
        self.checkpoint.metadata = Some(meta);
        self.checkpoint.plan = Some(plan);
        self.checkpoint.stage = Stage::Planned;
        self.save()
    }

    fn mesh(&mut self, prepare_only: bool) -> Result<(), OrchestratorError> {
        let mut options = self.checkpoint.config.mesh.clone();
        options.execute &= !prepare_only;
        let mut plan = self
            .checkpoint
            .plan
            .clone()
            .expect("planned stage has a plan");
        let result = self.timed("mesh", |w| {
            let spec = MeshSpec::select(w.request());
            let meta = w.state.metadata.clone();
            let request = w.checkpoint.request.clone();
            generate_mesh(
                &spec,
                &mut w.state,
                &mut plan,
                &request,
                &meta,
                &w.services,
                &options,
            )
        })?;
        self.checkpoint.plan = Some(plan);
        self.checkpoint.mesh = Some(result);
        self.checkpoint.stage = Stage::Meshed;
        self.save()
    }

    fn write(&mut self) -> Result<(), OrchestratorError> {
        let plan = self
            .checkpoint
            .plan
            .clone()
            .expect("meshed stage has a plan");
        let mesh = self
            .checkpoint
            .mesh
            .clone()
            .expect("meshed stage has a mesh result");
        let use_dependencies = self.checkpoint.config.enable_file_dependency;
        let hpc = self.timed("write", |w| {
            let meta = w.state.metadata.clone();
            let request = w.checkpoint.request.clone();
            let order =
                topological_indices(&plan).map_err(|e| AgentError::Precondition(e.to_string()))?;
            for i in order {
                let task = &plan.tasks[i];
                if mesh.files.contains(&task.file) {
                    continue;
                }
                let predecessors = if use_dependencies {
                    predecessors_for(&plan, i, &w.state)
                } else {
                    Vec::new()
                };
                let file = write_file(
                    task,
                    &task.constraints,
                    &predecessors,
                    &meta,
                    &request.text,
                    &w.services.gateway,
                )?;
                w.state.put(file)?;
            }
            let hpc = match request.execution_target {
                ExecutionTarget::Local => None,
                ExecutionTarget::Hpc => {
                    let cfg = request.hpc.as_ref().ok_or_else(|| {
                        AgentError::Precondition("HPC execution needs an HPC configuration".into())
                    })?;
                    Some(effective_hpc(&w.state, cfg))
                }
            };
            let np = hpc.as_ref().map_or(1, |c| c.ntasks);
            generate_allrun(
                &mut w.state,
                &meta,
                &request.text,
                &mesh.commands,
                request.execution_target,
                np,
                &w.services.retriever,
                &w.services.gateway,
            )?;
            if let Some(cfg) = &hpc {
                generate_slurm(&mut w.state, cfg, &request.text, &w.services.gateway)?;
            }
            Ok(hpc)
        })?;
        if hpc.is_some() {
            self.checkpoint.request.hpc = hpc;
        }
        self.checkpoint.stage = Stage::Written;
        self.save()
    }

    fn execute(&mut self) -> Result<(ExecutionLogs, RunStatus, Option<String>), AgentError> {
        let config = &self.checkpoint.config;
        match self.checkpoint.request.execution_target {
            ExecutionTarget::Local => {
                let timeout = config.run_timeout_secs.map(Duration::from_secs);
                let (logs, status) = run_case(
                    &self.state,
                    self.services.executor.as_ref(),
                    &self.services.gateway,
                    timeout,
                )?;
                Ok((logs, status, None))
            }
            ExecutionTarget::Hpc => {
                let client = self
                    .services
                    .scheduler
                    .clone()
                    .ok_or_else(|| AgentError::ExecutorUnavailable("sbatch".into()))?;
                clean_case(&self.state.root)?;
                let (job_id, status, logs) = submit_and_monitor(
                    &self.state,
                    client.as_ref(),
                    Duration::from_millis(config.poll_interval_ms),
                    Duration::from_secs(config.job_wall_limit_secs),
                )?;
                Ok((logs, status, Some(job_id)))
            }
        }
    }

    fn finish(&mut self, verdict: Verdict) -> Result<(), OrchestratorError> {
        self.checkpoint.verdict = Some(verdict);
        self.checkpoint.stage = Stage::Finished;
        self.checkpoint.last_error = None;
        self.save()
    }

    fn attempt(&mut self, t: u32) -> Result<(), OrchestratorError> {
        let limit = self.checkpoint.config.attempt_limit();
        if t > limit {
            let job_id = None;
            return self.finish(Verdict {
                status: RunStatus::Failure,
                iterations: limit,
                visualization: None,
                error: None,
                visualization_error: None,
                job_id,
            });
        }
        self.checkpoint.attempts = t;
        let (logs, status, job_id) = self.timed(&format!("run {t}"), |w| w.execute())?;
        if status == RunStatus::Success {
            let (visualization, visualization_error) = if self.request().visualization_requested() {
                let config = self.checkpoint.config.viz.clone();
                let text = self.request().text.clone();
                let services = self.services.clone();
                let start = Instant::now();
                let result = visualize(&mut self.state, &text, &services, &config);
                self.timings.push(StageTiming {
                    stage: "visualize".into(),
                    millis: start.elapsed().as_millis() as u64,
                });
                match result {
                    Ok(artifact) => (Some(artifact), None),
                    Err(e) => {
                        log::warn!("visualization failed: {e}");
                        (None, Some(e.to_string()))
                    }
                }
            } else {
                (None, None)
            };
            return self.finish(Verdict {
                status: RunStatus::Success,
                iterations: t,
                visualization,
                error: None,
                visualization_error,
                job_id,
            });
        }
        if !self.checkpoint.config.enable_reviewer {
            return self.finish(Verdict {
                status: RunStatus::Failure,
                iterations: t,
                visualization: None,
                error: None,
                visualization_error: None,
                job_id,
            });
        }
        let errors = parse_errors(&logs);
        let generation = self.state.generation;
        let (patch, review_text) = self.timed(&format!("review {t}"), |w| {
            let meta = w.state.metadata.clone();
            match review(
                &errors,
                &w.state,
                &w.checkpoint.history,
                &w.checkpoint.request.text,
                &meta,
                &w.services.retriever,
                &w.services.gateway,
            ) {
                Ok(outcome) => {
                    w.state.apply(&outcome.patch)?;
                    Ok((outcome.patch, outcome.analysis))
                }
                Err(AgentError::EmptyPatch { analysis }) => {
                    log::warn!("review of attempt {t} proposed no changes");
                    Ok((ConfigPatch::new(PatchProvenance::Reviewer), analysis))
                }
                Err(e) => Err(e),
            }
        })?;
        self.checkpoint.history.push(HistoryEntry {
            iteration: t,
            state_generation: generation,
            errors,
            patch,
            review_text,
        });
        self.checkpoint.stage = Stage::Running { attempt: t + 1 };
        self.save()
    }

    fn outcome(self, error: Option<String>) -> WorkflowOutcome {
        let verdict = self.checkpoint.verdict.clone();
        let status = match (&verdict, &error) {
            (Some(v), None) => v.status,
            _ => RunStatus::Failure,
        };
        let metrics = Metrics {
            iterations: verdict
                .as_ref()
                .map_or(self.checkpoint.attempts, |v| v.iterations),
            tokens: self.services.gateway.usage(),
            wall_time_ms: self.started.elapsed().as_millis() as u64,
            stages: self.timings,
        };
        let verdict = verdict.unwrap_or(Verdict {
            status,
            iterations: metrics.iterations,
            visualization: None,
            error: error.clone(),
            visualization_error: None,
            job_id: None,
        });
        let report = RunReport {
            case_id: self.checkpoint.case_id.clone(),
            status,
            history_len: self.checkpoint.history.len(),
            verdict: verdict.clone(),
            metrics: metrics.clone(),
        };
        if let Err(e) = checkpoint::save_report(&self.root, &report) {
            log::warn!("could not write the run report: {e}");
        }
        WorkflowOutcome {
            case_id: self.checkpoint.case_id,
            status,
            final_state: self.state,
            history: self.checkpoint.history,
            visualization: verdict.visualization,
            visualization_error: verdict.visualization_error,
            error,
            job_id: verdict.job_id,
            metrics,
        }
    }

    /// Runs `drive`, turning a hard error into a FAILURE outcome and keeping
    /// the checkpoint at the last completed stage.
    fn conclude(mut self, prepare_only: bool) -> WorkflowOutcome {
        let error = match self.drive(prepare_only) {
            Ok(()) => None,
            Err(e) => {
                log::error!("workflow for {} stopped: {e}", self.checkpoint.case_id);
                self.checkpoint.last_error = Some(e.to_string());
                if let Err(save) = self.save() {
                    log::error!("could not save the checkpoint: {save}");
                }
                Some(e.to_string())
            }
        };
        self.outcome(error)
    }
}

fn start(
    root: &Path,
    request: WorkflowRequest,
    config: &OrchestratorConfig,
    services: &Services,
) -> Result<Workflow, OrchestratorError> {
    config.validate()?;
    request.validate()?;
    std::fs::create_dir_all(root).map_err(|e| OrchestratorError::Io {
        path: root.to_path_buf(),
        source: e,
    })?;
    let case_id = case_id_of(root);
    let mut workflow = Workflow {
        root: root.to_path_buf(),
        checkpoint: Checkpoint::new(case_id.clone(), request, config.clone()),
        state: CaseState::new(case_id, root),
        services: audited(root, services),
        timings: Vec::new(),
        started: Instant::now(),
    };
    workflow.save()?;
    Ok(workflow)
}

fn failed_start(root: &Path, error: OrchestratorError) -> WorkflowOutcome {
    WorkflowOutcome {
        case_id: case_id_of(root),
        status: RunStatus::Failure,
        final_state: CaseState::new(case_id_of(root), root),
        history: Vec::new(),
        visualization: None,
        visualization_error: None,
        error: Some(error.to_string()),
        job_id: None,
        metrics: Metrics::default(),
    }
}

/// Runs the whole workflow for a new case rooted at `root`. Never fails:
/// hard errors become a FAILURE outcome carrying the diagnostic.
pub fn run_workflow(
    root: &Path,
    request: WorkflowRequest,
    config: &OrchestratorConfig,
    services: &Services,
) -> WorkflowOutcome {
    match start(root, request, config, services) {
        Ok(workflow) => workflow.conclude(false),
        Err(e) => failed_start(root, e),
    }
}

/// Plans the case and writes every file without running anything.
pub fn prepare_case(
    root: &Path,
    request: WorkflowRequest,
    config: &OrchestratorConfig,
    services: &Services,
) -> Result<CaseState, OrchestratorError> {
    let mut workflow = start(root, request, config, services)?;
    workflow.drive(true)?;
    Ok(workflow.state)
}

/// Continues a persisted workflow from its last completed stage. A
/// finished workflow returns its recorded outcome without new calls.
pub fn resume_workflow(
    root: &Path,
    services: &Services,
) -> Result<WorkflowOutcome, OrchestratorError> {
    if !root.is_dir() {
        return Err(OrchestratorError::UnknownCase(root.display().to_string()));
    }
    let checkpoint = load_checkpoint(root)?;
    let mut state = load_case_tree(root).map_err(AgentError::from)?;
    state.case_id = checkpoint.case_id.clone();
    state.generation = checkpoint.generation;
    if let Some(meta) = &checkpoint.metadata {
        state.metadata = meta.clone();
    }
    if checkpoint.stage == Stage::Finished {
        let verdict =
            checkpoint
                .verdict
                .clone()
                .ok_or_else(|| OrchestratorError::CorruptCheckpoint {
                    path: state_path(root),
                    reason: "finished without a verdict".into(),
                })?;
        let metrics = load_report(root).map(|r| r.metrics).unwrap_or_default();
        return Ok(WorkflowOutcome {
            case_id: checkpoint.case_id,
            status: verdict.status,
            final_state: state,
            history: checkpoint.history,
            visualization: verdict.visualization,
            visualization_error: verdict.visualization_error,
            error: verdict.error,
            job_id: verdict.job_id,
            metrics,
        });
    }
    let workflow = Workflow {
        root: root.to_path_buf(),
        checkpoint,
        state,
        services: audited(root, services),
        timings: Vec::new(),
        started: Instant::now(),
    };
    Ok(workflow.conclude(false))
}

/// Recorded stage of a case, if it has a checkpoint.
pub fn case_stage(root: &Path) -> Result<Stage, OrchestratorError> {
    Ok(load_checkpoint(root)?.stage)
}

/// Effective HPC settings for a request: the given configuration with the
/// task count taken from the decomposition when one exists.
pub fn effective_hpc(state: &CaseState, config: &HpcConfig) -> HpcConfig {
    let mut cfg = config.clone();
    if let Some(n) = subdomains(state) {
        cfg.ntasks = n;
    }
    cfg
}
