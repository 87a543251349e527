//! Dispatch of the tool functions onto the agents, with per-case locks and
//! a worker pool for the asynchronous ones.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::registry::{JobKind, JobRecord, JobStatus, Registry};
use super::schema::tool_spec;
use super::McpError;
use crate::agents::architect::file_context;
use crate::agents::hpc::{submit_and_monitor, SLURM_SCRIPT};
use crate::agents::writer::predecessors_for;
use crate::agents::{
    architect_classify, architect_plan, clean_case, generate_allrun, generate_mesh, generate_slurm,
    parse_errors, review, run_case, visualize, write_file, AgentError, ExecutionLogs,
    ExecutionTarget, HistoryEntry, HpcConfig, LogEntry, MeshSpec, MeshStrategy, RunStatus,
    Services, VizToolchain,
};
use crate::case::state::{ENGINE_DIR, TRANSCRIPT_FILE};
use crate::case::{
    load_case_tree, CaseMetadata, CaseState, ConfigPatch, PatchEntry, PatchProvenance, Plan, Task,
};
use crate::llm::{AuditLog, FieldFailure};
use crate::orchestrator::{
    effective_hpc, load_checkpoint, save_checkpoint, Checkpoint, OrchestratorConfig, Stage,
};

pub const REGISTRY_DIR: &str = "registry";
pub const CASES_DIR: &str = "cases";
const LOCK_FILE: &str = "server.lock";
const JOBS_DIR: &str = "jobs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Jobs that may run at once.
    pub workers: usize,
    pub orchestrator: OrchestratorConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("foamflow-data"),
            workers: 4,
            orchestrator: OrchestratorConfig::default(),
        }
    }
}

/// What a finished job leaves behind.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct JobOutput {
    logs: Option<ExecutionLogs>,
    outputs: Vec<String>,
}

type Work = Box<dyn FnOnce(&Inner) -> Result<JobOutput, (String, Option<ExecutionLogs>)> + Send>;

struct Inner {
    data_dir: PathBuf,
    services: Services,
    config: OrchestratorConfig,
    registry: Mutex<Registry>,
    case_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

/// The tool server core, independent of any transport.
pub struct McpService {
    inner: Arc<Inner>,
    queue: Option<Sender<(String, Work)>>,
    workers: Vec<JoinHandle<()>>,
    /// Held for the life of the server so a second one cannot share the store.
    _store_lock: File,
}

struct CaseCtx {
    root: PathBuf,
    checkpoint: Checkpoint,
    state: CaseState,
    services: Services,
}

impl CaseCtx {
    fn ensure_metadata(&mut self) -> Result<CaseMetadata, McpError> {
        if self.checkpoint.metadata.is_none() {
            let meta = architect_classify(&self.checkpoint.request, &self.services.gateway)?;
            self.checkpoint.metadata = Some(meta);
        }
        let meta = self.checkpoint.metadata.clone().expect("set above");
        self.state.metadata = meta.clone();
        Ok(meta)
    }

    fn advance(&mut self, stage: Stage) {
        let rank = |s: Stage| match s {
            Stage::Created => 0,
            Stage::Planned => 1,
            Stage::Meshed => 2,
            Stage::Written => 3,
            Stage::Running { .. } => 4,
            Stage::Finished => 5,
        };
        if rank(stage) > rank(self.checkpoint.stage) {
            self.checkpoint.stage = stage;
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn io(path: &Path, e: std::io::Error) -> McpError {
    McpError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn invalid(function: &str, path: &str, message: impl Into<String>) -> McpError {
    McpError::SchemaViolation {
        function: function.to_string(),
        failures: vec![FieldFailure {
            path: path.to_string(),
            message: message.into(),
        }],
    }
}

fn text_arg<'a>(args: &'a Value, key: &str) -> &'a str {
    args.get(key).and_then(Value::as_str).unwrap_or_default()
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

fn first_error(logs: &ExecutionLogs) -> String {
    parse_errors(logs)
        .into_iter()
        .next()
        .map(|r| {
            format!(
                "{} ({})",
                r.message.lines().next().unwrap_or_default(),
                r.location
            )
        })
        .unwrap_or_else(|| "the run failed".into())
}

impl Inner {
    fn case_root(&self, case_id: &str) -> PathBuf {
        self.data_dir.join(CASES_DIR).join(case_id)
    }

    fn job_log_path(&self, case_id: &str, job_id: &str) -> PathBuf {
        self.case_root(case_id)
            .join(ENGINE_DIR)
            .join(JOBS_DIR)
            .join(format!("{job_id}.json"))
    }

    fn require_case(&self, case_id: &str) -> Result<(), McpError> {
        match lock(&self.registry).case(case_id) {
            Some(_) => Ok(()),
            None => Err(McpError::UnknownCase(case_id.to_string())),
        }
    }

    fn job_of_case(&self, case_id: &str, job_id: &str) -> Result<JobRecord, McpError> {
        self.require_case(case_id)?;
        match lock(&self.registry).job(job_id) {
            Some(job) if job.case_id == case_id => Ok(job.clone()),
            _ => Err(McpError::UnknownJob(job_id.to_string())),
        }
    }

    fn case_lock(&self, case_id: &str) -> Arc<Mutex<()>> {
        lock(&self.case_locks)
            .entry(case_id.to_string())
            .or_default()
            .clone()
    }

    /// Runs `f` on the loaded case under its lock and saves the checkpoint
    /// when `f` succeeds.
    fn with_case<T>(
        &self,
        case_id: &str,
        f: impl FnOnce(&mut CaseCtx) -> Result<T, McpError>,
    ) -> Result<T, McpError> {
        self.require_case(case_id)?;
        let case_lock = self.case_lock(case_id);
        let _guard = lock(&case_lock);
        let root = self.case_root(case_id);
        let checkpoint = load_checkpoint(&root)?;
        let mut state = load_case_tree(&root)?;
        state.case_id = case_id.to_string();
        state.generation = checkpoint.generation;
        if let Some(meta) = &checkpoint.metadata {
            state.metadata = meta.clone();
        }
        let services = self
            .services
            .with_audit(Arc::new(AuditLog::new(root.join(TRANSCRIPT_FILE))));
        let mut ctx = CaseCtx {
            root,
            checkpoint,
            state,
            services,
        };
        let out = f(&mut ctx)?;
        ctx.checkpoint.generation = ctx.state.generation;
        save_checkpoint(&ctx.root, &ctx.checkpoint)?;
        Ok(out)
    }

    fn load_job_logs(&self, case_id: &str, job_id: &str) -> Result<ExecutionLogs, McpError> {
        let path = self.job_log_path(case_id, job_id);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| {
                McpError::Internal(format!("job log {} is unreadable: {e}", path.display()))
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ExecutionLogs::default()),
            Err(e) => Err(io(&path, e)),
        }
    }

    fn run_job(&self, job_id: &str, work: Work) {
        let job = match lock(&self.registry).transition(job_id, JobStatus::Running, |_| {}) {
            Ok(job) => job,
            Err(e) => {
                log::error!("cannot start job {job_id}: {e}");
                return;
            }
        };
        let result = catch_unwind(AssertUnwindSafe(|| work(self))).unwrap_or_else(|payload| {
            Err((
                format!("worker panicked: {}", panic_message(payload.as_ref())),
                None,
            ))
        });
        let (status, error, output) = match result {
            Ok(output) => (JobStatus::Succeeded, None, output),
            Err((error, logs)) => (
                JobStatus::Failed,
                Some(error),
                JobOutput {
                    logs,
                    outputs: Vec::new(),
                },
            ),
        };
        let mut logs_ref = None;
        if let Some(logs) = &output.logs {
            let path = self.job_log_path(&job.case_id, job_id);
            let text = serde_json::to_string_pretty(logs).expect("logs serialize");
            let saved = path
                .parent()
                .map_or(Ok(()), fs::create_dir_all)
                .and_then(|_| fs::write(&path, text));
            match saved {
                Ok(()) => logs_ref = Some(job_id.to_string()),
                Err(e) => log::error!("cannot store logs of job {job_id}: {e}"),
            }
        }
        let finished = lock(&self.registry).transition(job_id, status, |j| {
            j.error = error;
            j.logs_ref = logs_ref;
            j.outputs = output.outputs;
        });
        if let Err(e) = finished {
            log::error!("cannot finish job {job_id}: {e}");
        }
    }
}

fn worker(inner: Arc<Inner>, queue: Arc<Mutex<Receiver<(String, Work)>>>) {
    loop {
        let next = lock(&queue).recv();
        match next {
            Ok((job_id, work)) => inner.run_job(&job_id, work),
            Err(_) => return,
        }
    }
}

impl McpService {
    /// Opens the store under `data_dir`, failing in-flight jobs left by a
    /// previous server, and starts the worker pool.
    pub fn start(config: ServiceConfig, services: Services) -> Result<Self, McpError> {
        config
            .orchestrator
            .validate()
            .map_err(|e| McpError::Internal(e.to_string()))?;
        let registry_dir = config.data_dir.join(REGISTRY_DIR);
        fs::create_dir_all(&registry_dir).map_err(|e| io(&registry_dir, e))?;
        let lock_path = registry_dir.join(LOCK_FILE);
        let store_lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| io(&lock_path, e))?;
        match store_lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => {
                return Err(McpError::StoreLocked(config.data_dir.clone()))
            }
            Err(fs::TryLockError::Error(e)) => return Err(io(&lock_path, e)),
        }
        let (registry, report) = Registry::open(&registry_dir)?;
        for job in &report.interrupted {
            log::warn!("job {job} was in flight at the last shutdown and is now failed");
        }
        let inner = Arc::new(Inner {
            data_dir: config.data_dir.clone(),
            services,
            config: config.orchestrator.clone(),
            registry: Mutex::new(registry),
            case_locks: Mutex::new(HashMap::new()),
        });
        let (tx, rx) = mpsc::channel();
        let rx = Arc::new(Mutex::new(rx));
        let workers = (0..config.workers.max(1))
            .map(|i| {
                let inner = Arc::clone(&inner);
                let rx = Arc::clone(&rx);
                std::thread::Builder::new()
                    .name(format!("foamflow-worker-{i}"))
                    .spawn(move || worker(inner, rx))
                    .expect("worker threads spawn")
            })
            .collect();
        Ok(Self {
            inner,
            queue: Some(tx),
            workers,
            _store_lock: store_lock,
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.inner.data_dir
    }

    pub fn case_root(&self, case_id: &str) -> PathBuf {
        self.inner.case_root(case_id)
    }

    pub fn job(&self, job_id: &str) -> Option<JobRecord> {
        lock(&self.inner.registry).job(job_id).cloned()
    }

    pub fn case_ids(&self) -> Vec<String> {
        lock(&self.inner.registry)
            .cases()
            .map(|c| c.case_id.clone())
            .collect()
    }

    /// Polls until the job is terminal or `timeout` passes.
    pub fn wait_for_job(&self, job_id: &str, timeout: Duration) -> Result<JobRecord, McpError> {
        let start = Instant::now();
        loop {
            let job = self
                .job(job_id)
                .ok_or_else(|| McpError::UnknownJob(job_id.to_string()))?;
            if job.status.is_terminal() || start.elapsed() >= timeout {
                return Ok(job);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Validates the arguments, runs the function and validates its result.
    pub fn dispatch(&self, function: &str, args: &Value) -> Result<Value, McpError> {
        let spec =
            tool_spec(function).ok_or_else(|| McpError::UnknownFunction(function.to_string()))?;
        spec.validate_input(args)
            .map_err(|failures| McpError::SchemaViolation {
                function: function.to_string(),
                failures,
            })?;
        let out = match function {
            "create_case" => self.create_case(args),
            "plan_simulation_structure" => self.plan_simulation_structure(args),
            "generate_file_content" => self.generate_file_content(args),
            "generate_mesh" => self.generate_mesh(args),
            "generate_hpc_script" => self.generate_hpc_script(args),
            "run_simulation" => self.run_simulation(args),
            "check_job_status" => self.check_job_status(args),
            "get_simulation_logs" => self.get_simulation_logs(args),
            "review_and_suggest_fix" => self.review_and_suggest_fix(args),
            "apply_fix" => self.apply_fix(args),
            "generate_visualization" => self.generate_visualization(args),
            other => unreachable!("{other} is in the tool table but not dispatched"),
        }?;
        spec.validate_output(&out).map_err(|failures| {
            let detail = failures
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            McpError::Internal(format!(
                "{function} produced output outside its schema: {detail}"
            ))
        })?;
        Ok(out)
    }

    fn enqueue(&self, case_id: &str, kind: JobKind, work: Work) -> Result<Value, McpError> {
        self.inner.require_case(case_id)?;
        let job = lock(&self.inner.registry).add_job(case_id, kind)?;
        let queue = self.queue.as_ref().expect("queue lives until drop");
        queue
            .send((job.job_id.clone(), work))
            .map_err(|_| McpError::Internal("the worker pool has stopped".into()))?;
        Ok(json!({"job_id": job.job_id}))
    }

    fn create_case(&self, args: &Value) -> Result<Value, McpError> {
        let prompt = text_arg(args, "user_prompt");
        let record = lock(&self.inner.registry).add_case(prompt)?;
        let root = self.inner.case_root(&record.case_id);
        fs::create_dir_all(&root).map_err(|e| io(&root, e))?;
        let request = crate::agents::WorkflowRequest::new(prompt);
        save_checkpoint(
            &root,
            &Checkpoint::new(record.case_id.clone(), request, self.inner.config.clone()),
        )?;
        Ok(json!({"case_id": record.case_id}))
    }

    fn plan_simulation_structure(&self, args: &Value) -> Result<Value, McpError> {
        self.inner.with_case(text_arg(args, "case_id"), |ctx| {
            let meta = ctx.ensure_metadata()?;
            let plan = architect_plan(
                &ctx.checkpoint.request,
                &meta,
                &ctx.services.retriever,
                &ctx.services.gateway,
            )?;
            let items: Vec<Value> = plan
                .tasks
                .iter()
                .map(|t| json!({"file": t.file_name(), "folder": t.folder()}))
                .collect();
            ctx.checkpoint.plan = Some(plan);
            ctx.advance(Stage::Planned);
            Ok(json!({"plan": items}))
        })
    }

    fn generate_file_content(&self, args: &Value) -> Result<Value, McpError> {
        let name = "generate_file_content";
        let path = PatchEntry::in_folder(text_arg(args, "folder"), text_arg(args, "file"), "").path;
        crate::case::state::validate_case_path(&path)
            .map_err(|e| invalid(name, "$.file", e.to_string()))?;
        if crate::case::state::is_artifact(&path) {
            return Err(invalid(
                name,
                "$.file",
                format!("{path} is run output, not configuration"),
            ));
        }
        let use_dependencies = self.inner.config.enable_file_dependency;
        self.inner.with_case(text_arg(args, "case_id"), |ctx| {
            let meta = ctx.ensure_metadata()?;
            let plan = ctx
                .checkpoint
                .plan
                .clone()
                .unwrap_or_else(|| Plan::from_tasks(Vec::new()));
            let (task, predecessors) = match plan.index_of(&path) {
                Some(i) => {
                    let preds = if use_dependencies {
                        predecessors_for(&plan, i, &ctx.state)
                    } else {
                        Vec::new()
                    };
                    (plan.tasks[i].clone(), preds)
                }
                None => {
                    let mut task = Task::new(path.clone());
                    task.constraints = file_context(
                        &ctx.services.retriever,
                        &ctx.services.gateway,
                        &ctx.checkpoint.request,
                        &meta,
                        None,
                        &path,
                    )?;
                    (task, Vec::new())
                }
            };
            let file = write_file(
                &task,
                &task.constraints,
                &predecessors,
                &meta,
                &ctx.checkpoint.request.text,
                &ctx.services.gateway,
            )?;
            let content = file.text_lossy();
            ctx.state.put(file)?;
            Ok(json!({"content": content}))
        })
    }

    fn generate_mesh(&self, args: &Value) -> Result<Value, McpError> {
        let case_id = text_arg(args, "case_id").to_string();
        let cfg = &args["mesh_config"];
        let strategy: MeshStrategy = serde_json::from_value(cfg["strategy"].clone())
            .map_err(|e| invalid("generate_mesh", "$.mesh_config.strategy", e.to_string()))?;
        let description = cfg
            .get("description")
            .and_then(Value::as_str)
            .map(str::to_string);
        let external_path = cfg
            .get("external_path")
            .and_then(Value::as_str)
            .map(PathBuf::from);
        if strategy == MeshStrategy::External {
            let probe = MeshSpec {
                strategy,
                description: String::new(),
                external_path: external_path.clone(),
            };
            probe.validate().map_err(|e| {
                invalid(
                    "generate_mesh",
                    "$.mesh_config.external_path",
                    e.to_string(),
                )
            })?;
        }
        let options = self.inner.config.mesh.clone();
        let id = case_id.clone();
        self.enqueue(
            &case_id,
            JobKind::Mesh,
            Box::new(move |inner: &Inner| {
                inner
                    .with_case(&id, |ctx| {
                        let meta = ctx.ensure_metadata()?;
                        let spec = MeshSpec {
                            strategy,
                            description: description
                                .unwrap_or_else(|| ctx.checkpoint.request.text.trim().to_string()),
                            external_path,
                        };
                        let mut plan = ctx
                            .checkpoint
                            .plan
                            .clone()
                            .unwrap_or_else(|| Plan::from_tasks(Vec::new()));
                        let request = ctx.checkpoint.request.clone();
                        let result = generate_mesh(
                            &spec,
                            &mut ctx.state,
                            &mut plan,
                            &request,
                            &meta,
                            &ctx.services,
                            &options,
                        )?;
                        if ctx.checkpoint.plan.is_some() {
                            ctx.checkpoint.plan = Some(plan);
                        }
                        let outputs = result.files.clone();
                        ctx.checkpoint.mesh = Some(result);
                        ctx.advance(Stage::Meshed);
                        Ok(JobOutput {
                            logs: None,
                            outputs,
                        })
                    })
                    .map_err(|e| (e.to_string(), None))
            }),
        )
    }

    fn generate_hpc_script(&self, args: &Value) -> Result<Value, McpError> {
        let name = "generate_hpc_script";
        let cfg: HpcConfig = serde_json::from_value(args["hpc_config"].clone())
            .map_err(|e| invalid(name, "$.hpc_config", e.to_string()))?;
        cfg.validate()
            .map_err(|e| invalid(name, "$.hpc_config", e.to_string()))?;
        self.inner.with_case(text_arg(args, "case_id"), |ctx| {
            let cfg = effective_hpc(&ctx.state, &cfg);
            let requirement = ctx.checkpoint.request.text.clone();
            let file = generate_slurm(&mut ctx.state, &cfg, &requirement, &ctx.services.gateway)?;
            ctx.checkpoint.request.hpc = Some(cfg);
            ctx.checkpoint.request.execution_target = ExecutionTarget::Hpc;
            Ok(json!({"script_content": file.text_lossy()}))
        })
    }

    fn run_simulation(&self, args: &Value) -> Result<Value, McpError> {
        let case_id = text_arg(args, "case_id").to_string();
        let target: ExecutionTarget = text_arg(args, "environment")
            .parse()
            .map_err(|e: String| invalid("run_simulation", "$.environment", e))?;
        if target == ExecutionTarget::Hpc && self.inner.services.scheduler.is_none() {
            return Err(McpError::Internal(
                "no batch scheduler is configured for HPC runs".into(),
            ));
        }
        let id = case_id.clone();
        self.enqueue(
            &case_id,
            JobKind::Simulation,
            Box::new(move |inner: &Inner| {
                let mut logs_out = None;
                let result = inner.with_case(&id, |ctx| {
                    let (logs, status) = simulate(inner, ctx, target)?;
                    let ok = status == RunStatus::Success;
                    logs_out = Some(logs);
                    Ok(ok)
                });
                match result {
                    Ok(true) => Ok(JobOutput {
                        logs: logs_out,
                        outputs: Vec::new(),
                    }),
                    Ok(false) => {
                        let logs = logs_out.unwrap_or_default();
                        Err((
                            format!("simulation failed: {}", first_error(&logs)),
                            Some(logs),
                        ))
                    }
                    Err(e) => Err((e.to_string(), logs_out)),
                }
            }),
        )
    }

    fn check_job_status(&self, args: &Value) -> Result<Value, McpError> {
        let job_id = text_arg(args, "job_id");
        let job = self
            .job(job_id)
            .ok_or_else(|| McpError::UnknownJob(job_id.to_string()))?;
        Ok(json!({"status": serde_json::to_value(job).expect("job records serialize")}))
    }

    fn get_simulation_logs(&self, args: &Value) -> Result<Value, McpError> {
        let case_id = text_arg(args, "case_id");
        let job = self.inner.job_of_case(case_id, text_arg(args, "job_id"))?;
        let logs = self.inner.load_job_logs(case_id, &job.job_id)?;
        Ok(json!({"logs": {
            "job_id": job.job_id,
            "entries": serde_json::to_value(&logs.entries).expect("logs serialize"),
            "errors": serde_json::to_value(parse_errors(&logs)).expect("records serialize"),
        }}))
    }

    fn review_and_suggest_fix(&self, args: &Value) -> Result<Value, McpError> {
        let case_id = text_arg(args, "case_id");
        let logs = match &args["logs"] {
            Value::String(job_id) => {
                let job = self.inner.job_of_case(case_id, job_id)?;
                self.inner.load_job_logs(case_id, &job.job_id)?
            }
            inline => inline_logs(inline),
        };
        self.inner.require_case(case_id)?;
        let errors = parse_errors(&logs);
        if errors.is_empty() {
            return Ok(json!({"suggestions": {
                "analysis": "The logs contain no errors.",
                "modifications": [],
                "dropped": [],
            }}));
        }
        self.inner.with_case(case_id, |ctx| {
            let meta = ctx.ensure_metadata()?;
            let outcome = review(
                &errors,
                &ctx.state,
                &ctx.checkpoint.history,
                &ctx.checkpoint.request.text,
                &meta,
                &ctx.services.retriever,
                &ctx.services.gateway,
            );
            let (analysis, patch, dropped) = match outcome {
                Ok(o) => (o.analysis, o.patch, o.dropped),
                Err(AgentError::EmptyPatch { analysis }) => (
                    analysis,
                    ConfigPatch::new(PatchProvenance::Reviewer),
                    Vec::new(),
                ),
                Err(e) => return Err(e.into()),
            };
            ctx.checkpoint.history.push(HistoryEntry {
                iteration: ctx.checkpoint.history.len() as u32 + 1,
                state_generation: ctx.state.generation,
                errors: errors.clone(),
                patch: patch.clone(),
                review_text: analysis.clone(),
            });
            let modifications: Vec<Value> = patch
                .entries
                .iter()
                .map(|e| {
                    let file = e.path.rsplit('/').next().unwrap_or(&e.path);
                    json!({"file": file, "folder": e.folder(), "content": e.new_content})
                })
                .collect();
            let dropped: Vec<Value> = dropped
                .iter()
                .map(|(p, r)| json!({"path": p, "reason": r}))
                .collect();
            Ok(json!({"suggestions": {
                "analysis": analysis,
                "modifications": modifications,
                "dropped": dropped,
            }}))
        })
    }

    fn apply_fix(&self, args: &Value) -> Result<Value, McpError> {
        let mut patch = ConfigPatch::new(PatchProvenance::McpApplyFix);
        for (i, m) in args["modifications"]
            .as_array()
            .into_iter()
            .flatten()
            .enumerate()
        {
            let entry = PatchEntry::in_folder(
                text_arg(m, "folder"),
                text_arg(m, "file"),
                text_arg(m, "content"),
            );
            if crate::case::state::is_artifact(&entry.path) {
                return Err(invalid(
                    "apply_fix",
                    &format!("$.modifications[{i}]"),
                    "targets run output",
                ));
            }
            patch = patch.with(entry);
        }
        patch
            .validate()
            .map_err(|e| invalid("apply_fix", "$.modifications", e.to_string()))?;
        self.inner.with_case(text_arg(args, "case_id"), |ctx| {
            ctx.state.apply(&patch)?;
            Ok(json!({"status": "applied"}))
        })
    }

    fn generate_visualization(&self, args: &Value) -> Result<Value, McpError> {
        let case_id = text_arg(args, "case_id").to_string();
        let mut requirement = format!("Visualize '{}'", text_arg(args, "quantity"));
        if let Some(plane) = args.get("plane").and_then(Value::as_str) {
            requirement.push_str(&format!(" along the {plane} plane"));
        }
        if let Some(time) = args.get("time").and_then(Value::as_str) {
            requirement.push_str(&format!(" at time {time}"));
        }
        requirement.push('.');
        let mut viz = self.inner.config.viz.clone();
        if let Some(t) = args.get("toolchain") {
            viz.toolchain = serde_json::from_value::<VizToolchain>(t.clone())
                .map_err(|e| invalid("generate_visualization", "$.toolchain", e.to_string()))?;
        }
        let id = case_id.clone();
        self.enqueue(
            &case_id,
            JobKind::Visualization,
            Box::new(move |inner: &Inner| {
                inner
                    .with_case(&id, |ctx| {
                        let artifact =
                            visualize(&mut ctx.state, &requirement, &ctx.services, &viz)?;
                        Ok(JobOutput {
                            logs: None,
                            outputs: vec![artifact.path],
                        })
                    })
                    .map_err(|e| (e.to_string(), None))
            }),
        )
    }
}

/// Generates a missing Allrun, then runs locally or through the scheduler.
fn simulate(
    inner: &Inner,
    ctx: &mut CaseCtx,
    target: ExecutionTarget,
) -> Result<(ExecutionLogs, RunStatus), McpError> {
    let meta = ctx.ensure_metadata()?;
    let hpc = match target {
        ExecutionTarget::Local => None,
        ExecutionTarget::Hpc => {
            if !ctx.state.contains(SLURM_SCRIPT) {
                return Err(AgentError::Precondition(format!(
                    "the case has no {SLURM_SCRIPT}; call generate_hpc_script first"
                ))
                .into());
            }
            ctx.checkpoint.request.hpc.clone()
        }
    };
    if !ctx.state.contains("Allrun") {
        let mesh_commands = match &ctx.checkpoint.mesh {
            Some(mesh) => mesh.commands.clone(),
            None if ctx.state.contains("system/blockMeshDict") => vec!["blockMesh".to_string()],
            None => Vec::new(),
        };
        let np = hpc.as_ref().map_or(1, |c| c.ntasks);
        let requirement = ctx.checkpoint.request.text.clone();
        generate_allrun(
            &mut ctx.state,
            &meta,
            &requirement,
            &mesh_commands,
            target,
            np,
            &ctx.services.retriever,
            &ctx.services.gateway,
        )?;
    }
    ctx.advance(Stage::Written);
    let config = &inner.config;
    match target {
        ExecutionTarget::Local => {
            let timeout = config.run_timeout_secs.map(Duration::from_secs);
            let (logs, status) = run_case(
                &ctx.state,
                ctx.services.executor.as_ref(),
                &ctx.services.gateway,
                timeout,
            )?;
            Ok((logs, status))
        }
        ExecutionTarget::Hpc => {
            let client = ctx
                .services
                .scheduler
                .clone()
                .ok_or_else(|| AgentError::ExecutorUnavailable("sbatch".into()))?;
            clean_case(&ctx.state.root)?;
            let (_, status, logs) = submit_and_monitor(
                &ctx.state,
                client.as_ref(),
                Duration::from_millis(config.poll_interval_ms),
                Duration::from_secs(config.job_wall_limit_secs),
            )?;
            Ok((logs, status))
        }
    }
}

/// Logs passed by value; the schema has already checked the shape.
fn inline_logs(value: &Value) -> ExecutionLogs {
    let entries = value["entries"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|e| {
            let command = text_arg(e, "command").to_string();
            LogEntry {
                log_file: e
                    .get("log_file")
                    .and_then(Value::as_str)
                    .map_or_else(|| format!("log.{command}"), str::to_string),
                text: text_arg(e, "text").to_string(),
                // An absent code means the caller only has the text.
                exit_code: match e.get("exit_code") {
                    None => Some(0),
                    Some(code) => code.as_i64().map(|c| c as i32),
                },
                timed_out: e.get("timed_out").and_then(Value::as_bool).unwrap_or(false),
                command,
            }
        })
        .collect();
    ExecutionLogs {
        entries,
        wall_time_ms: 0,
    }
}

impl Drop for McpService {
    /// Stops taking work and waits for the running jobs.
    fn drop(&mut self) {
        self.queue.take();
        for handle in self.workers.drain(..) {
            let _ = handle.join();
        }
        if let Err(e) = lock(&self.inner.registry).compact() {
            log::warn!("registry compaction at shutdown failed: {e}");
        }
    }
}
