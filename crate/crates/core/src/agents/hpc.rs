//! Slurm batch scripts, their directive grammar and job monitoring.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::exec::CommandSpec;
use super::logs::{parse_errors, ExecutionLogs, LogEntry, Severity};
use super::runner::RunStatus;
use super::writer::normalize;
use super::{AgentError, Executor};
use crate::case::{CaseFile, CaseState};
use crate::llm::schema::strip_code_fences;
use crate::llm::{render_prompt, vars, Gateway};

pub const SLURM_SCRIPT: &str = "submit.slurm";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HpcConfig {
    pub account: String,
    pub constraint: String,
    pub qos: String,
    pub partition: Option<String>,
    pub nodes: u32,
    pub ntasks: u32,
    /// Defaults to `ntasks / nodes`, rounded up.
    pub ntasks_per_node: Option<u32>,
    pub walltime: String,
    pub job_name: String,
    pub memory: String,
    pub output: String,
    pub error: String,
    /// Directory the job changes into before running the case.
    pub workdir: String,
    /// Platform notes (partition limits, modules) given to the model.
    pub platform_docs: Option<String>,
}

impl Default for HpcConfig {
    fn default() -> Self {
        Self {
            account: String::new(),
            constraint: "cpu".into(),
            qos: "regular".into(),
            partition: None,
            nodes: 1,
            ntasks: 1,
            ntasks_per_node: None,
            walltime: "02:00:00".into(),
            job_name: "Sim".into(),
            memory: "128GB".into(),
            output: "%j.out".into(),
            error: "%j.err".into(),
            workdir: ".".into(),
            platform_docs: None,
        }
    }
}

fn valid_walltime(t: &str) -> bool {
    let parts: Vec<&str> = t.split(':').collect();
    parts.len() == 3
        && parts
            .iter()
            .all(|p| p.len() >= 2 && p.bytes().all(|b| b.is_ascii_digit()))
        && parts[1].parse::<u32>().is_ok_and(|m| m < 60)
        && parts[2].parse::<u32>().is_ok_and(|s| s < 60)
}

impl HpcConfig {
    pub fn tasks_per_node(&self) -> u32 {
        self.ntasks_per_node
            .unwrap_or_else(|| self.ntasks.div_ceil(self.nodes.max(1)))
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::Precondition(m));
        if self.account.trim().is_empty() {
            return bad("the HPC account is empty".into());
        }
        if self.ntasks < 1 || self.nodes < 1 {
            return bad(format!(
                "need ntasks >= 1 and nodes >= 1 (got {} and {})",
                self.ntasks, self.nodes
            ));
        }
        if self.tasks_per_node() * self.nodes < self.ntasks {
            return bad(format!(
                "{} nodes with {} tasks each cannot hold {} tasks",
                self.nodes,
                self.tasks_per_node(),
                self.ntasks
            ));
        }
        if !valid_walltime(&self.walltime) {
            return bad(format!("walltime {:?} is not HH:MM:SS", self.walltime));
        }
        Ok(())
    }

    /// Mandatory directives in script order, as `(option, value)`.
    pub fn directives(&self) -> Vec<(String, String)> {
        let mut d = vec![("-A".to_string(), self.account.clone())];
        if !self.constraint.is_empty() {
            d.push(("-C".into(), self.constraint.clone()));
        }
        if !self.qos.is_empty() {
            d.push(("-q".into(), self.qos.clone()));
        }
        if let Some(p) = &self.partition {
            d.push(("-p".into(), p.clone()));
        }
        d.push(("-N".into(), self.nodes.to_string()));
        d.push(("-n".into(), self.ntasks.to_string()));
        d.push((
            "--ntasks-per-node".into(),
            self.tasks_per_node().to_string(),
        ));
        d.push(("-t".into(), self.walltime.clone()));
        d.push(("--mem".into(), self.memory.clone()));
        d.push(("-J".into(), self.job_name.clone()));
        d.push(("-o".into(), self.output.clone()));
        d.push(("-e".into(), self.error.clone()));
        d
    }

    fn directive_block(&self) -> String {
        self.directives()
            .iter()
            .map(|(opt, value)| render_directive(opt, value))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn render_directive(opt: &str, value: &str) -> String {
    if opt.starts_with("--") {
        format!("#SBATCH {opt}={value}")
    } else {
        format!("#SBATCH {opt} {value}")
    }
}

/// The reference batch script for a configuration.
pub fn render_slurm_template(cfg: &HpcConfig) -> String {
    format!(
        "#!/bin/bash\n{}\n\n# Initialize error handling\nset -e\n\n# Change to case directory\ncd {} || exit 1\n\n# Create log directory if it doesn't exist\nmkdir -p logs\n\n# Run the simulation\necho \"Starting OpenFOAM simulation at $(date)\"\n./Allrun -parallel\nif [ $? -eq 0 ]; then\n    echo \"Simulation completed successfully at $(date)\"\n    exit 0\nelse\n    echo \"Simulation failed at $(date)\"\n    exit 1\nfi\n",
        cfg.directive_block(),
        cfg.workdir
    )
}

/// One `#SBATCH` line, with the option in its long form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Directive {
    pub line: usize,
    pub option: String,
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SbatchScript {
    pub shebang: String,
    pub directives: Vec<Directive>,
    /// Non-comment, non-blank lines after the directive block, trimmed.
    pub commands: Vec<String>,
}

fn long_option(opt: &str) -> Option<&'static str> {
    Some(match opt {
        "-A" | "--account" => "account",
        "-C" | "--constraint" => "constraint",
        "-q" | "--qos" => "qos",
        "-p" | "--partition" => "partition",
        "-N" | "--nodes" => "nodes",
        "-n" | "--ntasks" => "ntasks",
        "--ntasks-per-node" => "ntasks-per-node",
        "-t" | "--time" => "time",
        "--mem" => "mem",
        "-J" | "--job-name" => "job-name",
        "-o" | "--output" => "output",
        "-e" | "--error" => "error",
        "-c" | "--cpus-per-task" => "cpus-per-task",
        "--mail-type" => "mail-type",
        "--mail-user" => "mail-user",
        "--exclusive" => "exclusive",
        "-L" | "--licenses" => "licenses",
        "--gres" => "gres",
        _ => return None,
    })
}

/// Parses the line grammar: a shebang, then `#SBATCH <option> [value]`
/// lines before the first command. Reports every malformed line.
pub fn parse_sbatch(text: &str) -> Result<SbatchScript, Vec<(String, String)>> {
    let mut failures = Vec::new();
    let mut lines = text.lines().enumerate();
    let shebang = match lines.next() {
        Some((_, l)) if l.starts_with("#!") => l.to_string(),
        _ => {
            failures.push(("line 1".into(), "missing #! interpreter line".into()));
            String::new()
        }
    };
    let mut directives = Vec::new();
    let mut commands = Vec::new();
    for (i, raw) in lines {
        let at = format!("line {}", i + 1);
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix("#SBATCH") {
            if !rest.starts_with(char::is_whitespace) {
                failures.push((at, format!("malformed directive {line:?}")));
                continue;
            }
            if !commands.is_empty() {
                failures.push((
                    at,
                    "directive after the first command is ignored by sbatch".into(),
                ));
                continue;
            }
            let rest = rest.trim();
            let (opt, value) = if rest.starts_with("--") {
                match rest.split_once('=') {
                    Some((o, v)) => (o.trim(), Some(v.trim())),
                    None => match rest.split_once(char::is_whitespace) {
                        Some((o, v)) => (o, Some(v.trim())),
                        None => (rest, None),
                    },
                }
            } else {
                match rest.split_once(char::is_whitespace) {
                    Some((o, v)) => (o, Some(v.trim())),
                    None => (rest, None),
                }
            };
            match long_option(opt) {
                Some(long) => directives.push(Directive {
                    line: i + 1,
                    option: long.to_string(),
                    value: value.filter(|v| !v.is_empty()).map(str::to_string),
                }),
                None => failures.push((at, format!("unknown option {opt:?}"))),
            }
        } else if !line.is_empty() && !line.starts_with('#') {
            commands.push(line.to_string());
        }
    }
    if failures.is_empty() {
        Ok(SbatchScript {
            shebang,
            directives,
            commands,
        })
    } else {
        Err(failures)
    }
}

/// Checks a script against a configuration: all mandatory directives with
/// their values in order, error handling and the parallel Allrun call.
pub fn check_slurm(text: &str, cfg: &HpcConfig) -> Vec<(String, String)> {
    let script = match parse_sbatch(text) {
        Ok(s) => s,
        Err(failures) => return failures,
    };
    let mut failures = Vec::new();
    let mut last = 0;
    for (opt, value) in cfg.directives() {
        let long = long_option(&opt).expect("mandatory options are known");
        match script.directives.iter().position(|d| d.option == long) {
            None => failures.push((format!("#SBATCH {opt}"), "missing".into())),
            Some(i) => {
                let found = script.directives[i].value.as_deref().unwrap_or("");
                if found != value {
                    failures.push((
                        format!("#SBATCH {opt}"),
                        format!("value {found:?}, expected {value:?}"),
                    ));
                }
                if i < last {
                    failures.push((format!("#SBATCH {opt}"), "out of order".into()));
                }
                last = last.max(i);
            }
        }
    }
    for required in ["set -e", "./Allrun -parallel"] {
        if !script.commands.iter().any(|c| c == required) {
            failures.push(("commands".into(), format!("missing line {required:?}")));
        }
    }
    if !script.commands.iter().any(|c| c.starts_with("cd ")) {
        failures.push(("commands".into(), "missing cd into the case".into()));
    }
    failures
}

/// Generates the batch script with the model, checks it against the
/// directive grammar, repairs once and writes it to the case.
pub fn generate_slurm(
    state: &mut CaseState,
    cfg: &HpcConfig,
    requirement: &str,
    gateway: &Gateway,
) -> Result<CaseFile, AgentError> {
    cfg.validate()?;
    let bundle = render_prompt(
        "slurm_generation",
        &vars([
            ("directives", cfg.directive_block()),
            (
                "platform_docs",
                cfg.platform_docs
                    .clone()
                    .unwrap_or_else(|| "(none provided)".into()),
            ),
            ("case_dir", cfg.workdir.clone()),
            ("user_requirement", requirement.trim().to_string()),
        ]),
    )?;
    let mut script = normalize(strip_code_fences(&gateway.chat_text(&bundle)?));
    let mut failures = check_slurm(&script, cfg);
    if !failures.is_empty() {
        let diagnostics = failures
            .iter()
            .map(|(a, b)| format!("{a}: {b}"))
            .collect::<Vec<_>>()
            .join("\n");
        log::warn!("batch script rejected:\n{diagnostics}");
        let repair = render_prompt(
            "script_repair",
            &vars([
                ("tool", "Slurm".to_string()),
                ("script", script.clone()),
                ("error_log", diagnostics),
                ("user_requirement", requirement.trim().to_string()),
            ]),
        )?;
        script = normalize(strip_code_fences(&gateway.chat_text(&repair)?));
        failures = check_slurm(&script, cfg);
    }
    if !failures.is_empty() {
        return Err(AgentError::script_violation("slurm", failures));
    }
    let file = CaseFile::from_text(SLURM_SCRIPT, script)?;
    state.put(file.clone())?;
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Running,
    Completed,
    Failed(String),
}

impl JobState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed(_))
    }
}

pub trait SchedulerClient: Send + Sync {
    /// Submits `script` (relative to `cwd`) and returns the job id.
    fn submit(&self, script: &str, cwd: &Path) -> Result<String, AgentError>;
    fn poll(&self, job_id: &str) -> Result<JobState, AgentError>;
    /// Job output and any `log.*` files written by the run.
    fn fetch_logs(&self, job_id: &str, cwd: &Path) -> Result<Vec<LogEntry>, AgentError>;
}

/// `sbatch`, `squeue` and `sacct` through an executor.
#[derive(Clone)]
pub struct SlurmClient {
    pub executor: Arc<dyn Executor>,
}

impl SlurmClient {
    fn run(
        &self,
        program: &str,
        args: &[&str],
        cwd: &Path,
    ) -> Result<super::CommandOutput, AgentError> {
        if !self.executor.available(program) {
            return Err(AgentError::ExecutorUnavailable(program.into()));
        }
        self.executor.run(&CommandSpec::new(
            program,
            args.iter().map(|a| a.to_string()).collect(),
            cwd,
        ))
    }
}

fn slurm_state(word: &str) -> Option<JobState> {
    let word = word.trim().trim_end_matches('+');
    Some(match word {
        "" => return None,
        "PENDING" | "CONFIGURING" | "REQUEUED" | "SUSPENDED" => JobState::Pending,
        "RUNNING" | "COMPLETING" => JobState::Running,
        "COMPLETED" => JobState::Completed,
        other => JobState::Failed(other.to_string()),
    })
}

impl SchedulerClient for SlurmClient {
    fn submit(&self, script: &str, cwd: &Path) -> Result<String, AgentError> {
        let out = self.run("sbatch", &["--parsable", script], cwd)?;
        if !out.success() {
            let msg = if out.stderr.trim().is_empty() {
                out.stdout
            } else {
                out.stderr
            };
            return Err(AgentError::SubmitFailure(msg.trim().to_string()));
        }
        let id = out
            .stdout
            .trim()
            .split(';')
            .next()
            .unwrap_or("")
            .trim()
            .to_string();
        if id.is_empty() {
            return Err(AgentError::SubmitFailure("sbatch printed no job id".into()));
        }
        Ok(id)
    }

    fn poll(&self, job_id: &str) -> Result<JobState, AgentError> {
        let cwd = std::env::temp_dir();
        let out = self.run("squeue", &["-h", "-j", job_id, "-o", "%T"], &cwd)?;
        if let Some(state) = out.stdout.lines().next().and_then(slurm_state) {
            return Ok(state);
        }
        let out = self.run(
            "sacct",
            &["-j", job_id, "-X", "-n", "-P", "-o", "State"],
            &cwd,
        )?;
        Ok(out
            .stdout
            .lines()
            .next()
            .and_then(|l| slurm_state(l.split_whitespace().next().unwrap_or("")))
            .unwrap_or(JobState::Running))
    }

    fn fetch_logs(&self, job_id: &str, cwd: &Path) -> Result<Vec<LogEntry>, AgentError> {
        read_job_logs(job_id, cwd)
    }
}

/// `<id>.out`, `<id>.err` and `log.*` files below `cwd`.
pub fn read_job_logs(job_id: &str, cwd: &Path) -> Result<Vec<LogEntry>, AgentError> {
    let mut entries = Vec::new();
    for name in [format!("{job_id}.out"), format!("{job_id}.err")] {
        if let Ok(text) = std::fs::read_to_string(cwd.join(&name)) {
            entries.push(LogEntry {
                command: "sbatch".into(),
                log_file: name,
                text,
                exit_code: Some(0),
                timed_out: false,
            });
        }
    }
    let mut names: Vec<String> = std::fs::read_dir(cwd)
        .map_err(|e| AgentError::io(cwd, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("log."))
        .collect();
    names.sort();
    for name in names {
        let text = std::fs::read_to_string(cwd.join(&name)).unwrap_or_default();
        entries.push(LogEntry {
            command: name.trim_start_matches("log.").to_string(),
            log_file: name,
            text,
            exit_code: Some(0),
            timed_out: false,
        });
    }
    Ok(entries)
}

/// Scripted scheduler: fixed id, a state sequence whose last state repeats.
#[derive(Debug, Default)]
pub struct FakeScheduler {
    pub job_id: String,
    pub states: Vec<JobState>,
    pub submit_error: Option<String>,
    pub logs: Vec<LogEntry>,
    polls: AtomicUsize,
    submitted: Mutex<Vec<String>>,
}

impl FakeScheduler {
    pub fn new(job_id: impl Into<String>, states: Vec<JobState>) -> Self {
        Self {
            job_id: job_id.into(),
            states,
            ..Self::default()
        }
    }

    pub fn polls(&self) -> usize {
        self.polls.load(Ordering::SeqCst)
    }

    pub fn submitted(&self) -> Vec<String> {
        self.submitted.lock().expect("poisoned").clone()
    }
}

impl SchedulerClient for FakeScheduler {
    fn submit(&self, script: &str, _cwd: &Path) -> Result<String, AgentError> {
        if let Some(err) = &self.submit_error {
            return Err(AgentError::SubmitFailure(err.clone()));
        }
        self.submitted
            .lock()
            .expect("poisoned")
            .push(script.to_string());
        Ok(self.job_id.clone())
    }

    fn poll(&self, _job_id: &str) -> Result<JobState, AgentError> {
        let n = self.polls.fetch_add(1, Ordering::SeqCst);
        Ok(self
            .states
            .get(n)
            .or(self.states.last())
            .cloned()
            .unwrap_or(JobState::Completed))
    }

    fn fetch_logs(&self, _job_id: &str, _cwd: &Path) -> Result<Vec<LogEntry>, AgentError> {
        Ok(self.logs.clone())
    }
}

/// Submits the batch script and polls until the job ends. SUCCESS needs a
/// completed job and no fatal log record.
pub fn submit_and_monitor(
    state: &CaseState,
    client: &dyn SchedulerClient,
    poll_interval: Duration,
    wall_limit: Duration,
) -> Result<(String, RunStatus, ExecutionLogs), AgentError> {
    if !state.contains(SLURM_SCRIPT) {
        return Err(AgentError::Precondition(format!(
            "the case has no {SLURM_SCRIPT}"
        )));
    }
    let start = Instant::now();
    let job_id = client.submit(SLURM_SCRIPT, &state.root)?;
    log::info!("submitted job {job_id}");
    let terminal = loop {
        let job = client.poll(&job_id)?;
        if job.is_terminal() {
            break job;
        }
        if start.elapsed() >= wall_limit {
            return Err(AgentError::PollTimeout(wall_limit));
        }
        std::thread::sleep(poll_interval);
    };
    let mut logs = ExecutionLogs {
        entries: client.fetch_logs(&job_id, &state.root)?,
        wall_time_ms: 0,
    };
    let (exit_code, text) = match &terminal {
        JobState::Completed => (Some(0), "COMPLETED".to_string()),
        JobState::Failed(why) => (Some(1), why.clone()),
        _ => unreachable!("loop ends on a terminal state"),
    };
    logs.entries.push(LogEntry {
        command: format!("job {job_id}"),
        log_file: format!("{job_id}.state"),
        text,
        exit_code,
        timed_out: false,
    });
    logs.wall_time_ms = start.elapsed().as_millis() as u64;
    let fatal = parse_errors(&logs)
        .iter()
        .any(|r| r.severity == Severity::Fatal);
    let status = if terminal == JobState::Completed && !fatal {
        RunStatus::Success
    } else {
        RunStatus::Failure
    };
    Ok((job_id, status, logs))
}
