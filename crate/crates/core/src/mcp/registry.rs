//! Cases and jobs, persisted as an append-only log of JSON lines. Later
//! lines for the same id supersede earlier ones; compaction rewrites the
//! log with one line per record.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::McpError;

pub const REGISTRY_LOG: &str = "registry.log";
pub const QUARANTINE_LOG: &str = "quarantine.log";
pub const RESTART_REASON: &str = "server restart";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub user_prompt: String,
    pub created_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Mesh,
    Simulation,
    Visualization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Succeeded | JobStatus::Failed)
    }

    fn may_become(self, next: JobStatus) -> bool {
        matches!(
            (self, next),
            (JobStatus::Pending, JobStatus::Running)
                | (JobStatus::Running, JobStatus::Succeeded | JobStatus::Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub case_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    #[serde(default)]
    pub error: Option<String>,
    /// Id under which the job's logs are stored, once it has any.
    #[serde(default)]
    pub logs_ref: Option<String>,
    /// Case-relative files the job produced.
    #[serde(default)]
    pub outputs: Vec<String>,
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum StoreLine {
    Case(CaseRecord),
    Job(JobRecord),
}

/// What loading found besides valid records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// `(line number, reason)` of every quarantined line.
    pub quarantined: Vec<(usize, String)>,
    /// Jobs that were in flight and are now failed.
    pub interrupted: Vec<String>,
}

#[derive(Debug)]
pub struct Registry {
    dir: PathBuf,
    cases: BTreeMap<String, CaseRecord>,
    jobs: BTreeMap<String, JobRecord>,
    log: File,
    lines: usize,
    next_case: u64,
    next_job: u64,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn io(path: &Path, e: std::io::Error) -> McpError {
    McpError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn sequence_of(id: &str) -> u64 {
    id.rsplit('-')
        .next()
        .and_then(|n| n.parse().ok())
        .unwrap_or(0)
}

fn open_append(path: &Path) -> Result<File, McpError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io(path, e))
}

impl Registry {
    /// Loads the store, quarantining unreadable lines and failing every job
    /// that was pending or running when the previous server stopped.
    pub fn open(dir: &Path) -> Result<(Self, LoadReport), McpError> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let path = dir.join(REGISTRY_LOG);
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io(&path, e)),
        };
        let mut report = LoadReport::default();
        let mut cases = BTreeMap::new();
        let mut jobs = BTreeMap::new();
        let mut bad = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<StoreLine>(line) {
                Ok(StoreLine::Case(c)) => {
                    cases.insert(c.case_id.clone(), c);
                }
                Ok(StoreLine::Job(j)) => {
                    jobs.insert(j.job_id.clone(), j);
                }
                Err(e) => {
                    report.quarantined.push((i + 1, e.to_string()));
                    bad.push(line.to_string());
                }
            }
        }
        if !bad.is_empty() {
            let qpath = dir.join(QUARANTINE_LOG);
            let mut q = open_append(&qpath)?;
            for line in &bad {
                writeln!(q, "{line}").map_err(|e| io(&qpath, e))?;
            }
            log::warn!(
                "quarantined {} unreadable registry line(s) to {}",
                bad.len(),
                qpath.display()
            );
        }
        let stamp = now();
        for job in jobs.values_mut().filter(|j| !j.status.is_terminal()) {
            job.status = JobStatus::Failed;
            job.error = Some(RESTART_REASON.into());
            job.updated_at = stamp;
            report.interrupted.push(job.job_id.clone());
        }
        let next_case = cases.keys().map(|k| sequence_of(k)).max().unwrap_or(0) + 1;
        let next_job = jobs.keys().map(|k| sequence_of(k)).max().unwrap_or(0) + 1;
        let mut registry = Self {
            dir: dir.to_path_buf(),
            cases,
            jobs,
            log: open_append(&path)?,
            lines: 0,
            next_case,
            next_job,
        };
        registry.compact()?;
        Ok((registry, report))
    }

    fn log_path(&self) -> PathBuf {
        self.dir.join(REGISTRY_LOG)
    }

    fn append(&mut self, line: &StoreLine) -> Result<(), McpError> {
        let path = self.log_path();
        let text = serde_json::to_string(line).expect("registry records serialize");
        writeln!(self.log, "{text}").map_err(|e| io(&path, e))?;
        self.log.sync_data().map_err(|e| io(&path, e))?;
        self.lines += 1;
        if self.lines > 2 * (self.cases.len() + self.jobs.len()) + 64 {
            self.compact()?;
        }
        Ok(())
    }

    /// Rewrites the log with exactly one line per live record.
    pub fn compact(&mut self) -> Result<(), McpError> {
        let path = self.log_path();
        let tmp = path.with_extension("tmp");
        let mut out = String::new();
        for c in self.cases.values() {
            out.push_str(
                &serde_json::to_string(&StoreLine::Case(c.clone())).expect("records serialize"),
            );
            out.push('\n');
        }
        for j in self.jobs.values() {
            out.push_str(
                &serde_json::to_string(&StoreLine::Job(j.clone())).expect("records serialize"),
            );
            out.push('\n');
        }
        fs::write(&tmp, out).map_err(|e| io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io(&path, e))?;
        self.log = open_append(&path)?;
        self.lines = self.cases.len() + self.jobs.len();
        Ok(())
    }

    pub fn add_case(&mut self, user_prompt: &str) -> Result<CaseRecord, McpError> {
        let record = CaseRecord {
            case_id: format!("case-{:06}", self.next_case),
            user_prompt: user_prompt.to_string(),
            created_at: now(),
        };
        self.append(&StoreLine::Case(record.clone()))?;
        self.next_case += 1;
        self.cases.insert(record.case_id.clone(), record.clone());
        Ok(record)
    }

    pub fn add_job(&mut self, case_id: &str, kind: JobKind) -> Result<JobRecord, McpError> {
        let stamp = now();
        let record = JobRecord {
            job_id: format!("job-{:06}", self.next_job),
            case_id: case_id.to_string(),
            kind,
            status: JobStatus::Pending,
            error: None,
            logs_ref: None,
            outputs: Vec::new(),
            created_at: stamp,
            updated_at: stamp,
        };
        self.append(&StoreLine::Job(record.clone()))?;
        self.next_job += 1;
        self.jobs.insert(record.job_id.clone(), record.clone());
        Ok(record)
    }

    /// Moves a job along pending, running, terminal; any other step is refused.
    pub fn transition(
        &mut self,
        job_id: &str,
        status: JobStatus,
        update: impl FnOnce(&mut JobRecord),
    ) -> Result<JobRecord, McpError> {
        let current = self
            .jobs
            .get(job_id)
            .ok_or_else(|| McpError::UnknownJob(job_id.to_string()))?;
        if !current.status.may_become(status) {
            return Err(McpError::Internal(format!(
                "job {job_id} cannot move from {:?} to {status:?}",
                current.status
            )));
        }
        let mut next = current.clone();
        next.status = status;
        next.updated_at = now();
        update(&mut next);
        self.append(&StoreLine::Job(next.clone()))?;
        self.jobs.insert(job_id.to_string(), next.clone());
        Ok(next)
    }

    pub fn case(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.get(case_id)
    }

    pub fn job(&self, job_id: &str) -> Option<&JobRecord> {
        self.jobs.get(job_id)
    }

    pub fn cases(&self) -> impl Iterator<Item = &CaseRecord> {
        self.cases.values()
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.jobs.values()
    }
}
