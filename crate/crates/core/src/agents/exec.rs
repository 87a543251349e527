//! The single seam through which external tools are run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{rel_display, AgentError};
use crate::llm::{Gateway, SubprocessRecord, TranscriptRecord};

/// One external command. `name` is the logical command used for log file
/// names and for scripting fakes; it differs from `program` under launchers
/// such as `mpirun`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandSpec {
    pub name: String,
    pub program: String,
    pub args: Vec<String>,
    pub cwd: PathBuf,
    pub timeout: Option<Duration>,
}

impl CommandSpec {
    pub fn new(program: impl Into<String>, args: Vec<String>, cwd: impl Into<PathBuf>) -> Self {
        let program = program.into();
        Self {
            name: program.clone(),
            program,
            args,
            cwd: cwd.into(),
            timeout: None,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.timeout = timeout;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommandOutput {
    /// `None` when the process was killed or ended by a signal.
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
}

impl CommandOutput {
    pub fn success(&self) -> bool {
        self.exit_code == Some(0) && !self.timed_out
    }

    /// Stdout followed by stderr, the content of a `log.<command>` file.
    pub fn combined(&self) -> String {
        let mut text = self.stdout.clone();
        if !self.stderr.is_empty() {
            if !text.is_empty() && !text.ends_with('\n') {
                text.push('\n');
            }
            text.push_str(&self.stderr);
        }
        text
    }
}

pub trait Executor: Send + Sync {
    fn available(&self, program: &str) -> bool;
    fn run(&self, spec: &CommandSpec) -> Result<CommandOutput, AgentError>;
}

/// Runs a command and appends a subprocess record to the audit transcript,
/// with the working directory shown relative to `root`.
pub fn run_logged(
    gateway: &Gateway,
    executor: &dyn Executor,
    spec: &CommandSpec,
    root: &Path,
) -> Result<CommandOutput, AgentError> {
    if !executor.available(&spec.program) {
        return Err(AgentError::ExecutorUnavailable(spec.program.clone()));
    }
    let output = executor.run(spec)?;
    gateway.record(&TranscriptRecord::Subprocess(SubprocessRecord {
        program: spec.program.clone(),
        args: spec.args.clone(),
        cwd: rel_display(root, &spec.cwd),
        exit_code: output.exit_code,
        timed_out: output.timed_out,
    }))?;
    Ok(output)
}

/// Real child processes, optionally searching extra directories first.
#[derive(Debug, Clone, Default)]
pub struct SubprocessExecutor {
    pub extra_path: Vec<PathBuf>,
}

impl SubprocessExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    fn resolve(&self, program: &str) -> Option<PathBuf> {
        if program.contains('/') {
            let p = PathBuf::from(program);
            return p.is_file().then_some(p);
        }
        let path_var = std::env::var_os("PATH").unwrap_or_default();
        self.extra_path
            .iter()
            .cloned()
            .chain(std::env::split_paths(&path_var))
            .map(|dir| dir.join(program))
            .find(|candidate| candidate.is_file())
    }
}

impl Executor for SubprocessExecutor {
    fn available(&self, program: &str) -> bool {
        self.resolve(program).is_some()
    }

    fn run(&self, spec: &CommandSpec) -> Result<CommandOutput, AgentError> {
        let program = self
            .resolve(&spec.program)
            .ok_or_else(|| AgentError::ExecutorUnavailable(spec.program.clone()))?;
        let mut child = Command::new(program)
            .args(&spec.args)
            .current_dir(&spec.cwd)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| AgentError::io(&spec.cwd, e))?;
        let mut out = child.stdout.take().expect("stdout piped");
        let mut err = child.stderr.take().expect("stderr piped");
        let out_rx = drain(move |buf| out.read_to_end(buf));
        let err_rx = drain(move |buf| err.read_to_end(buf));
        let start = Instant::now();
        let mut timed_out = false;
        let status = loop {
            match child.try_wait().map_err(|e| AgentError::io(&spec.cwd, e))? {
                Some(status) => break status,
                None if spec.timeout.is_some_and(|t| start.elapsed() >= t) => {
                    timed_out = true;
                    let _ = child.kill();
                    break child.wait().map_err(|e| AgentError::io(&spec.cwd, e))?;
                }
                None => std::thread::sleep(Duration::from_millis(10)),
            }
        };
        // A killed child may leave grandchildren holding the pipes open.
        let grace = if timed_out {
            Duration::from_secs(1)
        } else {
            Duration::from_secs(3600)
        };
        let stdout =
            String::from_utf8_lossy(&out_rx.recv_timeout(grace).unwrap_or_default()).into_owned();
        let stderr =
            String::from_utf8_lossy(&err_rx.recv_timeout(grace).unwrap_or_default()).into_owned();
        Ok(CommandOutput {
            exit_code: if timed_out { None } else { status.code() },
            stdout,
            stderr,
            timed_out,
        })
    }
}

fn drain(
    mut read: impl FnMut(&mut Vec<u8>) -> std::io::Result<usize> + Send + 'static,
) -> std::sync::mpsc::Receiver<Vec<u8>> {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = read(&mut buf);
        let _ = tx.send(buf);
    });
    rx
}

/// One scripted result of a fake command.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FakeOutcome {
    #[serde(default)]
    pub exit_code: i32,
    #[serde(default)]
    pub stdout: String,
    /// Files created relative to the working directory.
    #[serde(default)]
    pub creates: Vec<String>,
    #[serde(default)]
    pub timed_out: bool,
    #[serde(default)]
    pub delay_ms: u64,
}

impl FakeOutcome {
    pub fn ok(stdout: impl Into<String>) -> Self {
        Self {
            stdout: stdout.into(),
            ..Self::default()
        }
    }

    pub fn fail(exit_code: i32, stdout: impl Into<String>) -> Self {
        Self {
            exit_code,
            stdout: stdout.into(),
            ..Self::default()
        }
    }

    pub fn creating(mut self, path: impl Into<String>) -> Self {
        self.creates.push(path.into());
        self
    }
}

/// A file that must contain some text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileProbe {
    pub path: String,
    pub contains: String,
}

/// Outcomes of one fake command, consumed in order; the last repeats. When
/// `ok_when` holds in the working directory the call succeeds regardless.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FakeProgram {
    #[serde(default)]
    pub outcomes: Vec<FakeOutcome>,
    #[serde(default)]
    pub ok_when: Option<FileProbe>,
}

impl FakeProgram {
    pub fn sequence(outcomes: Vec<FakeOutcome>) -> Self {
        Self {
            outcomes,
            ok_when: None,
        }
    }

    pub fn ok_when(mut self, path: impl Into<String>, contains: impl Into<String>) -> Self {
        self.ok_when = Some(FileProbe {
            path: path.into(),
            contains: contains.into(),
        });
        self
    }
}

/// The serialized form of a fake, as stored in `executor.json`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FakeScript {
    #[serde(default)]
    pub programs: BTreeMap<String, FakeProgram>,
    /// Programs reported as not installed.
    #[serde(default)]
    pub missing: Vec<String>,
}

/// Scripted stand-in for external tools. Unscripted commands succeed.
#[derive(Debug, Default)]
pub struct FakeExecutor {
    script: FakeScript,
    calls: Mutex<Vec<CommandSpec>>,
    counters: Mutex<BTreeMap<String, usize>>,
}

impl FakeExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_script(script: FakeScript) -> Self {
        Self {
            script,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = fs::read_to_string(path).map_err(|e| AgentError::io(path, e))?;
        let script = serde_json::from_str(&text).map_err(|e| {
            AgentError::io(
                path,
                std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            )
        })?;
        Ok(Self::from_script(script))
    }

    pub fn program(mut self, name: impl Into<String>, program: FakeProgram) -> Self {
        self.script.programs.insert(name.into(), program);
        self
    }

    pub fn missing(mut self, program: impl Into<String>) -> Self {
        self.script.missing.push(program.into());
        self
    }

    pub fn script(&self) -> &FakeScript {
        &self.script
    }

    pub fn calls(&self) -> Vec<CommandSpec> {
        self.calls.lock().expect("call log poisoned").clone()
    }

    pub fn call_count(&self, name: &str) -> usize {
        self.calls
            .lock()
            .expect("call log poisoned")
            .iter()
            .filter(|c| c.name == name)
            .count()
    }

    fn next_outcome(&self, spec: &CommandSpec) -> FakeOutcome {
        let index = {
            let mut counters = self.counters.lock().expect("counters poisoned");
            let n = counters.entry(spec.name.clone()).or_insert(0);
            *n += 1;
            *n - 1
        };
        let Some(program) = self.script.programs.get(&spec.name) else {
            return FakeOutcome::ok("End\n");
        };
        if let Some(probe) = &program.ok_when {
            let satisfied = fs::read_to_string(spec.cwd.join(&probe.path))
                .is_ok_and(|t| t.contains(&probe.contains));
            if satisfied {
                return FakeOutcome::ok("End\n");
            }
        }
        match program.outcomes.get(index).or(program.outcomes.last()) {
            Some(outcome) => outcome.clone(),
            None => FakeOutcome::ok("End\n"),
        }
    }
}

impl Executor for FakeExecutor {
    fn available(&self, program: &str) -> bool {
        !self.script.missing.iter().any(|m| m == program)
    }

    fn run(&self, spec: &CommandSpec) -> Result<CommandOutput, AgentError> {
        self.calls
            .lock()
            .expect("call log poisoned")
            .push(spec.clone());
        let outcome = self.next_outcome(spec);
        if outcome.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(outcome.delay_ms));
        }
        for rel in &outcome.creates {
            let path = spec.cwd.join(rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| AgentError::io(dir, e))?;
            }
            fs::write(&path, placeholder_bytes(rel)).map_err(|e| AgentError::io(&path, e))?;
        }
        Ok(CommandOutput {
            exit_code: if outcome.timed_out {
                None
            } else {
                Some(outcome.exit_code)
            },
            stdout: outcome.stdout,
            stderr: String::new(),
            timed_out: outcome.timed_out,
        })
    }
}

fn placeholder_bytes(rel: &str) -> Vec<u8> {
    if rel.ends_with(".png") {
        b"\x89PNG\r\n\x1a\n".to_vec()
    } else if rel.ends_with(".msh") {
        b"$MeshFormat\n2.2 0 8\n$EndMeshFormat\n".to_vec()
    } else {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fake_outcomes_advance_and_repeat() {
        let dir = tempfile::tempdir().unwrap();
        let fake = FakeExecutor::new().program(
            "icoFoam",
            FakeProgram::sequence(vec![FakeOutcome::fail(1, "boom"), FakeOutcome::ok("fine")]),
        );
        let spec = CommandSpec::new("icoFoam", vec![], dir.path());
        let codes: Vec<_> = (0..3).map(|_| fake.run(&spec).unwrap().exit_code).collect();
        assert_eq!(codes, [Some(1), Some(0), Some(0)]);
        assert_eq!(fake.call_count("icoFoam"), 3);
        assert!(fake
            .run(&CommandSpec::new("blockMesh", vec![], dir.path()))
            .unwrap()
            .success());
    }

    #[test]
    fn probe_overrides_failure() {
        let dir = tempfile::tempdir().unwrap();
        let fake = FakeExecutor::new().program(
            "icoFoam",
            FakeProgram::sequence(vec![FakeOutcome::fail(1, "boom")])
                .ok_when("system/fvSchemes", "div(phi,U)"),
        );
        let spec = CommandSpec::new("icoFoam", vec![], dir.path());
        assert!(!fake.run(&spec).unwrap().success());
        fs::create_dir_all(dir.path().join("system")).unwrap();
        fs::write(
            dir.path().join("system/fvSchemes"),
            "div(phi,U) Gauss linear;",
        )
        .unwrap();
        assert!(fake.run(&spec).unwrap().success());
    }

    #[test]
    fn real_subprocess_captures_output_and_timeout() {
        let exec = SubprocessExecutor::new();
        if !exec.available("sh") {
            return;
        }
        let dir = tempfile::tempdir().unwrap();
        let out = exec
            .run(&CommandSpec::new(
                "sh",
                vec!["-c".into(), "echo hi; echo err >&2; exit 3".into()],
                dir.path(),
            ))
            .unwrap();
        assert_eq!(out.exit_code, Some(3));
        assert_eq!(out.stdout, "hi\n");
        assert_eq!(out.stderr, "err\n");
        let slow = CommandSpec::new("sh", vec!["-c".into(), "exec sleep 5".into()], dir.path())
            .with_timeout(Some(Duration::from_millis(100)));
        let out = exec.run(&slow).unwrap();
        assert!(out.timed_out);
        assert!(!out.success());
        assert!(!exec.available("definitely-not-a-real-tool-xyz"));
    }
}
