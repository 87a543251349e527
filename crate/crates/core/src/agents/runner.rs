//! Local execution of the Allrun script, one command at a time.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::exec::{run_logged, CommandSpec};
use super::logs::{parse_errors, ExecutionLogs, LogEntry, Severity};
use super::{AgentError, Executor};
use crate::case::state::is_result_time;
use crate::case::{CaseState, DictNode};
use crate::llm::Gateway;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RunStatus {
    Success,
    Failure,
}

/// One executable line of an Allrun script.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllrunCommand {
    /// 1-based line number in the script.
    pub line: usize,
    pub text: String,
    /// The OpenFOAM application or tool, with wrappers removed.
    pub name: String,
    pub args: Vec<String>,
    pub parallel: bool,
    /// Process count given on the line, if any.
    pub np: Option<u32>,
    /// Shell syntax the line-by-line runner cannot honour.
    pub unsupported: Option<String>,
}

const LAUNCHERS: [&str; 3] = ["mpirun", "mpiexec", "srun"];
const RUN_FUNCTIONS: [&str; 2] = ["runApplication", "runParallel"];

fn tokenize(line: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut quote: Option<char> = None;
    let mut started = false;
    for c in line.chars() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => current.push(c),
            None if c == '\'' || c == '"' => {
                quote = Some(c);
                started = true;
            }
            None if c.is_whitespace() => {
                if started {
                    tokens.push(std::mem::take(&mut current));
                    started = false;
                }
            }
            None => {
                current.push(c);
                started = true;
            }
        }
    }
    if started {
        tokens.push(current);
    }
    tokens
}

fn skipped(trimmed: &str) -> bool {
    let first = trimmed.split_whitespace().next().unwrap_or("");
    trimmed.is_empty()
        || trimmed.starts_with('#')
        || matches!(
            first,
            "cd" | "." | "source" | "set" | "echo" | "exit" | "true"
        )
}

/// Drops `> file`, `2>&1` and similar redirections.
fn strip_redirections(tokens: Vec<String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip_next = false;
    for t in tokens {
        if skip_next {
            skip_next = false;
            continue;
        }
        let redirect =
            t.starts_with('>') || t.starts_with("2>") || t.starts_with("1>") || t.starts_with("&>");
        if redirect {
            skip_next = matches!(t.as_str(), ">" | ">>" | "2>" | "1>" | "&>" | "2>>");
            continue;
        }
        out.push(t);
    }
    out
}

/// Extracts the executable lines, unwrapping `runApplication`,
/// `runParallel` and MPI launchers.
pub fn parse_allrun(text: &str) -> Vec<AllrunCommand> {
    let mut commands = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if skipped(trimmed) {
            continue;
        }
        let unsupported = ["|", ";", "&&", "`", "$("]
            .iter()
            .find(|m| trimmed.contains(*m))
            .map(|m| format!("shell syntax {m:?} is not supported"));
        let mut tokens = strip_redirections(tokenize(trimmed)).into_iter().peekable();
        let mut parallel = false;
        let mut np = None;
        let mut name = tokens.next().unwrap_or_default();
        if RUN_FUNCTIONS.contains(&name.as_str()) || LAUNCHERS.contains(&name.as_str()) {
            parallel = name != "runApplication";
            name = String::new();
            while let Some(t) = tokens.next() {
                if !t.starts_with('-') {
                    name = t;
                    break;
                }
                if matches!(
                    t.as_str(),
                    "-np"
                        | "-n"
                        | "--ntasks"
                        | "-s"
                        | "-suffix"
                        | "-l"
                        | "-log"
                        | "-N"
                        | "--hostfile"
                        | "-hostfile"
                        | "-machinefile"
                        | "-decomposeParDict"
                ) {
                    let value = tokens.next();
                    if matches!(t.as_str(), "-np" | "-n" | "--ntasks") {
                        np = value.and_then(|v| v.parse().ok());
                    }
                }
            }
        }
        let args: Vec<String> = tokens.collect();
        parallel |= args.iter().any(|a| a == "-parallel");
        commands.push(AllrunCommand {
            line: i + 1,
            text: trimmed.to_string(),
            name,
            args,
            parallel,
            np,
            unsupported,
        });
    }
    commands
}

/// Removes result time directories, `processor*` and `log.*` from a case.
pub fn clean_case(root: &Path) -> Result<Vec<String>, AgentError> {
    let mut removed = Vec::new();
    let entries = match fs::read_dir(root) {
        Ok(entries) => entries,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(removed),
        Err(e) => return Err(AgentError::io(root, e)),
    };
    let mut paths: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    paths.sort();
    for path in paths {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let result = if path.is_dir() && (is_result_time(&name) || name.starts_with("processor")) {
            fs::remove_dir_all(&path)
        } else if path.is_file() && name.starts_with("log.") {
            fs::remove_file(&path)
        } else {
            continue;
        };
        result.map_err(|e| AgentError::io(&path, e))?;
        removed.push(name);
    }
    Ok(removed)
}

/// `numberOfSubdomains` from the decomposition dictionary.
pub fn subdomains(state: &CaseState) -> Option<u32> {
    let dict = state.get("system/decomposeParDict")?.dictionary()?;
    let value = dict.get("numberOfSubdomains")?;
    match value {
        DictNode::Scalar(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn command_spec(cmd: &AllrunCommand, state: &CaseState, timeout: Option<Duration>) -> CommandSpec {
    if !cmd.parallel {
        return CommandSpec::new(cmd.name.clone(), cmd.args.clone(), &state.root)
            .with_timeout(timeout);
    }
    let np = cmd.np.or_else(|| subdomains(state)).unwrap_or(1);
    let mut args = vec!["-np".to_string(), np.to_string(), cmd.name.clone()];
    args.extend(cmd.args.iter().cloned());
    if !cmd.args.iter().any(|a| a == "-parallel") {
        args.push("-parallel".into());
    }
    CommandSpec::new("mpirun", args, &state.root)
        .named(cmd.name.clone())
        .with_timeout(timeout)
}

/// Cleans old artifacts, runs every Allrun command with output captured to
/// `log.<command>` and stops at the first failing command. SUCCESS needs
/// zero exit codes and no fatal log record.
pub fn run_case(
    state: &CaseState,
    executor: &dyn Executor,
    gateway: &Gateway,
    timeout: Option<Duration>,
) -> Result<(ExecutionLogs, RunStatus), AgentError> {
    let script = state
        .text("Allrun")
        .ok_or_else(|| AgentError::Precondition("the case has no Allrun script".into()))?;
    clean_case(&state.root)?;
    let start = Instant::now();
    let mut logs = ExecutionLogs::default();
    for cmd in parse_allrun(script) {
        let spec = command_spec(&cmd, state, timeout);
        let output = run_logged(gateway, executor, &spec, &state.root)?;
        let mut log_file = format!("log.{}", cmd.name);
        let mut k = 2;
        while logs.entries.iter().any(|e| e.log_file == log_file) {
            log_file = format!("log.{}.{k}", cmd.name);
            k += 1;
        }
        let text = output.combined();
        let path = state.root.join(&log_file);
        fs::write(&path, &text).map_err(|e| AgentError::io(&path, e))?;
        let failed = !output.success();
        logs.entries.push(LogEntry {
            command: cmd.name.clone(),
            log_file,
            text,
            exit_code: output.exit_code,
            timed_out: output.timed_out,
        });
        if failed {
            break;
        }
    }
    logs.wall_time_ms = start.elapsed().as_millis() as u64;
    let fatal = parse_errors(&logs)
        .iter()
        .any(|r| r.severity == Severity::Fatal);
    let status = if logs.all_succeeded() && !fatal {
        RunStatus::Success
    } else {
        RunStatus::Failure
    };
    Ok((logs, status))
}
