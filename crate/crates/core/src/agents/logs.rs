//! Captured command output and the pattern-based error extractor.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// Lines of output kept when a failure matches no pattern.
pub const TAIL_LINES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Fatal,
    Error,
    Warning,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Fatal => "fatal",
            Severity::Error => "error",
            Severity::Warning => "warning",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub severity: Severity,
    pub message: String,
    /// The command, followed by `: <file>` when the log names one.
    pub location: String,
}

/// Output of one executed command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub command: String,
    pub log_file: String,
    pub text: String,
    pub exit_code: Option<i32>,
    #[serde(default)]
    pub timed_out: bool,
}

impl LogEntry {
    pub fn failed(&self) -> bool {
        self.timed_out || self.exit_code != Some(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionLogs {
    pub entries: Vec<LogEntry>,
    pub wall_time_ms: u64,
}

impl ExecutionLogs {
    pub fn all_succeeded(&self) -> bool {
        self.entries.iter().all(|e| !e.failed())
    }
}

#[derive(Debug, Clone, Deserialize)]
struct ErrorPattern {
    pattern: String,
    severity: Severity,
    /// Whether the match opens a multi-line OpenFOAM message block.
    block: bool,
    /// Fixed message for matches whose line text is noise, such as stack frames.
    #[serde(default)]
    label: Option<String>,
}

fn patterns() -> &'static [ErrorPattern] {
    static TABLE: OnceLock<Vec<ErrorPattern>> = OnceLock::new();
    TABLE.get_or_init(|| {
        serde_json::from_str(include_str!("../../assets/error_patterns.json"))
            .expect("shipped pattern table is valid")
    })
}

fn match_pattern(line: &str) -> Option<&'static ErrorPattern> {
    patterns().iter().find(|p| line.contains(&p.pattern))
}

/// Extracts error records from every log. Pure and total.
pub fn parse_errors(logs: &ExecutionLogs) -> Vec<ErrorRecord> {
    let mut records = Vec::new();
    for entry in &logs.entries {
        let mut found = scan(&entry.command, &entry.text);
        let explained = found.iter().any(|r| r.severity != Severity::Warning);
        if entry.failed() && !explained {
            let reason = if entry.timed_out {
                format!("{} timed out", entry.command)
            } else {
                match entry.exit_code {
                    Some(code) => format!("{} exited with status {code}", entry.command),
                    None => format!("{} was terminated by a signal", entry.command),
                }
            };
            let tail = tail(&entry.text, TAIL_LINES);
            found.push(ErrorRecord {
                severity: Severity::Error,
                message: if tail.is_empty() {
                    reason
                } else {
                    format!("{reason}\n{tail}")
                },
                location: entry.command.clone(),
            });
        }
        for record in found {
            if !records.contains(&record) {
                records.push(record);
            }
        }
    }
    records
}

fn scan(command: &str, text: &str) -> Vec<ErrorRecord> {
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let Some(pattern) = match_pattern(lines[i]) else {
            i += 1;
            continue;
        };
        let header = lines[i];
        let mut body = Vec::new();
        let mut j = i + 1;
        if pattern.block {
            while j < lines.len() {
                let line = lines[j];
                let trimmed = line.trim();
                if match_pattern(line).is_some_and(|p| p.block) {
                    break;
                }
                j += 1;
                if trimmed.starts_with("FOAM exiting") || trimmed.starts_with("FOAM aborting") {
                    break;
                }
                // Warnings end at the first blank line after some content.
                if trimmed.is_empty()
                    && pattern.severity == Severity::Warning
                    && body.iter().any(|l: &&str| !l.trim().is_empty())
                {
                    break;
                }
                body.push(line);
            }
        }
        records.push(ErrorRecord {
            severity: pattern.severity,
            message: match &pattern.label {
                Some(label) => label.clone(),
                None => message(header, &pattern.pattern, &body),
            },
            location: location(command, header, &body),
        });
        i = j.max(i + 1);
    }
    records
}

fn is_source_attribution(trimmed: &str) -> bool {
    trimmed.starts_with("From ")
        || (trimmed.starts_with("in file ") && trimmed.contains(" at line"))
}

fn message(header: &str, pattern: &str, body: &[&str]) -> String {
    let mut parts = Vec::new();
    let rest = header.split_once(pattern).map(|(_, r)| r).unwrap_or("");
    let rest = rest.trim_start_matches([':', ' ']).trim();
    // `(openfoam-2406)` style build tags carry no information.
    if !rest.is_empty() && !(rest.starts_with('(') && rest.ends_with(')')) {
        parts.push(rest.to_string());
    }
    for line in body {
        let t = line.trim();
        if t.is_empty() || is_source_attribution(t) || t.starts_with("file:") {
            continue;
        }
        parts.push(t.to_string());
    }
    if parts.is_empty() {
        header.trim().to_string()
    } else {
        parts.join("\n")
    }
}

fn location(command: &str, header: &str, body: &[&str]) -> String {
    let file = std::iter::once(&header)
        .chain(body)
        .find_map(|line| attributed_path(line.trim()));
    match file {
        Some(path) => format!("{command}: {path}"),
        None => command.to_string(),
    }
}

/// A case file named by a `file:` line, `in dictionary "..."` or a quoted
/// path after `file`.
fn attributed_path(line: &str) -> Option<String> {
    if is_source_attribution(line) {
        return None;
    }
    if let Some(rest) = line.strip_prefix("file:") {
        let path = rest.trim().split(" at line").next().unwrap_or("").trim();
        let path = path.split_whitespace().next()?;
        return Some(case_relative(path.trim_matches('"')));
    }
    for marker in ["dictionary \"", "file \"", "Reading \""] {
        if let Some(start) = line.find(marker) {
            let rest = &line[start + marker.len()..];
            let path = rest.split('"').next()?;
            if !path.is_empty() {
                return Some(case_relative(path));
            }
        }
    }
    None
}

/// Cuts an absolute path down to its part below the rightmost case folder.
fn case_relative(path: &str) -> String {
    let parts: Vec<&str> = path.split('/').collect();
    match parts
        .iter()
        .rposition(|p| matches!(*p, "system" | "constant" | "0"))
    {
        Some(i) => parts[i..].join("/"),
        None => path.to_string(),
    }
}

fn tail(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}
