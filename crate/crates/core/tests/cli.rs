//! The `foamflow` binary: exit codes, knowledge-base builds, replayed runs,
//! dry runs, recording and the tool server across restarts.

mod common;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Output, Stdio};
use std::time::{Duration, Instant};

use foamflow::llm::transcript::{read_transcript, TranscriptRecord};
use serde_json::{json, Value};

fn foamflow(cwd: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_foamflow"));
    cmd.current_dir(cwd)
        .env_remove("FOAMFLOW_API_BASE")
        .env_remove("FOAMFLOW_API_KEY")
        .env("RUST_LOG", "error");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn build_kb(dir: &Path) -> PathBuf {
    let out = run(foamflow(dir)
        .arg("build-kb")
        .arg(common::tutorials_dir())
        .arg("--out")
        .arg("kb"));
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    dir.join("kb")
}

/// A fixture directory with the recorded transcripts and an optional
/// scripted executor.
fn fixtures(dir: &Path, executor: Option<Value>) -> PathBuf {
    let fx = dir.join("fixtures");
    fs::create_dir_all(&fx).unwrap();
    fs::copy(
        common::llm_fixture_dir().join("cavity.jsonl"),
        fx.join("cavity.jsonl"),
    )
    .unwrap();
    if let Some(script) = executor {
        fs::write(fx.join("executor.json"), script.to_string()).unwrap();
    }
    fx
}

fn only_case(data: &Path) -> PathBuf {
    let mut cases: Vec<_> = fs::read_dir(data.join("cases"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(cases.len(), 1, "{cases:?}");
    cases.pop().unwrap()
}

fn subprocess_records(case: &Path) -> usize {
    read_transcript(&case.join("llm_transcript.log"))
        .unwrap()
        .iter()
        .filter(|r| matches!(r, TranscriptRecord::Subprocess(_)))
        .count()
}

#[test]
fn build_kb_writes_four_indices_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(foamflow(dir.path())
        .arg("build-kb")
        .arg(common::tutorials_dir())
        .arg("--out")
        .arg("kb"));
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    for kind in [
        "tutorial_structure",
        "tutorial_details",
        "execution_scripts",
        "command_documentation",
    ] {
        assert!(stdout.contains(&format!("{kind}: ")), "{stdout}");
    }
    let snapshot = |root: &Path| common::tree_snapshot(root, &[]);
    let first = snapshot(&dir.path().join("kb"));
    assert!(
        first.len() >= 4,
        "{:?}",
        first.iter().map(|(p, _)| p).collect::<Vec<_>>()
    );

    let again = run(foamflow(dir.path())
        .arg("build-kb")
        .arg(common::tutorials_dir())
        .arg("--out")
        .arg("kb"));
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(snapshot(&dir.path().join("kb")), first);
}

#[test]
fn build_kb_on_an_empty_corpus_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let out = run(foamflow(dir.path()).args(["build-kb", "empty", "--out", "kb"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("kb").exists());
    let out = run(foamflow(dir.path()).args(["build-kb", "absent", "--out", "kb"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replayed_run_succeeds_in_one_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let kb = build_kb(dir.path());
    let fx = fixtures(dir.path(), None);
    let out = run(foamflow(dir.path())
        .args(["run", "--executor", "fake", "--data-dir", "data"])
        .arg("--kb")
        .arg(&kb)
        .arg("--fixtures")
        .arg(&fx)
        .arg(common::CAVITY_PROMPT));
    let stdout = text(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}{}", text(&out.stderr));
    assert!(stdout.contains("iterations=1"), "{stdout}");
    assert!(stdout.contains("status=SUCCESS"), "{stdout}");
    for stage in ["stage plan", "stage write", "stage run 1"] {
        assert!(stdout.contains(stage), "{stdout}");
    }
}

#[test]
fn missing_knowledge_base_exits_2_with_remediation() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures(dir.path(), None);
    let out = run(foamflow(dir.path())
        .args(["run", "--executor", "fake", "--kb", "nowhere"])
        .arg("--fixtures")
        .arg(&fx)
        .arg(common::CAVITY_PROMPT));
    assert_eq!(out.status.code(), Some(2));
    let stderr = text(&out.stderr);
    assert!(stderr.contains("build-kb"), "{stderr}");
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let kb = build_kb(dir.path());
    let no_backend = run(foamflow(dir.path())
        .args(["run", "--executor", "fake"])
        .arg("--kb")
        .arg(&kb)
        .arg(common::CAVITY_PROMPT));
    assert_eq!(no_backend.status.code(), Some(2));
    assert!(text(&no_backend.stderr).contains("FOAMFLOW_API_BASE"));

    let fx = fixtures(dir.path(), None);
    let hot = run(foamflow(dir.path())
        .args(["run", "--executor", "fake", "--temperature", "5"])
        .arg("--kb")
        .arg(&kb)
        .arg("--fixtures")
        .arg(&fx)
        .arg(common::CAVITY_PROMPT));
    assert_eq!(hot.status.code(), Some(2));

    fs::write(dir.path().join("bad.toml"), "modle = \"x\"\n").unwrap();
    let bad = run(foamflow(dir.path()).args(["--config", "bad.toml", "run", "x"]));
    assert_eq!(bad.status.code(), Some(2));

    let no_prompt = run(foamflow(dir.path())
        .arg("run")
        .arg("--fixtures")
        .arg(&fx)
        .arg("--kb")
        .arg(&kb));
    assert_eq!(no_prompt.status.code(), Some(2));
}

#[test]
fn config_file_supplies_what_flags_omit() {
    let dir = tempfile::tempdir().unwrap();
    let kb = build_kb(dir.path());
    let fx = fixtures(dir.path(), None);
    let config = format!(
        "kb = {:?}\nfixtures = {:?}\nexecutor = \"fake\"\ndata_dir = \"from-file\"\nmax_iterations = 2\n",
        kb.display().to_string(),
        fx.display().to_string()
    );
    fs::write(dir.path().join("foamflow.toml"), config).unwrap();
    let out = run(foamflow(dir.path())
        .env("FOAMFLOW_API_BASE", "http://127.0.0.1:9")
        .args(["--config", "foamflow.toml", "run"])
        .arg(common::CAVITY_PROMPT));
    let stdout = text(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}{}", text(&out.stderr));
    assert!(stdout.contains("max_iterations: 2"), "{stdout}");
    only_case(&dir.path().join("from-file"));

    // A flag overrides the file.
    let out = run(foamflow(dir.path())
        .args([
            "--config",
            "foamflow.toml",
            "run",
            "--data-dir",
            "from-flag",
            "--max-iterations",
            "3",
        ])
        .arg(common::CAVITY_PROMPT));
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("max_iterations: 3"));
    only_case(&dir.path().join("from-flag"));
}

#[test]
fn no_reviewer_failure_exits_1_after_one_attempt() {
    let dir = tempfile::tempdir().unwrap();
    let kb = build_kb(dir.path());
    let fx = fixtures(
        dir.path(),
        Some(
            json!({"programs": {"icoFoam": {"outcomes": [{"exit_code": 1, "stdout": common::FVSCHEMES_FATAL_LOG}]}}}),
        ),
    );
    let out = run(foamflow(dir.path())
        .args([
            "run",
            "--executor",
            "fake",
            "--no-reviewer",
            "--data-dir",
            "data",
        ])
        .arg("--kb")
        .arg(&kb)
        .arg("--fixtures")
        .arg(&fx)
        .arg(common::CAVITY_PROMPT));
    let stdout = text(&out.stdout);
    assert_eq!(out.status.code(), Some(1), "{stdout}{}", text(&out.stderr));
    assert!(stdout.contains("status=FAILURE"), "{stdout}");
    assert!(stdout.contains("iterations=1"), "{stdout}");
    assert!(stdout.contains("reviews=0"), "{stdout}");
    assert!(!stdout.contains("stage run 2"), "{stdout}");
}

#[test]
fn dry_run_never_touches_the_executor() {
    let dir = tempfile::tempdir().unwrap();
    let kb = build_kb(dir.path());
    let fx = fixtures(dir.path(), None);
    // The real executor would fail loudly without an OpenFOAM installation.
    let out = run(foamflow(dir.path())
        .args([
            "run",
            "--executor",
            "real",
            "--dry-run",
            "--data-dir",
            "data",
        ])
        .arg("--kb")
        .arg(&kb)
        .arg("--fixtures")
        .arg(&fx)
        .arg(common::CAVITY_PROMPT));
    let stdout = text(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}{}", text(&out.stderr));
    let case = only_case(&dir.path().join("data"));
    assert!(case.join("system/controlDict").is_file());
    assert!(case.join("0/U").is_file());
    assert_eq!(subprocess_records(&case), 0);
    assert!(!case.join("log.icoFoam").exists());
}

#[test]
fn recorded_transcripts_replay_on_their_own() {
    let dir = tempfile::tempdir().unwrap();
    let kb = build_kb(dir.path());
    let fx = fixtures(dir.path(), None);
    let recorded = dir.path().join("recorded/cavity.jsonl");
    let out = run(foamflow(dir.path())
        .args(["run", "--executor", "fake", "--data-dir", "first"])
        .arg("--kb")
        .arg(&kb)
        .arg("--fixtures")
        .arg(&fx)
        .arg("--record")
        .arg(&recorded)
        .arg(common::CAVITY_PROMPT));
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let records = read_transcript(&recorded).unwrap();
    assert!(!records.is_empty());
    assert!(records
        .iter()
        .all(|r| matches!(r, TranscriptRecord::Chat(_))));

    // Recording again adds nothing new.
    let again = run(foamflow(dir.path())
        .args(["run", "--executor", "fake", "--data-dir", "second"])
        .arg("--kb")
        .arg(&kb)
        .arg("--fixtures")
        .arg(&fx)
        .arg("--record")
        .arg(&recorded)
        .arg(common::CAVITY_PROMPT));
    assert!(text(&again.stdout).contains("recorded 0 new exchange(s)"));
    assert_eq!(read_transcript(&recorded).unwrap().len(), records.len());

    let replay = run(foamflow(dir.path())
        .args(["run", "--executor", "fake", "--data-dir", "third"])
        .arg("--kb")
        .arg(&kb)
        .arg("--fixtures")
        .arg(dir.path().join("recorded"))
        .arg(common::CAVITY_PROMPT));
    assert_eq!(replay.status.code(), Some(0), "{}", text(&replay.stdout));
}

/// A stdio server with a line-oriented client.
struct Server {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    next_id: u64,
}

impl Server {
    fn start(dir: &Path, kb: &Path, fx: &Path) -> Self {
        let mut child = foamflow(dir)
            .args([
                "serve",
                "--transport",
                "stdio",
                "--executor",
                "fake",
                "--data-dir",
                "data",
            ])
            .arg("--kb")
            .arg(kb)
            .arg("--fixtures")
            .arg(fx)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("server starts");
        let stdin = child.stdin.take().unwrap();
        let stdout = BufReader::new(child.stdout.take().unwrap());
        let mut server = Self {
            child,
            stdin,
            stdout,
            next_id: 0,
        };
        let init = server.request(
            "initialize",
            json!({"protocolVersion": "2024-11-05", "capabilities": {}}),
        );
        assert_eq!(init["result"]["protocolVersion"], "2024-11-05");
        writeln!(
            server.stdin,
            "{}",
            json!({"jsonrpc": "2.0", "method": "notifications/initialized"})
        )
        .unwrap();
        server
    }

    fn request(&mut self, method: &str, params: Value) -> Value {
        self.next_id += 1;
        let message =
            json!({"jsonrpc": "2.0", "id": self.next_id, "method": method, "params": params});
        writeln!(self.stdin, "{message}").unwrap();
        self.stdin.flush().unwrap();
        let mut line = String::new();
        self.stdout.read_line(&mut line).unwrap();
        let reply: Value = serde_json::from_str(&line).unwrap_or_else(|e| panic!("{e}: {line:?}"));
        assert_eq!(reply["id"], self.next_id);
        reply
    }

    fn call(&mut self, name: &str, arguments: Value) -> Value {
        let reply = self.request("tools/call", json!({"name": name, "arguments": arguments}));
        assert!(reply.get("error").is_none(), "{name}: {reply}");
        reply["result"]["structuredContent"].clone()
    }

    fn job_status(&mut self, job_id: &str) -> Value {
        self.call("check_job_status", json!({"job_id": job_id}))["status"].clone()
    }
}

#[test]
fn stdio_server_lists_the_tool_functions() {
    let dir = tempfile::tempdir().unwrap();
    let kb = build_kb(dir.path());
    let fx = fixtures(dir.path(), None);
    let mut server = Server::start(dir.path(), &kb, &fx);
    let tools = server.request("tools/list", json!({}));
    let names: Vec<&str> = tools["result"]["tools"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["name"].as_str().unwrap())
        .collect();
    assert_eq!(names.len(), 11);
    assert!(names.contains(&"create_case") && names.contains(&"review_and_suggest_fix"));
    drop(server.stdin);
    assert!(server.child.wait().unwrap().success());
}

#[test]
fn killed_server_keeps_cases_and_fails_running_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let kb = build_kb(dir.path());
    let slow =
        json!({"programs": {"icoFoam": {"outcomes": [{"stdout": "End\n", "delay_ms": 5000}]}}});
    let fx = fixtures(dir.path(), Some(slow));

    let mut server = Server::start(dir.path(), &kb, &fx);
    let case_id = server.call("create_case", json!({"user_prompt": common::CAVITY_PROMPT}))
        ["case_id"]
        .as_str()
        .unwrap()
        .to_string();
    // A hand-written Allrun keeps the job on the slow solver.
    let allrun =
        json!([{"folder": "", "file": "Allrun", "content": "#!/bin/sh\nblockMesh\nicoFoam\n"}]);
    let fixed = server.call(
        "apply_fix",
        json!({"case_id": case_id, "modifications": allrun}),
    );
    assert_eq!(fixed["status"], "applied");
    let job_id = server.call(
        "run_simulation",
        json!({"case_id": case_id, "environment": "local"}),
    )["job_id"]
        .as_str()
        .unwrap()
        .to_string();
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let status = server.job_status(&job_id);
        if status["status"] == "running" {
            break;
        }
        assert!(Instant::now() < deadline, "job never started: {status}");
        std::thread::sleep(Duration::from_millis(20));
    }
    server.child.kill().unwrap();
    server.child.wait().unwrap();

    let mut restarted = Server::start(dir.path(), &kb, &fx);
    let status = restarted.job_status(&job_id);
    assert_eq!(status["status"], "failed", "{status}");
    assert_eq!(status["error"], "server restart");
    assert_eq!(status["case_id"], case_id.as_str());
    // The case is still addressable.
    let rerun = restarted.call(
        "run_simulation",
        json!({"case_id": case_id, "environment": "local"}),
    );
    assert_ne!(rerun["job_id"], job_id.as_str());
    drop(restarted.stdin);
    restarted.child.wait().unwrap();
}

#[test]
fn second_server_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let kb = build_kb(dir.path());
    let fx = fixtures(dir.path(), None);
    let socket = dir.path().join("ff.sock");
    let serve = |data: &str, socket: &Path| {
        let mut cmd = foamflow(dir.path());
        cmd.args([
            "serve",
            "--transport",
            "socket",
            "--executor",
            "fake",
            "--data-dir",
            data,
        ])
        .arg("--socket")
        .arg(socket)
        .arg("--kb")
        .arg(&kb)
        .arg("--fixtures")
        .arg(&fx);
        cmd
    };
    let mut first = serve("one", &socket).stderr(Stdio::null()).spawn().unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while UnixStream::connect(&socket).is_err() {
        assert!(Instant::now() < deadline, "socket never came up");
        std::thread::sleep(Duration::from_millis(20));
    }

    let same_socket = run(&mut serve("two", &socket));
    assert_eq!(
        same_socket.status.code(),
        Some(2),
        "{}",
        text(&same_socket.stderr)
    );
    assert!(text(&same_socket.stderr).contains("listening"));

    let same_store = run(&mut serve("one", &dir.path().join("other.sock")));
    assert_eq!(
        same_store.status.code(),
        Some(2),
        "{}",
        text(&same_store.stderr)
    );

    first.kill().unwrap();
    first.wait().unwrap();
}
