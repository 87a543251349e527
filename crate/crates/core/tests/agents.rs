mod common;

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use foamflow::agents::hpc::check_slurm;
use foamflow::agents::{
    parse_errors, parse_sbatch, render_error_logs, render_slurm_template, review, run_case,
    submit_and_monitor, validate_allrun, AgentError, ExecutionLogs, FakeExecutor, FakeOutcome,
    FakeProgram, FakeScheduler, HistoryEntry, HpcConfig, JobState, LogEntry, RunStatus, Severity,
};
use foamflow::case::{CaseFile, CaseMetadata, CaseState, ConfigPatch, PatchProvenance};
use foamflow::llm::provider::{ChatRequest, ScriptedProvider};
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
struct CapturedLog {
    file: String,
    command: String,
    exit_code: Option<i32>,
    #[serde(default)]
    timed_out: bool,
    expected: Vec<(Severity, String)>,
}

fn log_dir() -> std::path::PathBuf {
    common::manifest_dir().join("tests/fixtures/logs")
}

fn captured_logs() -> Vec<(CapturedLog, ExecutionLogs)> {
    let manifest =
        std::fs::read_to_string(log_dir().join("manifest.json")).expect("manifest reads");
    let cases: Vec<CapturedLog> = serde_json::from_str(&manifest).expect("manifest parses");
    cases
        .into_iter()
        .map(|case| {
            let text = std::fs::read_to_string(log_dir().join(&case.file)).expect("log reads");
            let logs = ExecutionLogs {
                entries: vec![LogEntry {
                    command: case.command.clone(),
                    log_file: format!("log.{}", case.command),
                    text,
                    exit_code: case.exit_code,
                    timed_out: case.timed_out,
                }],
                wall_time_ms: 0,
            };
            (case, logs)
        })
        .collect()
}

#[test]
fn captured_logs_map_to_expected_records() {
    let corpus = captured_logs();
    assert!(corpus.len() >= 10);
    for (case, logs) in corpus {
        let records = parse_errors(&logs);
        let got: Vec<(Severity, &str)> = records
            .iter()
            .map(|r| (r.severity, r.location.as_str()))
            .collect();
        assert_eq!(records.len(), case.expected.len(), "{}: {got:?}", case.file);
        for ((severity, location), record) in case.expected.iter().zip(&records) {
            assert_eq!(*severity, record.severity, "{}: {got:?}", case.file);
            assert!(
                record.location.contains(location.as_str()),
                "{}: {got:?}",
                case.file
            );
            assert!(!record.message.trim().is_empty(), "{}", case.file);
        }
    }
}

#[test]
fn parsing_is_repeatable_over_the_corpus() {
    for (case, logs) in captured_logs() {
        assert_eq!(parse_errors(&logs), parse_errors(&logs), "{}", case.file);
    }
}

#[test]
fn merged_logs_keep_every_record_once() {
    let corpus = captured_logs();
    let mut merged = ExecutionLogs::default();
    let mut expected = Vec::new();
    for (_, logs) in &corpus {
        for record in parse_errors(logs) {
            if !expected.contains(&record) {
                expected.push(record);
            }
        }
        merged.entries.extend(logs.entries.clone());
    }
    assert_eq!(parse_errors(&merged), expected);
}

const FRAGMENTS: [&str; 10] = [
    "--> FOAM FATAL IO ERROR:",
    "--> FOAM FATAL ERROR:",
    "--> FOAM Warning :",
    "file: /run/case/system/fvSchemes at line 3.",
    "keyword x is undefined in dictionary \"/run/case/constant/g\"",
    "    From function f()",
    "FOAM exiting",
    "#1  Foam::sigFpe::sigHandler(int) at ??:?",
    "Segmentation fault (core dumped)",
    "",
];

fn log_text() -> impl Strategy<Value = String> {
    let line = prop_oneof![
        (0..FRAGMENTS.len()).prop_map(|i| FRAGMENTS[i].to_string()),
        "\\PC{0,40}",
    ];
    prop::collection::vec(line, 0..30).prop_map(|lines| lines.join("\n"))
}

fn entry() -> impl Strategy<Value = LogEntry> {
    (
        prop_oneof![Just("icoFoam"), Just("blockMesh"), Just("simpleFoam")],
        log_text(),
        prop::option::of(-2..140i32),
        any::<bool>(),
    )
        .prop_map(|(command, text, exit_code, timed_out)| LogEntry {
            command: command.to_string(),
            log_file: format!("log.{command}"),
            text,
            exit_code,
            timed_out,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn error_parsing_is_total_and_deterministic(entries in prop::collection::vec(entry(), 0..4)) {
        let logs = ExecutionLogs { entries, wall_time_ms: 0 };
        let first = parse_errors(&logs);
        prop_assert_eq!(&first, &parse_errors(&logs));
        for (i, a) in first.iter().enumerate() {
            prop_assert!(!first[i + 1..].contains(a));
        }
        // Every failed command is explained by at least one non-warning record.
        for e in logs.entries.iter().filter(|e| e.failed()) {
            let single = ExecutionLogs { entries: vec![e.clone()], wall_time_ms: 0 };
            prop_assert!(parse_errors(&single).iter().any(|r| r.severity != Severity::Warning));
        }
    }
}

#[test]
fn allrun_whitelist_rejects_destructive_lines() {
    let check = validate_allrun("#!/bin/sh\nblockMesh\nrm -rf /\nicoFoam\n", "icoFoam");
    assert!(!check.is_ok());
    assert_eq!(check.violations.len(), 1);
    assert_eq!(check.violations[0].0, "line 3");
    assert!(validate_allrun(
        "#!/bin/sh\ncd \"${0%/*}\" || exit 1\nblockMesh\nicoFoam\n",
        "icoFoam"
    )
    .is_ok());
}

fn scratch_case(dir: &Path, allrun: &str) -> CaseState {
    let mut state = CaseState::new("case", dir);
    state
        .put(CaseFile::from_text("Allrun", allrun).unwrap())
        .unwrap();
    state
}

#[test]
fn run_case_stops_at_first_failure_and_clears_stale_logs() {
    let dir = tempfile::tempdir().unwrap();
    let state = scratch_case(dir.path(), "#!/bin/sh\nblockMesh\nicoFoam\n");
    std::fs::write(dir.path().join("log.icoFoam"), "End\n").unwrap();
    let executor = FakeExecutor::new().program(
        "blockMesh",
        FakeProgram::sequence(vec![FakeOutcome::fail(1, "cannot open\n")]),
    );
    let services = common::scripted_services(Arc::new(FakeExecutor::new()));
    let (logs, status) = run_case(&state, &executor, &services.gateway, None).unwrap();
    assert_eq!(status, RunStatus::Failure);
    assert_eq!(logs.entries.len(), 1);
    assert_eq!(executor.call_count("icoFoam"), 0);
    assert!(!dir.path().join("log.icoFoam").exists());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("log.blockMesh")).unwrap(),
        "cannot open\n"
    );
}

#[test]
fn fatal_record_fails_a_zero_exit_run() {
    let dir = tempfile::tempdir().unwrap();
    let state = scratch_case(dir.path(), "#!/bin/sh\nicoFoam\n");
    let executor = FakeExecutor::new().program(
        "icoFoam",
        FakeProgram::sequence(vec![FakeOutcome::ok(common::FVSCHEMES_FATAL_LOG)]),
    );
    let services = common::scripted_services(Arc::new(FakeExecutor::new()));
    let (_, status) = run_case(&state, &executor, &services.gateway, None).unwrap();
    assert_eq!(status, RunStatus::Failure);
}

fn golden_slurm() -> String {
    std::fs::read_to_string(common::manifest_dir().join("tests/fixtures/slurm/submit.slurm"))
        .unwrap()
}

fn reference_hpc() -> HpcConfig {
    HpcConfig {
        account: "xxxx".into(),
        ntasks: 32,
        workdir: "./runshpcnode".into(),
        ..HpcConfig::default()
    }
}

#[test]
fn slurm_template_matches_golden_script() {
    let cfg = reference_hpc();
    let golden = golden_slurm();
    assert_eq!(render_slurm_template(&cfg), golden);
    let parsed = parse_sbatch(&golden).unwrap();
    let options: Vec<(&str, Option<&str>)> = parsed
        .directives
        .iter()
        .map(|d| (d.option.as_str(), d.value.as_deref()))
        .collect();
    assert_eq!(
        options,
        vec![
            ("account", Some("xxxx")),
            ("constraint", Some("cpu")),
            ("qos", Some("regular")),
            ("nodes", Some("1")),
            ("ntasks", Some("32")),
            ("ntasks-per-node", Some("32")),
            ("time", Some("02:00:00")),
            ("mem", Some("128GB")),
            ("job-name", Some("Sim")),
            ("output", Some("%j.out")),
            ("error", Some("%j.err")),
        ]
    );
    assert!(parsed.commands.iter().any(|c| c == "./Allrun -parallel"));
    assert!(check_slurm(&golden, &cfg).is_empty());
}

#[test]
fn sbatch_grammar_rejects_late_and_unknown_directives() {
    let late = "#!/bin/bash\n#SBATCH -A xxxx\nset -e\n#SBATCH -n 4\n./Allrun -parallel\n";
    assert!(parse_sbatch(late).is_err());
    assert!(parse_sbatch("#!/bin/bash\n#SBATCH --frobnicate=1\n").is_err());
    assert!(parse_sbatch("#SBATCH -A xxxx\n").is_err());
    let wrong_count = golden_slurm().replace("-n 32", "-n 16");
    assert!(!check_slurm(&wrong_count, &reference_hpc()).is_empty());
}

fn slurm_case(dir: &Path) -> CaseState {
    let mut state = CaseState::new("case", dir);
    state
        .put(CaseFile::from_text("submit.slurm", golden_slurm()).unwrap())
        .unwrap();
    state
}

#[test]
fn scheduler_job_succeeds_after_three_polls() {
    let dir = tempfile::tempdir().unwrap();
    let state = slurm_case(dir.path());
    let client = FakeScheduler::new(
        "123",
        vec![JobState::Pending, JobState::Pending, JobState::Completed],
    );
    let (job, status, logs) =
        submit_and_monitor(&state, &client, Duration::ZERO, Duration::from_secs(5)).unwrap();
    assert_eq!(job, "123");
    assert_eq!(status, RunStatus::Success);
    assert_eq!(client.polls(), 3);
    assert_eq!(client.submitted(), vec!["submit.slurm".to_string()]);
    assert!(logs.all_succeeded());
}

#[test]
fn scheduler_rejection_surfaces_as_submit_failure() {
    let dir = tempfile::tempdir().unwrap();
    let state = slurm_case(dir.path());
    let mut client = FakeScheduler::new("123", vec![JobState::Completed]);
    client.submit_error = Some("Invalid account".into());
    let err =
        submit_and_monitor(&state, &client, Duration::ZERO, Duration::from_secs(5)).unwrap_err();
    assert!(matches!(err, AgentError::SubmitFailure(ref why) if why == "Invalid account"));
    assert_eq!(client.polls(), 0);
}

#[test]
fn failed_job_with_fatal_log_is_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let state = slurm_case(dir.path());
    let mut client = FakeScheduler::new(
        "77",
        vec![JobState::Running, JobState::Failed("NODE_FAIL".into())],
    );
    client.logs = vec![LogEntry {
        command: "icoFoam".into(),
        log_file: "log.icoFoam".into(),
        text: common::FVSCHEMES_FATAL_LOG.into(),
        exit_code: Some(1),
        timed_out: false,
    }];
    let (_, status, logs) =
        submit_and_monitor(&state, &client, Duration::ZERO, Duration::from_secs(5)).unwrap();
    assert_eq!(status, RunStatus::Failure);
    let records = parse_errors(&logs);
    assert!(records
        .iter()
        .any(|r| r.location.contains("system/fvSchemes")));
}

fn cavity_meta() -> CaseMetadata {
    CaseMetadata {
        case_name: "cavity".into(),
        case_domain: "incompressible".into(),
        case_category: "cavity".into(),
        case_solver: "icoFoam".into(),
    }
}

fn reviewer_services(
    correction: serde_json::Value,
    seen: Arc<Mutex<Vec<ChatRequest>>>,
) -> foamflow::agents::Services {
    let provider = ScriptedProvider::new(move |req: &ChatRequest| {
        seen.lock().unwrap().push(req.clone());
        Ok(match req.template_id.as_str() {
            "file_correction" => correction.to_string(),
            _ => common::ANALYSIS.to_string(),
        })
    });
    common::services_with(Arc::new(provider), Arc::new(FakeExecutor::new()))
}

fn fvschemes_errors() -> Vec<foamflow::agents::ErrorRecord> {
    let logs = ExecutionLogs {
        entries: vec![LogEntry {
            command: "icoFoam".into(),
            log_file: "log.icoFoam".into(),
            text: common::FVSCHEMES_FATAL_LOG.into(),
            exit_code: Some(1),
            timed_out: false,
        }],
        wall_time_ms: 0,
    };
    parse_errors(&logs)
}

#[test]
fn reviewer_drops_unsafe_paths() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = CaseState::new("case", dir.path());
    state
        .put(CaseFile::from_text("system/fvSchemes", common::faulty_fvschemes()).unwrap())
        .unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let correction = serde_json::json!({"list_foamfile": [
        {"file_name": "passwd", "folder_name": "../../etc", "content": "root::0:0::/:/bin/sh\n"},
        {"file_name": "fvSchemes", "folder_name": "system", "content": "ddtSchemes { default Euler; }\n"},
        {"file_name": "fvSchemes", "folder_name": "system", "content": "ddtSchemes { default steadyState; }\n"},
    ]});
    let services = reviewer_services(correction, seen.clone());
    let errors = fvschemes_errors();
    let outcome = review(
        &errors,
        &state,
        &[],
        common::CAVITY_PROMPT,
        &cavity_meta(),
        &services.retriever,
        &services.gateway,
    )
    .unwrap();
    let paths: Vec<&str> = outcome.patch.paths().collect();
    assert_eq!(paths, vec!["system/fvSchemes"]);
    assert_eq!(outcome.dropped.len(), 2);
    assert!(outcome
        .dropped
        .iter()
        .any(|(p, _)| p.contains("etc/passwd")));
    assert_eq!(outcome.analysis, common::ANALYSIS);
    let templates: Vec<String> = seen
        .lock()
        .unwrap()
        .iter()
        .map(|r| r.template_id.clone())
        .collect();
    assert_eq!(templates, vec!["error_analysis_initial", "file_correction"]);
}

#[test]
fn reviewer_sends_history_on_later_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = CaseState::new("case", dir.path());
    state
        .put(CaseFile::from_text("system/fvSchemes", common::faulty_fvschemes()).unwrap())
        .unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let correction = serde_json::json!({"list_foamfile": []});
    let services = reviewer_services(correction, seen.clone());
    let errors = fvschemes_errors();
    let history = vec![HistoryEntry {
        iteration: 1,
        state_generation: 0,
        errors: errors.clone(),
        patch: ConfigPatch::new(PatchProvenance::Reviewer),
        review_text: "first diagnosis of the divergence scheme".into(),
    }];
    let err = review(
        &errors,
        &state,
        &history,
        common::CAVITY_PROMPT,
        &cavity_meta(),
        &services.retriever,
        &services.gateway,
    )
    .unwrap_err();
    assert!(matches!(err, AgentError::EmptyPatch { .. }));
    let requests = seen.lock().unwrap();
    assert_eq!(requests[0].template_id, "error_analysis_subsequent");
    let prompt = format!("{}\n{}", requests[0].system, requests[0].user);
    assert!(prompt.contains("first diagnosis of the divergence scheme"));
    assert!(prompt.contains(&render_error_logs(&errors)));
}

#[test]
fn reviewer_requires_errors() {
    let dir = tempfile::tempdir().unwrap();
    let state = CaseState::new("case", dir.path());
    let services = common::scripted_services(Arc::new(FakeExecutor::new()));
    let err = review(
        &[],
        &state,
        &[],
        "x",
        &cavity_meta(),
        &services.retriever,
        &services.gateway,
    )
    .unwrap_err();
    assert!(matches!(err, AgentError::Precondition(_)));
}
