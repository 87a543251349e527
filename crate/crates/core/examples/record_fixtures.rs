//! Re-records the replay transcripts under `tests/fixtures/llm` by running
//! every test trajectory against the scripted cavity model.
//!
//! cargo run --example record_fixtures

#[path = "../tests/common/mod.rs"]
mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use foamflow::agents::{ExecutionTarget, FakeExecutor, HpcConfig, WorkflowRequest};
use foamflow::llm::transcript::{read_transcript, TranscriptRecord};
use foamflow::orchestrator::{prepare_case, run_workflow, OrchestratorConfig};

fn scenarios() -> Vec<(
    &'static str,
    WorkflowRequest,
    OrchestratorConfig,
    FakeExecutor,
)> {
    let m3 = OrchestratorConfig {
        max_iterations: 3,
        ..OrchestratorConfig::default()
    };
    let mut hpc = WorkflowRequest::new(common::CAVITY_HPC_PROMPT);
    hpc.execution_target = ExecutionTarget::Hpc;
    hpc.hpc = Some(HpcConfig {
        account: "xxxx".into(),
        workdir: "./runshpcnode".into(),
        ..HpcConfig::default()
    });
    vec![
        (
            "happy",
            WorkflowRequest::new(common::CAVITY_PROMPT),
            OrchestratorConfig::default(),
            common::happy_executor(),
        ),
        (
            "repair",
            WorkflowRequest::new(common::CAVITY_PROMPT),
            OrchestratorConfig::default(),
            common::fvschemes_executor(),
        ),
        (
            "exhaust",
            WorkflowRequest::new(common::CAVITY_PROMPT),
            m3,
            common::broken_executor(),
        ),
        (
            "viz",
            WorkflowRequest::new(common::CAVITY_VIZ_PROMPT),
            OrchestratorConfig::default(),
            common::with_script_outputs(common::happy_executor()),
        ),
        (
            "gmsh",
            WorkflowRequest::new(common::CAVITY_GMSH_PROMPT),
            OrchestratorConfig::default(),
            common::with_script_outputs(common::happy_executor()),
        ),
        (
            "hpc",
            hpc,
            OrchestratorConfig::default(),
            common::happy_executor(),
        ),
        (
            "no_dependency",
            WorkflowRequest::new(common::CAVITY_PROMPT),
            OrchestratorConfig {
                enable_file_dependency: false,
                ..OrchestratorConfig::default()
            },
            common::happy_executor(),
        ),
    ]
}

fn main() {
    let out_dir = common::llm_fixture_dir();
    std::fs::create_dir_all(&out_dir).expect("fixture directory");
    let work = tempfile::tempdir().expect("scratch directory");
    let mut seen = BTreeSet::new();
    let mut lines = Vec::new();
    for (name, request, config, executor) in scenarios() {
        let root = work.path().join(name);
        let mut services = common::scripted_services(Arc::new(executor));
        if name == "hpc" {
            services.scheduler = Some(Arc::new(foamflow::agents::FakeScheduler::new(
                "123",
                vec![foamflow::agents::JobState::Completed],
            )));
        }
        let status = if name == "no_dependency" {
            prepare_case(&root, request, &config, &services).map(|_| "PREPARED".to_string())
        } else {
            let outcome = run_workflow(&root, request, &config, &services);
            if let Some(e) = &outcome.error {
                eprintln!("{name}: {e}");
            }
            Ok(format!("{:?}", outcome.status))
        };
        println!(
            "{name}: {}",
            status.unwrap_or_else(|e| format!("error: {e}"))
        );
        let records = read_transcript(&root.join("llm_transcript.log")).expect("transcript reads");
        for record in records {
            if let TranscriptRecord::Chat(chat) = &record {
                if seen.insert(chat.replay_key.clone()) {
                    lines.push(serde_json::to_string(&record).expect("records serialize"));
                }
            }
        }
    }
    let path = out_dir.join("cavity.jsonl");
    std::fs::write(&path, lines.join("\n") + "\n").expect("fixture writes");
    println!("wrote {} responses to {}", lines.len(), path.display());
}
