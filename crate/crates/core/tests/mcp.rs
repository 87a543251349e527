mod common;

use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use foamflow::agents::{FakeExecutor, FakeOutcome, FakeProgram, FakeScheduler, JobState, Services};
use foamflow::case::parse_dictionary;
use foamflow::mcp::schema::check;
use foamflow::mcp::{
    bind_socket, handle_message, serve_socket, JobStatus, McpError, McpService, ServiceConfig,
    INVALID_PARAMS, UNKNOWN_CASE, UNKNOWN_FUNCTION, UNKNOWN_JOB,
};
use foamflow::orchestrator::OrchestratorConfig;
use serde_json::{json, Value};

const WAIT: Duration = Duration::from_secs(20);

fn config(dir: &Path) -> ServiceConfig {
    ServiceConfig {
        data_dir: dir.to_path_buf(),
        workers: 2,
        orchestrator: OrchestratorConfig {
            poll_interval_ms: 1,
            ..OrchestratorConfig::default()
        },
    }
}

fn start(dir: &Path, executor: FakeExecutor) -> McpService {
    let mut services: Services = common::scripted_services(Arc::new(executor));
    services.scheduler = Some(Arc::new(FakeScheduler::new(
        "123",
        vec![JobState::Pending, JobState::Completed],
    )));
    McpService::start(config(dir), services).expect("service starts")
}

fn golden() -> Vec<Value> {
    let text =
        std::fs::read_to_string(common::manifest_dir().join("tests/fixtures/mcp/manifest.json"))
            .unwrap();
    serde_json::from_str(&text).unwrap()
}

fn golden_tool(name: &str) -> Value {
    golden()
        .into_iter()
        .find(|t| t["name"] == name)
        .expect("tool is in the manifest")
}

/// Calls a tool and checks the result against the checked-in output schema.
fn call(service: &McpService, name: &str, args: Value) -> Value {
    let out = service
        .dispatch(name, &args)
        .unwrap_or_else(|e| panic!("{name} failed: {e}"));
    assert_eq!(
        check(&golden_tool(name)["outputSchema"], &out),
        Ok(()),
        "{name}: {out}"
    );
    out
}

fn rpc(service: &McpService, id: u64, method: &str, params: Value) -> Value {
    let line = json!({"jsonrpc": "2.0", "id": id, "method": method, "params": params}).to_string();
    serde_json::from_str(&handle_message(service, &line).expect("requests are answered")).unwrap()
}

fn finish(service: &McpService, job: &Value) -> foamflow::mcp::JobRecord {
    let record = service
        .wait_for_job(job["job_id"].as_str().unwrap(), WAIT)
        .unwrap();
    assert!(record.status.is_terminal(), "{record:?}");
    record
}

#[test]
fn tool_list_matches_golden_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let service = start(dir.path(), FakeExecutor::new());
    let init = rpc(
        &service,
        1,
        "initialize",
        json!({"protocolVersion": "2024-11-05", "capabilities": {}}),
    );
    assert_eq!(init["result"]["serverInfo"]["name"], "foamflow");
    assert!(handle_message(
        &service,
        r#"{"jsonrpc":"2.0","method":"notifications/initialized"}"#
    )
    .is_none());
    let listed = rpc(&service, 2, "tools/list", json!({}))["result"]["tools"].clone();
    let expected: Vec<Value> = golden()
        .into_iter()
        .map(|mut t| {
            t.as_object_mut().unwrap().remove("mode");
            t
        })
        .collect();
    assert_eq!(listed, Value::Array(expected));

    let table = [
        ("create_case", vec!["user_prompt"], "case_id"),
        ("plan_simulation_structure", vec!["case_id"], "plan"),
        (
            "generate_file_content",
            vec!["case_id", "file", "folder"],
            "content",
        ),
        ("generate_mesh", vec!["case_id", "mesh_config"], "job_id"),
        (
            "generate_hpc_script",
            vec!["case_id", "hpc_config"],
            "script_content",
        ),
        ("run_simulation", vec!["case_id", "environment"], "job_id"),
        ("check_job_status", vec!["job_id"], "status"),
        ("get_simulation_logs", vec!["case_id", "job_id"], "logs"),
        (
            "review_and_suggest_fix",
            vec!["case_id", "logs"],
            "suggestions",
        ),
        ("apply_fix", vec!["case_id", "modifications"], "status"),
        (
            "generate_visualization",
            vec!["case_id", "quantity"],
            "job_id",
        ),
    ];
    let tools = listed.as_array().unwrap();
    assert_eq!(tools.len(), table.len());
    for (tool, (name, inputs, output)) in tools.iter().zip(table) {
        assert_eq!(tool["name"], name);
        assert_eq!(tool["inputSchema"]["required"], json!(inputs), "{name}");
        assert_eq!(tool["outputSchema"]["required"], json!([output]), "{name}");
    }
    let modes: Vec<String> = golden()
        .iter()
        .filter(|t| t["mode"] == "async")
        .map(|t| t["name"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(
        modes,
        ["generate_mesh", "run_simulation", "generate_visualization"]
    );
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    common::tree_snapshot(root, &[])
}

#[test]
fn malformed_arguments_are_rejected_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let service = start(dir.path(), FakeExecutor::new());
    let case_id = call(
        &service,
        "create_case",
        json!({"user_prompt": common::CAVITY_PROMPT}),
    )["case_id"]
        .as_str()
        .unwrap()
        .to_string();
    let c = case_id.as_str();
    let malformed: Vec<(&str, Value)> = vec![
        ("create_case", json!({})),
        ("create_case", json!({"user_prompt": 7})),
        ("create_case", json!({"user_prompt": "  "})),
        ("create_case", json!({"user_prompt": "x", "extra": true})),
        ("plan_simulation_structure", json!({})),
        ("plan_simulation_structure", json!({"case_id": ["x"]})),
        (
            "generate_file_content",
            json!({"case_id": c, "file": "controlDict"}),
        ),
        (
            "generate_file_content",
            json!({"case_id": c, "file": "passwd", "folder": "../../etc"}),
        ),
        (
            "generate_file_content",
            json!({"case_id": c, "file": "log.icoFoam", "folder": ""}),
        ),
        (
            "generate_mesh",
            json!({"case_id": c, "mesh_config": {"strategy": "voxels"}}),
        ),
        (
            "generate_mesh",
            json!({"case_id": c, "mesh_config": {"strategy": "external", "external_path": "/nope.msh"}}),
        ),
        ("generate_mesh", json!({"case_id": c})),
        (
            "generate_hpc_script",
            json!({"case_id": c, "hpc_config": {}}),
        ),
        (
            "generate_hpc_script",
            json!({"case_id": c, "hpc_config": {"account": "a", "walltime": "2 hours"}}),
        ),
        (
            "generate_hpc_script",
            json!({"case_id": c, "hpc_config": {"account": "a", "nodes": 1, "ntasks": 8, "ntasks_per_node": 4}}),
        ),
        (
            "run_simulation",
            json!({"case_id": c, "environment": "cloud"}),
        ),
        ("run_simulation", json!({"case_id": c})),
        ("check_job_status", json!({"job_id": 12})),
        ("get_simulation_logs", json!({"case_id": c})),
        ("review_and_suggest_fix", json!({"case_id": c, "logs": 42})),
        (
            "review_and_suggest_fix",
            json!({"case_id": c, "logs": {"entries": [{"text": "x"}]}}),
        ),
        ("apply_fix", json!({"case_id": c, "modifications": []})),
        (
            "apply_fix",
            json!({"case_id": c, "modifications": [{"file": "passwd", "folder": "../../etc", "content": "x"}]}),
        ),
        (
            "apply_fix",
            json!({"case_id": c, "modifications": [
            {"file": "U", "folder": "0", "content": "a"}, {"file": "U", "folder": "0", "content": "b"}]}),
        ),
        (
            "apply_fix",
            json!({"case_id": c, "modifications": [{"file": "U", "content": "a"}]}),
        ),
        ("generate_visualization", json!({"case_id": c})),
        (
            "generate_visualization",
            json!({"case_id": c, "quantity": "U", "toolchain": "matplotlib"}),
        ),
    ];
    let covered: std::collections::BTreeSet<&str> = malformed.iter().map(|(n, _)| *n).collect();
    assert_eq!(covered.len(), 11);
    let before = tree(dir.path());
    for (i, (name, args)) in malformed.into_iter().enumerate() {
        let reply = rpc(
            &service,
            i as u64,
            "tools/call",
            json!({"name": name, "arguments": args}),
        );
        assert_eq!(reply["error"]["code"], INVALID_PARAMS, "{name}: {reply}");
        assert!(
            reply["error"]["data"]["failures"]
                .as_array()
                .is_some_and(|f| !f.is_empty()),
            "{name}"
        );
    }
    assert_eq!(tree(dir.path()), before);
    assert!(!dir.path().join("etc").exists());
}

#[test]
fn unknown_ids_map_to_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let service = start(dir.path(), FakeExecutor::new());
    let job = rpc(
        &service,
        1,
        "tools/call",
        json!({"name": "check_job_status", "arguments": {"job_id": "nope"}}),
    );
    assert_eq!(job["error"]["code"], UNKNOWN_JOB);
    let case = rpc(
        &service,
        2,
        "tools/call",
        json!({"name": "plan_simulation_structure", "arguments": {"case_id": "nope"}}),
    );
    assert_eq!(case["error"]["code"], UNKNOWN_CASE);
    let queued = rpc(
        &service,
        3,
        "tools/call",
        json!({"name": "run_simulation", "arguments": {"case_id": "nope", "environment": "local"}}),
    );
    assert_eq!(queued["error"]["code"], UNKNOWN_CASE);
    let function = rpc(
        &service,
        4,
        "tools/call",
        json!({"name": "delete_case", "arguments": {}}),
    );
    assert_eq!(function["error"]["code"], UNKNOWN_FUNCTION);
    let method = rpc(&service, 5, "resources/list", json!({}));
    assert_eq!(method["error"]["code"], UNKNOWN_FUNCTION);
    let garbage: Value =
        serde_json::from_str(&handle_message(&service, "{not json").unwrap()).unwrap();
    assert_eq!(garbage["error"]["code"], -32700);
    assert!(service.case_ids().is_empty());
    assert!(service.job("nope").is_none());
}

#[test]
fn create_case_returns_an_opaque_id() {
    let dir = tempfile::tempdir().unwrap();
    let service = start(dir.path(), FakeExecutor::new());
    let a = call(
        &service,
        "create_case",
        json!({"user_prompt": "lid-driven cavity"}),
    );
    let b = call(
        &service,
        "create_case",
        json!({"user_prompt": "lid-driven cavity"}),
    );
    assert_ne!(a["case_id"], b["case_id"]);
    assert!(service
        .case_root(a["case_id"].as_str().unwrap())
        .join(".foamflow/state")
        .is_file());
}

#[test]
fn gmsh_to_hpc_sequence_completes_against_fakes() {
    let dir = tempfile::tempdir().unwrap();
    let service = start(
        dir.path(),
        common::with_script_outputs(common::happy_executor()),
    );
    let prompt = format!(
        "{} Visualize the velocity field.",
        common::CAVITY_GMSH_PROMPT
    );
    let case = call(&service, "create_case", json!({"user_prompt": prompt}));
    let c = case["case_id"].as_str().unwrap();

    let mesh = call(
        &service,
        "generate_mesh",
        json!({"case_id": c, "mesh_config": {"strategy": "gmsh"}}),
    );
    let mesh = finish(&service, &mesh);
    assert_eq!(mesh.status, JobStatus::Succeeded, "{mesh:?}");
    assert!(
        mesh.outputs.iter().any(|f| f.ends_with(".py")),
        "{:?}",
        mesh.outputs
    );

    for (folder, file) in [
        ("0", "U"),
        ("0", "p"),
        ("constant", "transportProperties"),
        ("system", "controlDict"),
        ("system", "fvSchemes"),
        ("system", "fvSolution"),
        ("system", "decomposeParDict"),
    ] {
        let out = call(
            &service,
            "generate_file_content",
            json!({"case_id": c, "file": file, "folder": folder}),
        );
        let content = out["content"].as_str().unwrap();
        assert!(
            parse_dictionary(content).is_ok(),
            "{folder}/{file} does not parse"
        );
    }

    let script = call(
        &service,
        "generate_hpc_script",
        json!({"case_id": c, "hpc_config": {"account": "xxxx", "workdir": "./runshpcnode"}}),
    );
    let script = script["script_content"].as_str().unwrap();
    assert!(script.contains("#SBATCH -n 32"), "{script}");
    assert!(script.contains("./Allrun -parallel"));

    let run = call(
        &service,
        "run_simulation",
        json!({"case_id": c, "environment": "hpc"}),
    );
    let run = finish(&service, &run);
    assert_eq!(run.status, JobStatus::Succeeded, "{run:?}");
    let status = call(&service, "check_job_status", json!({"job_id": run.job_id}));
    assert_eq!(status["status"]["status"], "succeeded");
    assert_eq!(status["status"]["kind"], "simulation");
    let allrun = std::fs::read_to_string(service.case_root(c).join("Allrun")).unwrap();
    assert!(allrun.contains("gmshToFoam"), "{allrun}");

    let viz = call(
        &service,
        "generate_visualization",
        json!({"case_id": c, "quantity": "U", "plane": "x-y"}),
    );
    let viz = finish(&service, &viz);
    assert_eq!(viz.status, JobStatus::Succeeded, "{viz:?}");
    assert_eq!(viz.outputs, vec!["viz/U.png".to_string()]);
    assert!(service.case_root(c).join("viz/U.png").is_file());
}

#[test]
fn failed_run_is_reviewed_fixed_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let service = start(dir.path(), common::fvschemes_executor());
    let case = call(
        &service,
        "create_case",
        json!({"user_prompt": common::CAVITY_PROMPT}),
    );
    let c = case["case_id"].as_str().unwrap();
    let plan = call(&service, "plan_simulation_structure", json!({"case_id": c}));
    let planned: Vec<(String, String)> = plan["plan"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| {
            (
                t["folder"].as_str().unwrap().to_string(),
                t["file"].as_str().unwrap().to_string(),
            )
        })
        .collect();
    assert!(planned.contains(&("system".into(), "fvSchemes".into())));
    let mesh = call(
        &service,
        "generate_mesh",
        json!({"case_id": c, "mesh_config": {"strategy": "native"}}),
    );
    assert_eq!(finish(&service, &mesh).status, JobStatus::Succeeded);
    for (folder, file) in &planned {
        if file != "blockMeshDict" {
            call(
                &service,
                "generate_file_content",
                json!({"case_id": c, "file": file, "folder": folder}),
            );
        }
    }

    let run = call(
        &service,
        "run_simulation",
        json!({"case_id": c, "environment": "local"}),
    );
    let failed = finish(&service, &run);
    assert_eq!(failed.status, JobStatus::Failed);
    assert!(
        failed.error.as_deref().unwrap().contains("div(phi,U)"),
        "{failed:?}"
    );
    assert_eq!(failed.logs_ref.as_deref(), Some(failed.job_id.as_str()));

    let logs = call(
        &service,
        "get_simulation_logs",
        json!({"case_id": c, "job_id": failed.job_id}),
    );
    let entries = logs["logs"]["entries"].as_array().unwrap();
    assert!(entries
        .iter()
        .any(|e| e["text"].as_str().unwrap().contains("FOAM FATAL IO ERROR")));
    assert_eq!(logs["logs"]["errors"][0]["severity"], "fatal");

    let by_ref = call(
        &service,
        "review_and_suggest_fix",
        json!({"case_id": c, "logs": failed.job_id}),
    );
    let inline = call(
        &service,
        "review_and_suggest_fix",
        json!({"case_id": c, "logs": logs["logs"].clone()}),
    );
    let suggestion = &by_ref["suggestions"];
    assert_eq!(suggestion["analysis"], common::ANALYSIS);
    assert_eq!(
        inline["suggestions"]["modifications"],
        suggestion["modifications"]
    );
    let mods = suggestion["modifications"].as_array().unwrap();
    assert_eq!(mods.len(), 1);
    assert_eq!(
        (mods[0]["folder"].as_str(), mods[0]["file"].as_str()),
        (Some("system"), Some("fvSchemes"))
    );

    let applied = call(
        &service,
        "apply_fix",
        json!({"case_id": c, "modifications": mods}),
    );
    assert_eq!(applied["status"], "applied");
    let fixed = std::fs::read_to_string(service.case_root(c).join("system/fvSchemes")).unwrap();
    assert!(fixed.contains("div(phi,U)"));

    let rerun = call(
        &service,
        "run_simulation",
        json!({"case_id": c, "environment": "local"}),
    );
    assert_eq!(finish(&service, &rerun).status, JobStatus::Succeeded);
}

#[test]
fn slow_job_is_observed_running_and_serializes_case_writes() {
    let dir = tempfile::tempdir().unwrap();
    let slow = FakeExecutor::new().program(
        "icoFoam",
        FakeProgram::sequence(vec![FakeOutcome {
            delay_ms: 400,
            ..FakeOutcome::ok("End\n")
        }]),
    );
    let service = start(dir.path(), slow);
    let case = call(
        &service,
        "create_case",
        json!({"user_prompt": common::CAVITY_PROMPT}),
    );
    let c = case["case_id"].as_str().unwrap();
    call(
        &service,
        "generate_file_content",
        json!({"case_id": c, "file": "controlDict", "folder": "system"}),
    );
    let started = std::time::Instant::now();
    let run = call(
        &service,
        "run_simulation",
        json!({"case_id": c, "environment": "local"}),
    );
    assert!(
        started.elapsed() < Duration::from_millis(300),
        "dispatch must not wait for the work"
    );
    let job_id = run["job_id"].as_str().unwrap();
    let mut seen = Vec::new();
    while seen.last() != Some(&JobStatus::Running) && started.elapsed() < WAIT {
        let s = service.job(job_id).unwrap().status;
        if seen.last() != Some(&s) {
            seen.push(s);
        }
    }
    assert_eq!(seen.last(), Some(&JobStatus::Running));
    let fix = json!({"case_id": c, "modifications": [{"file": "U", "folder": "0", "content": "// patched\n"}]});
    call(&service, "apply_fix", fix);
    // The patch waits for the run holding the case lock.
    assert_eq!(service.job(job_id).unwrap().status, JobStatus::Succeeded);
}

#[test]
fn second_server_on_the_same_store_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let first = start(dir.path(), FakeExecutor::new());
    let services = common::scripted_services(Arc::new(FakeExecutor::new()));
    let err = McpService::start(config(dir.path()), services.clone())
        .err()
        .expect("store is locked");
    assert!(matches!(err, McpError::StoreLocked(_)));
    drop(first);
    assert!(McpService::start(config(dir.path()), services).is_ok());
}

#[test]
fn cases_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let case_id = {
        let service = start(dir.path(), FakeExecutor::new());
        call(&service, "create_case", json!({"user_prompt": "cavity"}))["case_id"].clone()
    };
    let service = start(dir.path(), FakeExecutor::new());
    assert_eq!(
        service.case_ids(),
        vec![case_id.as_str().unwrap().to_string()]
    );
    let next = call(&service, "create_case", json!({"user_prompt": "cavity"}));
    assert_ne!(next["case_id"], case_id);
}

fn request(
    stream: &mut UnixStream,
    reader: &mut BufReader<UnixStream>,
    id: u64,
    method: &str,
) -> Value {
    writeln!(
        stream,
        "{}",
        json!({"jsonrpc": "2.0", "id": id, "method": method, "params": {}})
    )
    .unwrap();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    serde_json::from_str(&line).unwrap()
}

#[test]
fn socket_transport_lists_tools_and_refuses_a_second_listener() {
    let dir = tempfile::tempdir().unwrap();
    let socket = dir.path().join("mcp.sock");
    let service = Arc::new(start(&dir.path().join("data"), FakeExecutor::new()));
    let listener = bind_socket(&socket).unwrap();
    let server = Arc::clone(&service);
    std::thread::spawn(move || serve_socket(&server, listener));
    let mut stream = UnixStream::connect(&socket).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    assert_eq!(
        request(&mut stream, &mut reader, 1, "initialize")["result"]["protocolVersion"],
        "2024-11-05"
    );
    let tools = request(&mut stream, &mut reader, 2, "tools/list");
    assert_eq!(tools["result"]["tools"].as_array().unwrap().len(), 11);
    assert!(matches!(
        bind_socket(&socket),
        Err(McpError::AddressInUse(_))
    ));
}

#[test]
fn stale_socket_file_is_replaced() {
    let dir = tempfile::tempdir().unwrap();
    let socket = dir.path().join("mcp.sock");
    drop(bind_socket(&socket).unwrap());
    assert!(socket.exists());
    assert!(bind_socket(&socket).is_ok());
}
