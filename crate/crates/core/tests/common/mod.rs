//! Shared fixtures: a scripted cavity model, scripted executors and service
//! builders. Also compiled into the fixture recorder example.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use foamflow::agents::{Executor, FakeExecutor, FakeOutcome, FakeProgram, Services};
use foamflow::kb::{
    build_index, builtin_commands, command_records, hash_embedding, ingest_tutorials, KnowledgeBase,
};
use foamflow::llm::provider::{ChatProvider, ChatRequest, FixtureProvider, ScriptedProvider};
use foamflow::llm::{Gateway, LlmError, ModelConfig};
use foamflow::retrieval::{RetrievalConfig, Retriever};

pub const CAVITY_PROMPT: &str = "Do an incompressible lid driven cavity flow using icoFoam solver. \
The cavity is a square of dimension [0, 0.1] x [0, 0.1] x [0, 0.01]. Use 20 x 20 x 1 cells. \
The top wall ('movingWall') moves in the x-direction with a uniform velocity of 1 m/s. \
The 'fixedWalls' have a no-slip boundary condition (velocity equal to zero at the wall). \
The simulation runs from time 0 to 0.5 with a time step of 0.005 units, and results are output every 20 time steps. \
The viscosity (nu) is set as constant with a value of 0.01 m^2/s.";

pub const CAVITY_VIZ_PROMPT: &str =
    "Do an incompressible lid driven cavity flow using icoFoam solver. \
The top wall ('movingWall') moves in the x-direction with a uniform velocity of 1 m/s. \
The viscosity (nu) is set as constant with a value of 0.01 m^2/s. \
Visualize the magnitude of velocity ('U') along the x-y plane.";

pub const CAVITY_HPC_PROMPT: &str =
    "Do an incompressible 3D lid driven cavity flow using icoFoam solver. \
The top wall ('movingWall') moves in the x-direction with a uniform velocity of 1 m/s. \
Perform a HPC run for this case. My account is xxxx. \
Do a parallel run for this case by splitting it into 32 subdomains.";

pub const CAVITY_GMSH_PROMPT: &str = "Do an incompressible flow around a cylinder using icoFoam solver. \
Use gmsh to mesh a 2D channel of length 2 and height 0.4 with a cylinder of radius 0.05 at (0.2, 0.2).";

pub const ANALYSIS: &str =
    "The divSchemes dictionary in system/fvSchemes has default none and no entry for div(phi,U). \
Define div(phi,U) Gauss linear in divSchemes.";

/// Captured icoFoam output for a missing divergence scheme.
pub const FVSCHEMES_FATAL_LOG: &str = r#"/*---------------------------------------------------------------------------*\
  =========                 |
  \\      /  F ield         | OpenFOAM: The Open Source CFD Toolbox
   \\    /   O peration     | Website:  https://openfoam.org
    \\  /    A nd           | Version:  10
     \\/     M anipulation  |
\*---------------------------------------------------------------------------*/
Create time

Create mesh for time = 0

Reading transportProperties

Reading field p

Reading field U

Reading/calculating face flux field phi


Starting time loop

Time = 0.005

Courant Number mean: 0 max: 0


--> FOAM FATAL IO ERROR:
keyword div(phi,U) is undefined in dictionary "/home/user/run/cavity/system/fvSchemes/divSchemes"

file: /home/user/run/cavity/system/fvSchemes/divSchemes from line 30 to line 32.

    From function const Foam::entry& Foam::dictionary::lookupEntry(const Foam::word&, bool, bool) const
    in file db/dictionary/dictionary.C at line 566.

FOAM exiting

"#;

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn tutorials_dir() -> PathBuf {
    manifest_dir().join("tests/fixtures/tutorials")
}

pub fn cavity_dir() -> PathBuf {
    tutorials_dir().join("incompressible/icoFoam/cavity/cavity")
}

pub fn llm_fixture_dir() -> PathBuf {
    manifest_dir().join("tests/fixtures/llm")
}

pub fn knowledge_base() -> Arc<KnowledgeBase> {
    static KB: OnceLock<Arc<KnowledgeBase>> = OnceLock::new();
    KB.get_or_init(|| {
        let mut records = ingest_tutorials(&tutorials_dir())
            .expect("tutorial fixtures ingest")
            .records;
        records.extend(command_records(builtin_commands()));
        Arc::new(build_index(&records, &hash_embedding).expect("index builds"))
    })
    .clone()
}

pub fn services_with(provider: Arc<dyn ChatProvider>, executor: Arc<dyn Executor>) -> Services {
    Services {
        gateway: Gateway::new(provider, ModelConfig::default()),
        retriever: Retriever::new(knowledge_base(), RetrievalConfig::default()),
        executor,
        scheduler: None,
    }
}

pub fn scripted_services(executor: Arc<dyn Executor>) -> Services {
    services_with(Arc::new(ScriptedProvider::new(cavity_model)), executor)
}

/// Services replaying the checked-in transcripts.
pub fn fixture_services(executor: Arc<dyn Executor>) -> Services {
    let provider = FixtureProvider::load(&llm_fixture_dir()).expect("recorded fixtures load");
    services_with(Arc::new(provider), executor)
}

/// Every command succeeds.
pub fn happy_executor() -> FakeExecutor {
    FakeExecutor::new()
}

/// The solver fails with a fatal fvSchemes error until `div(phi,U)` is defined.
pub fn fvschemes_executor() -> FakeExecutor {
    FakeExecutor::new().program(
        "icoFoam",
        FakeProgram::sequence(vec![FakeOutcome::fail(1, FVSCHEMES_FATAL_LOG)])
            .ok_when("system/fvSchemes", "div(phi,U)"),
    )
}

/// The solver always fails with the fvSchemes error.
pub fn broken_executor() -> FakeExecutor {
    FakeExecutor::new().program(
        "icoFoam",
        FakeProgram::sequence(vec![FakeOutcome::fail(1, FVSCHEMES_FATAL_LOG)]),
    )
}

/// Plotting and geometry scripts produce their outputs.
pub fn with_script_outputs(executor: FakeExecutor) -> FakeExecutor {
    executor
        .program(
            "viz_script",
            FakeProgram::sequence(vec![FakeOutcome::ok("saved\n").creating("viz/U.png")]),
        )
        .program(
            "mesh_script",
            FakeProgram::sequence(vec![
                FakeOutcome::ok("Writing 'geometry.msh'\n").creating("geometry.msh")
            ]),
        )
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(&text[start..end])
}

fn tutorial_file(path: &str) -> String {
    std::fs::read_to_string(cavity_dir().join(path))
        .unwrap_or_else(|_| format!("// no reference for {path}\n"))
}

/// fvSchemes with the divergence scheme left out.
pub fn faulty_fvschemes() -> String {
    tutorial_file("system/fvSchemes")
        .lines()
        .filter(|l| !l.contains("div(phi,U)"))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

fn slurm_from_prompt(req: &ChatRequest) -> String {
    let directives = between(
        &req.system,
        "Required directives:\n",
        "\nPlatform documentation:",
    )
    .unwrap_or("");
    let case_dir = req
        .user
        .lines()
        .find_map(|l| l.strip_prefix("Case directory: "))
        .unwrap_or(".");
    format!(
        "```bash\n#!/bin/bash\n{directives}\n\n# Initialize error handling\nset -e\n\n# Change to case directory\ncd {case_dir} || exit 1\n\n# Create log directory if it doesn't exist\nmkdir -p logs\n\n# Run the simulation\necho \"Starting OpenFOAM simulation at $(date)\"\n./Allrun -parallel\nif [ $? -eq 0 ]; then\n    echo \"Simulation completed successfully at $(date)\"\n    exit 0\nelse\n    echo \"Simulation failed at $(date)\"\n    exit 1\nfi\n```\n"
    )
}

const DECOMPOSE_PAR_DICT: &str = "FoamFile\n{\n    format      ascii;\n    class       dictionary;\n    object      decomposeParDict;\n}\n\nnumberOfSubdomains 32;\n\nmethod          scotch;\n";

const VIZ_SCRIPT: &str = "import pyvista as pv\nreader = pv.POpenFOAMReader('case.foam')\nreader.set_active_time_value(reader.time_values[-1])\nmesh = reader.read()['internalMesh']\nplotter = pv.Plotter(off_screen=True)\nplotter.add_mesh(mesh, scalars='U')\nplotter.screenshot('viz/U.png')\n";

const GMSH_SCRIPT: &str = "import gmsh\ngmsh.initialize()\ngmsh.model.add('channel')\nchannel = gmsh.model.occ.addRectangle(0, 0, 0, 2, 0.4)\ncylinder = gmsh.model.occ.addDisk(0.2, 0.2, 0, 0.05, 0.05)\ngmsh.model.occ.cut([(2, channel)], [(2, cylinder)])\ngmsh.model.occ.synchronize()\ngmsh.model.mesh.generate(2)\ngmsh.write('geometry.msh')\ngmsh.finalize()\n";

/// A deterministic stand-in for the model that sets up the cavity case.
/// The first fvSchemes it writes lacks `div(phi,U)`; its correction adds it.
pub fn cavity_model(req: &ChatRequest) -> Result<String, LlmError> {
    let text = match req.template_id.as_str() {
        "case_description" => {
            r#"{"case_name": "cavity", "case_domain": "incompressible", "case_category": "cavity", "case_solver": "icoFoam"}"#
                .to_string()
        }
        "task_decomposition" => {
            let mut subtasks = vec![
                ("U", "0"),
                ("p", "0"),
                ("transportProperties", "constant"),
                ("controlDict", "system"),
                ("fvSchemes", "system"),
                ("fvSolution", "system"),
                ("blockMeshDict", "system"),
            ];
            if req.user.contains("subdomains") {
                subtasks.push(("decomposeParDict", "system"));
            }
            let items: Vec<String> = subtasks
                .iter()
                .map(|(f, d)| format!(r#"{{"file_name": "{f}", "folder_name": "{d}"}}"#))
                .collect();
            format!("```json\n{{\"subtasks\": [{}]}}\n```", items.join(", "))
        }
        "file_generation" => {
            let file = between(&req.system, "<file_name>", "</file_name>").unwrap_or("");
            let folder = between(&req.system, "<folder_name>", "</folder_name>").unwrap_or("");
            let path = format!("{folder}/{file}");
            match path.as_str() {
                "system/fvSchemes" => faulty_fvschemes(),
                "system/decomposeParDict" => DECOMPOSE_PAR_DICT.to_string(),
                "system/fvSolution" => format!("```cpp\n{}```\n", tutorial_file(&path)),
                _ => tutorial_file(&path),
            }
        }
        "mesh_generation" => tutorial_file("system/blockMeshDict"),
        "allrun_generation" => "```bash\n#!/bin/sh\ncd \"${0%/*}\" || exit 1\nblockMesh\nicoFoam\n```".to_string(),
        "error_analysis_initial" | "error_analysis_subsequent" => ANALYSIS.to_string(),
        "file_correction" => serde_json::json!({
            "list_foamfile": [{
                "file_name": "fvSchemes",
                "folder_name": "system",
                "content": tutorial_file("system/fvSchemes"),
            }]
        })
        .to_string(),
        "visualization" => format!("```python\n{VIZ_SCRIPT}```"),
        "gmsh_script" => format!("```python\n{GMSH_SCRIPT}```"),
        "slurm_generation" => slurm_from_prompt(req),
        "script_repair" => between(&req.user, "<script>\n", "\n</script>").unwrap_or("").to_string(),
        "output_repair" => between(&req.user, "<file>\n", "\n</file>").unwrap_or("").to_string(),
        other => return Err(LlmError::Provider(format!("the cavity model has no answer for {other}"))),
    };
    Ok(text)
}

/// Relative path and bytes of every file below `root`, sorted.
pub fn tree_snapshot(root: &Path, skip: &[&str]) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, skip: &[&str], out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for path in entries {
            let rel = path
                .strip_prefix(root)
                .unwrap()
                .to_string_lossy()
                .replace('\\', "/");
            if skip.contains(&rel.as_str()) {
                continue;
            }
            if path.is_dir() {
                walk(&path, root, skip, out);
            } else {
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, skip, &mut out);
    out
}
