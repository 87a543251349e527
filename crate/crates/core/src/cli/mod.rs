//! Command-line entry points: one-shot run, knowledge-base build and the
//! tool server.

pub mod config;

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::agents::mesh::MeshOptions;
use crate::agents::{
    ExecutionTarget, Executor, FakeExecutor, RunStatus, Services, SlurmClient, SubprocessExecutor,
    VizConfig, WorkflowRequest,
};
use crate::case::state::TRANSCRIPT_FILE;
use crate::kb::{
    build_index, builtin_commands, command_records, hash_embedding, ingest_tutorials, IndexKind,
    KnowledgeBase,
};
use crate::llm::provider::{
    ChatProvider, ChatRequest, ChatResponse, FixtureProvider, HttpProvider, API_BASE_ENV,
};
use crate::llm::transcript::{read_transcript, TranscriptRecord};
use crate::llm::{Gateway, LlmError, ModelConfig, ProviderKind};
use crate::mcp::{bind_socket, serve_socket, serve_stdio, McpError, McpService, ServiceConfig};
use crate::orchestrator::{prepare_case, report_path, run_workflow, OrchestratorConfig};
use crate::retrieval::{RetrievalConfig, Retriever};

pub use config::{CliConfig, ConfigError, EmbeddingSource, ExecutorKind, FileConfig, FlagConfig};

/// Scripted fake outcomes are read from this file in the fixture directory.
pub const FAKE_EXECUTOR_FILE: &str = "executor.json";

pub const EXIT_SUCCESS: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "foamflow",
    version,
    about = "Natural-language to OpenFOAM case workflow engine"
)]
pub struct Cli {
    /// TOML configuration file; flags and environment override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the whole workflow for one requirement.
    Run(RunArgs),
    /// Build the knowledge base from a tutorial tree.
    BuildKb(BuildKbArgs),
    /// Serve the tool functions over stdio or a unix socket.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Upper bound on run attempts.
    #[arg(long, value_name = "M")]
    pub max_iterations: Option<u32>,
    /// Stop after the first run attempt.
    #[arg(long)]
    pub no_reviewer: bool,
    /// Generate each file without its predecessors.
    #[arg(long)]
    pub no_file_dependency: bool,
    #[arg(long, value_parser = parse_target)]
    pub target: Option<ExecutionTarget>,
    /// Knowledge-base directory written by `build-kb`.
    #[arg(long, value_name = "DIR")]
    pub kb: Option<PathBuf>,
    /// Replay recorded transcripts from this directory instead of calling a model.
    #[arg(long, value_name = "DIR")]
    pub fixtures: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub executor: Option<ExecutorKind>,
    #[arg(long, value_enum)]
    pub embeddings: Option<EmbeddingSource>,
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
}

fn parse_target(s: &str) -> Result<ExecutionTarget, String> {
    s.parse()
}

impl CommonArgs {
    fn flags(&self) -> FlagConfig {
        FlagConfig {
            model: self.model.clone(),
            temperature: self.temperature,
            max_iterations: self.max_iterations,
            no_reviewer: self.no_reviewer,
            no_file_dependency: self.no_file_dependency,
            target: self.target,
            executor: self.executor,
            embeddings: self.embeddings,
            kb: self.kb.clone(),
            fixtures: self.fixtures.clone(),
            data_dir: self.data_dir.clone(),
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Read the requirement from a file.
    #[arg(long, value_name = "PATH", conflicts_with = "prompt")]
    pub prompt_file: Option<PathBuf>,
    /// Case directory name below `<data-dir>/cases`.
    #[arg(long, value_name = "NAME")]
    pub case: Option<String>,
    /// Plan and write the case without running anything.
    #[arg(long)]
    pub dry_run: bool,
    /// Append the model exchanges to this file in the replay format.
    #[arg(long, value_name = "PATH")]
    pub record: Option<PathBuf>,
    /// The simulation requirement.
    pub prompt: Option<String>,
}

#[derive(Debug, Args)]
pub struct BuildKbArgs {
    /// Tutorial tree to ingest.
    pub tutorials: PathBuf,
    /// Output directory; defaults to the configured knowledge base.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub embeddings: Option<EmbeddingSource>,
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Transport {
    #[default]
    Stdio,
    Socket,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value_t = Transport::Stdio)]
    pub transport: Transport,
    /// Socket path; defaults to `<data-dir>/foamflow.sock`.
    #[arg(long, value_name = "PATH")]
    pub socket: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("knowledge base not found at {path} ({reason}); build it with `foamflow build-kb <tutorials> --out {path}` or pass --kb DIR")]
    MissingKb { path: PathBuf, reason: String },
    #[error(
        "no model backend: set {API_BASE_ENV}, api_base in the config file, or pass --fixtures DIR"
    )]
    NoBackend,
    #[error("cannot load fixtures from {path}: {message}")]
    Fixtures { path: PathBuf, message: String },
    #[error("no simulation requirement given; pass it as an argument or with --prompt-file")]
    NoPrompt,
    #[error("the hpc target needs an account in the [hpc] section of the config file")]
    NoHpcAccount,
    #[error("tutorial directory {0} is not readable")]
    MissingTutorials(PathBuf),
    #[error("tutorial corpus at {0} contains no cases")]
    EmptyCorpus(PathBuf),
    #[error(transparent)]
    Server(McpError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => EXIT_FAILURE,
            _ => EXIT_CONFIG,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses the process arguments and runs the chosen command.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn execute(cli: Cli) -> Result<u8, CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let env = |name: &str| std::env::var(name).ok();
    match cli.command {
        Command::Run(args) => {
            let config = CliConfig::resolve(args.common.flags(), &env, file)?;
            cmd_run(&args, &config)
        }
        Command::BuildKb(args) => {
            let flags = FlagConfig {
                embeddings: args.embeddings,
                kb: args.out.clone(),
                data_dir: args.data_dir.clone(),
                ..FlagConfig::default()
            };
            let config = CliConfig::resolve(flags, &env, file)?;
            cmd_build_kb(&args.tutorials, &config)
        }
        Command::Serve(args) => {
            let config = CliConfig::resolve(args.common.flags(), &env, file)?;
            cmd_serve(&args, &config)
        }
    }
}

/// Delegates chat to the wrapped provider and embeds with the hash embedder,
/// matching a knowledge base built with `--embeddings hash`.
struct HashEmbeddings(Arc<dyn ChatProvider>);

impl ChatProvider for HashEmbeddings {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.0.chat(request)
    }

    fn name(&self) -> &'static str {
        self.0.name()
    }
}

fn provider(config: &CliConfig) -> Result<(Arc<dyn ChatProvider>, ProviderKind), CliError> {
    let (base, kind): (Arc<dyn ChatProvider>, _) = match (&config.fixtures, &config.api_base) {
        (Some(dir), _) => {
            let fixtures = FixtureProvider::load(dir).map_err(|e| CliError::Fixtures {
                path: dir.clone(),
                message: e.to_string(),
            })?;
            (Arc::new(fixtures), ProviderKind::FixtureReplay)
        }
        (None, Some(base)) => (
            Arc::new(HttpProvider::new(
                base.clone(),
                config.api_key.clone().unwrap_or_default(),
            )),
            ProviderKind::HttpOpenaiCompatible,
        ),
        (None, None) => return Err(CliError::NoBackend),
    };
    Ok(match config.embeddings {
        EmbeddingSource::Hash => (Arc::new(HashEmbeddings(base)), kind),
        EmbeddingSource::Provider => (base, kind),
    })
}

fn executor(config: &CliConfig) -> Result<Arc<dyn Executor>, CliError> {
    Ok(match config.executor {
        ExecutorKind::Real => Arc::new(SubprocessExecutor::new()),
        ExecutorKind::Fake => {
            let script = config.fixtures.as_ref().map(|d| d.join(FAKE_EXECUTOR_FILE));
            match script.filter(|p| p.is_file()) {
                Some(path) => {
                    Arc::new(FakeExecutor::load(&path).map_err(|e| CliError::Fixtures {
                        path: path.clone(),
                        message: e.to_string(),
                    })?)
                }
                None => Arc::new(FakeExecutor::new()),
            }
        }
    })
}

fn load_kb(path: &Path) -> Result<Arc<KnowledgeBase>, CliError> {
    let kb = KnowledgeBase::load(path).map_err(|e| CliError::MissingKb {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(Arc::new(kb))
}

/// Wires the model, knowledge base, executor and scheduler.
pub fn services(config: &CliConfig) -> Result<Services, CliError> {
    let kb = load_kb(&config.kb)?;
    let (provider, kind) = provider(config)?;
    let model = ModelConfig {
        provider: kind,
        model_name: config.model.clone(),
        temperature: config.temperature,
        ..ModelConfig::default()
    };
    model
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let executor = executor(config)?;
    Ok(Services {
        gateway: Gateway::new(provider, model),
        retriever: Retriever::new(kb, RetrievalConfig::default()),
        scheduler: Some(Arc::new(SlurmClient {
            executor: executor.clone(),
        })),
        executor,
    })
}

pub fn orchestrator_config(config: &CliConfig) -> OrchestratorConfig {
    let defaults = OrchestratorConfig::default();
    let mut mesh = MeshOptions::default();
    if let Some(python) = &config.toolchain.python {
        mesh.interpreter = python.clone();
    }
    let mut viz = VizConfig::default();
    if let Some(toolchain) = config.toolchain.visualization {
        viz.toolchain = toolchain;
    }
    if let Some(interpreter) = &config.toolchain.visualization_interpreter {
        viz.interpreter = Some(interpreter.clone());
    }
    OrchestratorConfig {
        max_iterations: config.max_iterations,
        enable_reviewer: config.enable_reviewer,
        enable_file_dependency: config.enable_file_dependency,
        mesh,
        viz,
        poll_interval_ms: config.poll_interval_ms,
        ..defaults
    }
}

fn request_text(args: &RunArgs) -> Result<String, CliError> {
    let text = match (&args.prompt, &args.prompt_file) {
        (Some(text), _) => text.clone(),
        (None, Some(path)) => std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.clone(),
            source: e,
        })?,
        (None, None) => return Err(CliError::NoPrompt),
    };
    if text.trim().is_empty() {
        return Err(CliError::NoPrompt);
    }
    Ok(text.trim().to_string())
}

/// A fresh directory below `<data-dir>/cases`; an existing name gets a suffix.
fn case_root(config: &CliConfig, name: Option<&str>, text: &str) -> PathBuf {
    let base = match name {
        Some(n) => n.to_string(),
        None => format!("run-{}", &crate::llm::provider::sha256_hex(text)[..8]),
    };
    let cases = config.data_dir.join("cases");
    let mut root = cases.join(&base);
    let mut n = 2;
    while root.exists() {
        root = cases.join(format!("{base}-{n}"));
        n += 1;
    }
    root
}

pub fn cmd_run(args: &RunArgs, config: &CliConfig) -> Result<u8, CliError> {
    let text = request_text(args)?;
    let mut request = WorkflowRequest::new(text.clone());
    if config.target == ExecutionTarget::Hpc {
        if config.hpc.account.trim().is_empty() {
            return Err(CliError::NoHpcAccount);
        }
        request.execution_target = ExecutionTarget::Hpc;
        request.hpc = Some(config.hpc.clone());
    }
    let services = services(config)?;
    let orchestrator = orchestrator_config(config);
    orchestrator
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let root = case_root(config, args.case.as_deref(), &text);
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "case {}", root.display());
    for (key, value) in config.summary() {
        let _ = writeln!(out, "  {key}: {value}");
    }

    let code = if args.dry_run {
        let state = prepare_case(&root, request, &orchestrator, &services).map_err(runtime)?;
        let _ = writeln!(
            out,
            "stage written: {} files (dry run, nothing executed)",
            state.files.len()
        );
        for path in state.files.keys() {
            let _ = writeln!(out, "  {path}");
        }
        EXIT_SUCCESS
    } else {
        let outcome = run_workflow(&root, request, &orchestrator, &services);
        for stage in &outcome.metrics.stages {
            let _ = writeln!(out, "stage {}: {} ms", stage.stage, stage.millis);
        }
        for entry in &outcome.history {
            let first = entry
                .errors
                .first()
                .map(|e| e.message.as_str())
                .unwrap_or("");
            let _ = writeln!(
                out,
                "iteration {}: {} error(s), patch of {} file(s): {first}",
                entry.iteration,
                entry.errors.len(),
                entry.patch.entries.len()
            );
        }
        if let Some(viz) = &outcome.visualization {
            let _ = writeln!(out, "visualization: {}", viz.path);
        }
        if let Some(e) = &outcome.visualization_error {
            let _ = writeln!(out, "visualization failed: {e}");
        }
        if let Some(e) = &outcome.error {
            let _ = writeln!(out, "error: {e}");
        }
        let _ = writeln!(out, "report:");
        let status = match outcome.status {
            RunStatus::Success => "SUCCESS",
            RunStatus::Failure => "FAILURE",
        };
        let _ = writeln!(out, "  status={status}");
        let _ = writeln!(out, "  iterations={}", outcome.metrics.iterations);
        let _ = writeln!(out, "  reviews={}", outcome.history.len());
        let _ = writeln!(out, "  tokens={}", outcome.metrics.tokens.total());
        let _ = writeln!(out, "  wall_time_ms={}", outcome.metrics.wall_time_ms);
        let _ = writeln!(out, "  file={}", report_path(&root).display());
        match outcome.status {
            RunStatus::Success => EXIT_SUCCESS,
            RunStatus::Failure => EXIT_FAILURE,
        }
    };
    if let Some(target) = &args.record {
        let n = record_transcript(&root.join(TRANSCRIPT_FILE), target).map_err(runtime)?;
        let _ = writeln!(out, "recorded {n} new exchange(s) to {}", target.display());
    }
    Ok(code)
}

/// Appends chat records not yet present in `target`, keyed by replay key.
pub fn record_transcript(source: &Path, target: &Path) -> Result<usize, LlmError> {
    let mut seen = BTreeSet::new();
    if target.is_file() {
        for record in read_transcript(target)? {
            if let TranscriptRecord::Chat(c) = record {
                seen.insert(c.replay_key);
            }
        }
    }
    let mut lines = String::new();
    let mut added = 0;
    for record in read_transcript(source)? {
        if let TranscriptRecord::Chat(c) = &record {
            if seen.insert(c.replay_key.clone()) {
                lines.push_str(
                    &serde_json::to_string(&record).expect("transcript records serialize"),
                );
                lines.push('\n');
                added += 1;
            }
        }
    }
    let io = |e: std::io::Error| LlmError::Transcript(format!("{}: {e}", target.display()));
    if let Some(dir) = target.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(target)
        .map_err(io)?;
    file.write_all(lines.as_bytes()).map_err(io)?;
    Ok(added)
}

pub fn cmd_build_kb(tutorials: &Path, config: &CliConfig) -> Result<u8, CliError> {
    if !tutorials.is_dir() {
        return Err(CliError::MissingTutorials(tutorials.to_path_buf()));
    }
    let ingested = ingest_tutorials(tutorials).map_err(runtime)?;
    if ingested.report.cases == 0 {
        return Err(CliError::EmptyCorpus(tutorials.to_path_buf()));
    }
    let mut records = ingested.records;
    records.extend(command_records(builtin_commands()));
    let kb = match config.embeddings {
        EmbeddingSource::Hash => build_index(&records, &hash_embedding).map_err(runtime)?,
        EmbeddingSource::Provider => {
            let (provider, _) = provider(config)?;
            let timeout = Duration::from_secs(120);
            build_index(&records, &|text| {
                provider
                    .embed(text, timeout)
                    .map_err(|e| crate::kb::EmbeddingError::Provider(e.to_string()))
            })
            .map_err(runtime)?
        }
    };
    kb.write(&config.kb, &ingested.report).map_err(runtime)?;
    println!("knowledge base written to {}", config.kb.display());
    println!("cases: {}", ingested.report.cases);
    for (kind, count) in kb.counts() {
        println!("{}: {count}", kind.as_str());
    }
    for warning in &ingested.report.warnings {
        eprintln!("warning: {}: {}", warning.path, warning.message);
    }
    debug_assert_eq!(kb.counts().len(), IndexKind::ALL.len());
    Ok(EXIT_SUCCESS)
}

pub fn cmd_serve(args: &ServeArgs, config: &CliConfig) -> Result<u8, CliError> {
    let services = services(config)?;
    let service_config = ServiceConfig {
        data_dir: config.data_dir.clone(),
        workers: config.workers,
        orchestrator: orchestrator_config(config),
    };
    let service = McpService::start(service_config, services).map_err(CliError::Server)?;
    match args.transport {
        Transport::Stdio => {
            eprintln!(
                "serving on stdio with data in {}",
                config.data_dir.display()
            );
            serve_stdio(&service).map_err(runtime)?;
        }
        Transport::Socket => {
            let path = args
                .socket
                .clone()
                .unwrap_or_else(|| config.data_dir.join("foamflow.sock"));
            let listener = bind_socket(&path).map_err(CliError::Server)?;
            eprintln!("listening on {}", path.display());
            serve_socket(&service, listener).map_err(runtime)?;
        }
    }
    Ok(EXIT_SUCCESS)
}
