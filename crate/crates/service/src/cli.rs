use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use ladder_core::codegen::Generator;
use ladder_core::executor::RunnerConfig;
use ladder_core::fsutil::write_atomic;
use ladder_core::gen_cache::GenCache;
use ladder_core::llm_gateway::{
    FixtureFile, Gateway, HttpBackend, HttpConfig, LlmBackend, MockBackend, RecordingBackend, RuleFile, TemplateStore,
};
use ladder_core::script::{replay, ReplayLog, Script};
use ladder_core::segment_map::{assemble, AssemblyConfig, SegmentMapFile};
use ladder_core::{session_doc, LadderError};
use serde::Serialize;

use crate::state::{AppState, Engine};

#[derive(Parser, Debug)]
#[command(name = "ladder", version, about = "Hierarchical prompt-tree code generation service")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Serve the HTTP + event-stream API.
    Serve(ServeArgs),
    /// Replay an op script against recorded fixtures and export the result.
    Replay(ReplayArgs),
    /// Replay an op script against a live or rule-driven backend, recording fixtures.
    Record(RecordArgs),
    /// Assemble a stored session document into a program and segment map.
    Export(ExportArgs),
}

/// Where completions come from. Without a flag the live backend configured by
/// LADDER_LLM_URL / LADDER_LLM_KEY / LADDER_LLM_MODEL is used.
#[derive(Args, Debug, Clone)]
pub struct BackendArgs {
    /// Directory of recorded fixture files (mock backend).
    #[arg(long, conflicts_with = "rules")]
    pub fixtures: Option<PathBuf>,
    /// Response rule file, for authoring fixtures without a live model.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

impl BackendArgs {
    pub fn backend(&self) -> Result<Arc<dyn LlmBackend>, LadderError> {
        Ok(match (&self.fixtures, &self.rules) {
            (Some(dir), _) => Arc::new(MockBackend::load_dir(dir)?),
            (None, Some(file)) => Arc::new(RuleFile::load(file)?.into_backend()),
            (None, None) => Arc::new(HttpBackend::new(HttpConfig::from_env()?)?),
        })
    }

    pub fn templates(&self) -> Result<TemplateStore, LadderError> {
        match &self.templates {
            Some(dir) => TemplateStore::with_overrides(dir),
            None => Ok(TemplateStore::builtin()),
        }
    }
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Session storage directory.
    #[arg(long, default_value = "ladder-data")]
    pub data: PathBuf,
    /// Keep a per-session generation cache.
    #[arg(long)]
    pub cache: bool,
    /// Interim-run timeout in milliseconds.
    #[arg(long, default_value_t = 30_000)]
    pub run_timeout_ms: u64,
    /// Extra environment for interim runs, as KEY=VALUE.
    #[arg(long = "run-env", value_parser = parse_env)]
    pub run_env: Vec<(String, String)>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

fn parse_env(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// Op script (`.json` may be omitted).
    pub script: PathBuf,
    /// Fixture directory.
    pub fixtures: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Generation cache file, read before and written after the replay.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RecordArgs {
    pub script: PathBuf,
    /// Directory the fixture file is written to.
    #[arg(long)]
    pub out: PathBuf,
    /// Also export the replayed session to this directory.
    #[arg(long)]
    pub export: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Stored session document.
    pub session: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// What `replay` and `record` report, also written as `replay.json`.
#[derive(Debug, Serialize)]
pub struct ReplaySummary {
    pub session_id: String,
    pub ops: usize,
    pub version: u64,
    pub backend_calls: u64,
    pub cache_entries: Option<usize>,
    pub log: ReplayLog,
}

fn resolve_script(path: &Path) -> PathBuf {
    if path.exists() {
        return path.to_path_buf();
    }
    let with_ext = path.with_extension(match path.extension() {
        Some(e) => format!("{}.json", e.to_string_lossy()),
        None => "json".into(),
    });
    if with_ext.exists() {
        with_ext
    } else {
        path.to_path_buf()
    }
}

fn run_script(script: &Script, gateway: Gateway, out: Option<&Path>) -> Result<(ReplaySummary, Option<GenCache>), LadderError> {
    let r = replay(script, Generator::new(gateway))?;
    let gw = r.session.generator().gateway();
    let cache = gw.cache_snapshot();
    let summary = ReplaySummary {
        session_id: script.session_id.clone(),
        ops: r.log.ops.len(),
        version: r.session.version(),
        backend_calls: gw.backend_calls(),
        cache_entries: cache.as_ref().map(GenCache::len),
        log: r.log,
    };
    if let Some(dir) = out {
        r.session.export(dir)?;
        let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        text.push('\n');
        write_atomic(&dir.join("replay.json"), text.as_bytes())?;
    }
    Ok((summary, cache))
}

pub fn cmd_replay(a: &ReplayArgs) -> Result<ReplaySummary, LadderError> {
    let script = Script::load(&resolve_script(&a.script))?;
    let templates = match &a.templates {
        Some(dir) => TemplateStore::with_overrides(dir)?,
        None => TemplateStore::builtin(),
    };
    let mut gw = Gateway::new(Arc::new(MockBackend::load_dir(&a.fixtures)?)).with_templates(templates);
    if let Some(path) = &a.cache {
        gw = gw.with_cache(GenCache::load_or_default(path));
    }
    let (summary, cache) = run_script(&script, gw, Some(&a.out))?;
    if let (Some(path), Some(cache)) = (&a.cache, cache) {
        cache.save(path)?;
    }
    Ok(summary)
}

pub fn cmd_record(a: &RecordArgs) -> Result<(ReplaySummary, PathBuf), LadderError> {
    let script = Script::load(&resolve_script(&a.script))?;
    let recorder = Arc::new(RecordingBackend::new(a.backend.backend()?));
    let gw = Gateway::new(recorder.clone()).with_templates(a.backend.templates()?);
    let (summary, _) = run_script(&script, gw, a.export.as_deref())?;
    let file: FixtureFile = recorder.fixture_file();
    let path = a.out.join(format!("{}.json", script.session_id));
    write_atomic(&path, file.to_json().as_bytes())?;
    Ok((summary, path))
}

pub fn cmd_export(a: &ExportArgs) -> Result<(), LadderError> {
    let tree = session_doc::deserialize(&std::fs::read_to_string(&a.session)?)?;
    let doc = assemble(&tree, &AssemblyConfig::default())?;
    write_atomic(&a.out.join("program.py"), doc.text.as_bytes())?;
    let map = SegmentMapFile::from_document(tree.session_id(), &doc);
    write_atomic(&a.out.join("program.map.json"), map.to_json().as_bytes())?;
    Ok(())
}

pub fn engine(a: &ServeArgs) -> Result<Engine, LadderError> {
    let mut engine = Engine::new(a.backend.backend()?);
    engine.templates = a.backend.templates()?;
    engine.cache = a.cache;
    engine.runner = RunnerConfig {
        timeout: Duration::from_millis(a.run_timeout_ms),
        env: a.run_env.iter().cloned().collect(),
        ..RunnerConfig::default()
    };
    Ok(engine)
}

pub async fn cmd_serve(a: &ServeArgs) -> Result<(), Box<dyn std::error::Error>> {
    let state = Arc::new(AppState::open(engine(a)?, a.data.clone())?);
    let listener = tokio::net::TcpListener::bind(a.addr).await?;
    println!("listening on {}", listener.local_addr()?);
    crate::serve(listener, state).await?;
    Ok(())
}

fn fail(e: &LadderError) -> std::process::ExitCode {
    eprintln!("error[{}]: {e}", e.code());
    std::process::ExitCode::FAILURE
}

pub fn main() -> std::process::ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Serve(a) => {
            let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
            if let Err(e) = rt.block_on(cmd_serve(&a)) {
                eprintln!("error: {e}");
                return std::process::ExitCode::FAILURE;
            }
        }
        Command::Replay(a) => match cmd_replay(&a) {
            Ok(s) => println!(
                "replayed {} ops of `{}`: version {}, {} backend calls -> {}",
                s.ops,
                s.session_id,
                s.version,
                s.backend_calls,
                a.out.display()
            ),
            Err(e) => return fail(&e),
        },
        Command::Record(a) => match cmd_record(&a) {
            Ok((s, path)) => println!("recorded {} backend calls -> {}", s.backend_calls, path.display()),
            Err(e) => return fail(&e),
        },
        Command::Export(a) => match cmd_export(&a) {
            Ok(()) => println!("exported -> {}", a.out.display()),
            Err(e) => return fail(&e),
        },
    }
    std::process::ExitCode::SUCCESS
}
