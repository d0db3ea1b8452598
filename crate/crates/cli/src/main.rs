use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use futures::StreamExt;
use serde_json::Value;

use sciqa_client::Client;
use sciqa_core::corpus::{ingest, ChunkConfig, Granularity};
use sciqa_core::eval::{run_eval, EvalItem};
use sciqa_core::index::{Bm25Params, HashingEmbedder, IndexCatalog};
use sciqa_core::orchestrator::{handle_message, Deps, PipelineConfig, Session};
use sciqa_core::trace::{EventKind, TraceEvent};
use sciqa_service::config::{LlmMode, ServiceConfig, WebMode, ENV_AUTH_TOKEN};

#[derive(Parser)]
#[command(name = "sciqa", version, about = "Research assistant over an arXiv-style corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk and index a JSON-lines corpus into per-period, per-domain shards.
    Ingest(IngestArgs),
    /// List indexed shards.
    Shards(ShardsArgs),
    /// Run the HTTP service until interrupted.
    Serve(ServeArgs),
    /// Ask one question and print the cited answer.
    Ask(AskArgs),
    /// Pairwise preference evaluation of two answer sets.
    Eval(EvalArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "quarter-archive")]
    granularity: Granularity,
    #[arg(long, default_value_t = 256)]
    chunk_tokens: usize,
    #[arg(long, default_value_t = 32)]
    overlap_tokens: usize,
}

#[derive(Args)]
struct ShardsArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct AskArgs {
    #[arg(long)]
    query: String,
    /// Index directory for in-process runs.
    #[arg(long, required_unless_present = "server")]
    data_dir: Option<PathBuf>,
    /// Stream trace events to stderr as JSON lines.
    #[arg(long)]
    trace: bool,
    /// Scripted LLM responses (offline run).
    #[arg(long, conflicts_with = "server")]
    scripted: Option<PathBuf>,
    /// Service config supplying LLM, web, rerank and pipeline settings.
    #[arg(long, conflicts_with = "server")]
    config: Option<PathBuf>,
    /// Disable web retrieval.
    #[arg(long)]
    no_web: bool,
    /// Web results from a fixture file instead of a live endpoint.
    #[arg(long, conflicts_with = "server")]
    web_fixture: Option<PathBuf>,
    /// Answer to send if the assistant asks a clarifying question.
    #[arg(long)]
    reply: Option<String>,
    /// Ask a running service instead of running in-process.
    #[arg(long)]
    server: Option<String>,
    /// Print the final answer event payload as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    input: PathBuf,
    /// Scripted judge responses.
    #[arg(long)]
    scripted: Option<PathBuf>,
    /// Service config supplying the judge LLM.
    #[arg(long, conflicts_with = "scripted")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    concurrency: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .with_writer(std::io::stderr)
        .init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    let result = runtime.block_on(async {
        match cli.command {
            Command::Ingest(a) => run_ingest(a),
            Command::Shards(a) => run_shards(a),
            Command::Serve(a) => run_serve(a).await,
            Command::Ask(a) => run_ask(a).await,
            Command::Eval(a) => run_eval_cmd(a).await,
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run_ingest(a: IngestArgs) -> Result<()> {
    let file = File::open(&a.input).with_context(|| format!("cannot read {}", a.input.display()))?;
    let cfg = ChunkConfig {
        target_tokens: a.chunk_tokens,
        overlap_tokens: a.overlap_tokens,
        granularity: a.granularity,
    };
    let catalog = IndexCatalog::open(&a.data_dir)?;
    let report = ingest(
        BufReader::new(file),
        &cfg,
        &catalog,
        &HashingEmbedder::default(),
        Bm25Params::default(),
    )?;
    print_json(&report)
}

fn open_catalog(dir: &Path) -> Result<IndexCatalog> {
    IndexCatalog::open_existing(dir).with_context(|| format!("no index at {}", dir.display()))
}

fn run_shards(a: ShardsArgs) -> Result<()> {
    let summaries = open_catalog(&a.data_dir)?.summaries();
    if a.json {
        return print_json(&summaries);
    }
    let width = summaries.iter().map(|s| s.period.len()).max().unwrap_or(0).max("period".len());
    let dwidth = summaries.iter().map(|s| s.domain.len()).max().unwrap_or(0).max("domain".len());
    println!("{:<width$}  {:<dwidth$}  {:>8}", "period", "domain", "chunks");
    for s in &summaries {
        println!("{:<width$}  {:<dwidth$}  {:>8}", s.period, s.domain, s.chunk_count);
    }
    Ok(())
}

async fn run_serve(a: ServeArgs) -> Result<()> {
    let cfg = ServiceConfig::load(&a.config)?;
    sciqa_service::serve(cfg).await?;
    Ok(())
}

fn local_config(a: &AskArgs) -> Result<ServiceConfig> {
    let mut cfg = match &a.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::default(),
    };
    if let Some(script) = &a.scripted {
        cfg.llm.mode = LlmMode::Scripted;
        cfg.llm.script = Some(script.clone());
    } else if a.config.is_none() {
        bail!("no language model configured: pass --scripted, --config or --server");
    }
    if let Some(fixture) = &a.web_fixture {
        cfg.web.mode = WebMode::Fixture;
        cfg.web.fixture = Some(fixture.clone());
    }
    if a.no_web {
        cfg.pipeline.web_enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

enum Backend {
    Local {
        session: Session,
        deps: Deps,
        pipeline: PipelineConfig,
    },
    Remote {
        client: Client,
        session_id: String,
    },
}

impl Backend {
    async fn exchange(&mut self, text: &str, mut on_event: impl FnMut(&TraceEvent)) -> Result<Option<TraceEvent>> {
        let mut last = None;
        match self {
            Backend::Local { session, deps, pipeline } => {
                let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
                let trace = session.begin_exchange().with_sink(tx);
                let run = async {
                    let mut trace = trace;
                    if let Err(e) = handle_message(session, text, deps, pipeline, &mut trace).await {
                        trace.emit(EventKind::Error, serde_json::json!({ "message": e.to_string() }));
                    }
                };
                let drain = async {
                    while let Some(ev) = rx.recv().await {
                        on_event(&ev);
                        last = Some(ev);
                    }
                };
                tokio::join!(run, drain);
            }
            Backend::Remote { client, session_id } => {
                let mut events = client.send_message(session_id, text).await?;
                while let Some(ev) = events.next().await {
                    let ev = ev?;
                    on_event(&ev);
                    last = Some(ev);
                }
            }
        }
        Ok(last.filter(|ev| ev.kind.is_terminal()))
    }
}

async fn backend(a: &AskArgs) -> Result<Backend> {
    if let Some(url) = &a.server {
        let client = Client::new(url.clone(), std::env::var(ENV_AUTH_TOKEN).ok().filter(|t| !t.is_empty()));
        let session_id = client.create_session().await?;
        return Ok(Backend::Remote { client, session_id });
    }
    let cfg = local_config(a)?;
    let dir = a.data_dir.as_deref().ok_or_else(|| anyhow!("--data-dir is required"))?;
    let catalog = match open_catalog(dir) {
        Ok(c) => c,
        Err(e) if a.scripted.is_some() => {
            tracing::warn!(error = %e, "continuing without a local index");
            IndexCatalog::in_memory()
        }
        Err(e) => return Err(e),
    };
    Ok(Backend::Local {
        session: Session::new("cli"),
        deps: cfg.deps(Arc::new(catalog))?,
        pipeline: cfg.pipeline,
    })
}

fn print_answer(payload: &Value) {
    println!("{}", payload["rendered"].as_str().unwrap_or_default());
    let sources = payload["sources"].as_array().cloned().unwrap_or_default();
    if !sources.is_empty() {
        println!();
        println!("Sources:");
        for (i, s) in sources.iter().enumerate() {
            println!("[{}] {}", i + 1, s.as_str().unwrap_or_default());
        }
    }
}

async fn run_ask(a: AskArgs) -> Result<()> {
    let mut backend = backend(&a).await?;
    let trace = a.trace;
    let echo = move |ev: &TraceEvent| {
        if trace {
            eprintln!("{}", ev.to_json_line());
        }
    };
    let mut terminal = backend.exchange(&a.query, echo).await?;
    if let (Some(ev), Some(reply)) = (&terminal, &a.reply) {
        if ev.kind == EventKind::ClarificationAsked {
            terminal = backend.exchange(reply, echo).await?;
        }
    }
    let ev = terminal.ok_or_else(|| anyhow!("the event stream ended without an outcome"))?;
    match ev.kind {
        EventKind::FinalAnswer if a.json => print_json(&ev.payload),
        EventKind::FinalAnswer => {
            print_answer(&ev.payload);
            Ok(())
        }
        EventKind::ClarificationAsked if a.json => print_json(&ev.payload),
        EventKind::ClarificationAsked => {
            println!("The assistant needs clarification (answer with --reply):");
            for q in ev.payload["questions"].as_array().cloned().unwrap_or_default() {
                println!("- {}", q.as_str().unwrap_or_default());
            }
            Ok(())
        }
        _ => bail!("turn failed: {}", ev.payload["message"].as_str().unwrap_or("unknown error")),
    }
}

async fn run_eval_cmd(a: EvalArgs) -> Result<()> {
    let raw = std::fs::read_to_string(&a.input).with_context(|| format!("cannot read {}", a.input.display()))?;
    let items = EvalItem::parse_jsonl(&raw)?;
    let mut cfg = match &a.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::default(),
    };
    match &a.scripted {
        Some(script) => {
            cfg.llm.mode = LlmMode::Scripted;
            cfg.llm.script = Some(script.clone());
        }
        None if a.config.is_none() => bail!("no judge configured: pass --scripted or --config"),
        None => {}
    }
    cfg.validate()?;
    let report = run_eval(&cfg.tools()?, &items, a.concurrency.max(1)).await;
    eprint!("{}", report.render());
    print_json(&report)
}
