mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use fingraph_core::benchmark::{evaluate, format_result, load_questions};
use fingraph_core::connectors::FixtureMode;
use fingraph_core::executor::ExecError;
use fingraph_core::pipeline::{ask, PipelineError};
use fingraph_core::planner::{build_plan, extract_semantics, QueryContext};
use fingraph_core::reporter::ReportError;
use fingraph_core::timefmt::parse_utc;
use fingraph_core::ExecutionOptions;
use thiserror::Error;
use tracing_subscriber::EnvFilter;

use config::{build_services, EngineConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("planning failed: {0}")]
    Plan(String),
    #[error("report generation failed: {0}")]
    Generation(String),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Plan(_) => 3,
            CliError::Generation(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Plan(_) | PipelineError::Exec(ExecError::InvalidGraph(_)) => CliError::Plan(e.to_string()),
            PipelineError::Exec(_) => CliError::Plan(e.to_string()),
            PipelineError::Report(ReportError::Io { .. }) | PipelineError::Io { .. } => CliError::Io(e.to_string()),
            PipelineError::Report(_) => CliError::Generation(e.to_string()),
        }
    }
}

fn parse_now(s: &str) -> Result<DateTime<Utc>, String> {
    parse_utc(s).ok_or_else(|| format!("`{s}` is not an ISO-8601 timestamp"))
}

#[derive(Debug, Parser)]
#[command(name = "fingraph", version, about = "Financial search agent: plans, searches, weighs by recency and reports")]
struct Cli {
    #[command(flatten)]
    global: GlobalFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalFlags {
    /// Engine config (JSON).
    #[arg(long, global = true, default_value = "fingraph.json")]
    config: PathBuf,
    /// Fixed current time, e.g. 2024-10-15T00:00:00Z.
    #[arg(long, global = true, value_parser = parse_now)]
    now: Option<DateTime<Utc>>,
    /// Output directory (bench: a .json path or a directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "record|replay|live")]
    fixtures_mode: Option<FixtureMode>,
    /// Execute without rewriting downstream queries.
    #[arg(long, global = true)]
    no_rewriter: bool,
    /// Weight every node 1 instead of by recency.
    #[arg(long, global = true)]
    no_temporal: bool,
    /// Most nodes executed at once.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    max_parallel: u32,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Answer a question with a cited report.
    Ask { query: String },
    /// Print the validated search plan without executing it.
    Plan { query: String },
    /// Score the four-choice question set.
    Bench {
        #[arg(long)]
        questions: Option<PathBuf>,
        /// Questions answered at once against live backends.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        jobs: u32,
    },
    /// Run a query against live providers, saving every response.
    RecordFixtures { query: String },
}

struct Context {
    config: EngineConfig,
    now: DateTime<Utc>,
    mode: FixtureMode,
    out: PathBuf,
    opts: ExecutionOptions,
}

impl Context {
    fn new(flags: &GlobalFlags) -> Result<Self, CliError> {
        let config = EngineConfig::load(&flags.config)?;
        Ok(Context {
            now: flags.now.unwrap_or_else(Utc::now),
            mode: flags.fixtures_mode.unwrap_or(config.fixtures.mode),
            out: flags.out.clone().unwrap_or_else(|| config.out_dir.clone()),
            opts: ExecutionOptions {
                enable_rewriter: !flags.no_rewriter,
                enable_temporal_weighting: !flags.no_temporal,
                max_parallel_nodes: flags.max_parallel as usize,
            },
            config,
        })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn cmd_ask(ctx: &Context, query: &str) -> Result<(), CliError> {
    let built = build_services(&ctx.config, ctx.mode, false)?;
    let outcome = ask(query, ctx.now, &built.services, &ctx.opts)?;
    let path = outcome.write_to(&ctx.out)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_plan(ctx: &Context, query: &str) -> Result<(), CliError> {
    let built = build_services(&ctx.config, ctx.mode, false)?;
    let plan = extract_semantics(QueryContext::new(query, ctx.now))
        .and_then(|qc| build_plan(&qc, &built.services.llm, &built.services.templates))
        .map_err(|e| CliError::Plan(e.to_string()))?;
    println!("{}", plan.to_json());
    Ok(())
}

fn cmd_bench(ctx: &Context, questions: Option<&Path>, jobs: usize) -> Result<(), CliError> {
    let path = questions
        .map(Path::to_path_buf)
        .or_else(|| ctx.config.questions.clone())
        .ok_or_else(|| CliError::Usage("no question file: pass --questions or set `questions` in the config".into()))?;
    let questions = load_questions(&path).map_err(|e| CliError::Config(e.to_string()))?;
    let built = build_services(&ctx.config, ctx.mode, false)?;
    let result = evaluate(&questions, &built.services, &ctx.opts, jobs);

    let target = if ctx.out.extension().is_some_and(|e| e == "json") { ctx.out.clone() } else { ctx.out.join("results.json") };
    if let Some(dir) = target.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let body = serde_json::to_string_pretty(&result).expect("result serializes") + "\n";
    std::fs::write(&target, body).map_err(|e| io_err(&target, e))?;
    print!("{}", format_result(&result));
    println!("results: {}", target.display());
    Ok(())
}

fn cmd_record(ctx: &Context, query: &str) -> Result<(), CliError> {
    if ctx.mode != FixtureMode::Record {
        return Err(CliError::Usage(format!(
            "record-fixtures needs --fixtures-mode record (current mode: {})",
            ctx.mode
        )));
    }
    let built = build_services(&ctx.config, ctx.mode, true)?;
    let outcome = ask(query, ctx.now, &built.services, &ctx.opts)?;
    let report = outcome.write_to(&ctx.out)?;
    let script_path = ctx.out.join("llm_script.json");
    std::fs::write(&script_path, built.recorded_script().to_json() + "\n").map_err(|e| io_err(&script_path, e))?;
    println!("{}", report.display());
    eprintln!(
        "fixtures written to {}; LLM replies saved to {} (review it and point the config's scripted backend at it to replay this run)",
        built.store_dir.display(),
        script_path.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Context::new(&cli.global)?;
    match &cli.command {
        Command::Ask { query } => cmd_ask(&ctx, query),
        Command::Plan { query } => cmd_plan(&ctx, query),
        Command::Bench { questions, jobs } => cmd_bench(&ctx, questions.as_deref(), *jobs as usize),
        Command::RecordFixtures { query } => cmd_record(&ctx, query),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
