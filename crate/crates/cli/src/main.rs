//! `insightloop` command-line front end.
//!
//! Exit codes: 0 clean success, 1 degraded completion (or a replay-verify
//! mismatch), 2 fatal or usage error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use insightloop::agent::AnalysisGoal;
use insightloop::artifacts::{CASSETTE_FILE, EXECUTIONS_FILE, INPUT_DIR};
use insightloop::config::{RunConfig, RunMode};
use insightloop::evaluate::{evaluate_run, GoldStandard, METRICS_FILE};
use insightloop::gateway::http::{OpenAiCompatible, SerperSearch};
use insightloop::gateway::{Gateway, ModelSettings, SearchProvider};
use insightloop::orchestrator::{run_analysis, RunReport};
use insightloop::sandbox::{ProcessExecutor, RecordingExecutor, ReplayExecutor};

mod verify;

/// Cassette of the judge calls made by `eval`, kept next to the run's own.
const EVAL_CASSETTE_FILE: &str = "eval_cassette.json";

#[derive(Debug, Parser)]
#[command(name = "insightloop", version, about = "Multi-agent insight discovery over tabular datasets")]
struct Cli {
    /// Repeat for more detail (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Analyse a dataset and write every artifact into a run directory.
    Run(RunArgs),
    /// Score a finished run directory against a gold file.
    Eval(EvalArgs),
    /// Replay a recorded run directory and diff the regenerated artifacts.
    ReplayVerify(VerifyArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// CSV file to analyse.
    #[arg(long)]
    dataset: PathBuf,
    /// Analysis goal text.
    #[arg(long, required_unless_present = "goal_file", conflicts_with = "goal_file")]
    goal: Option<String>,
    /// File holding the analysis goal.
    #[arg(long)]
    goal_file: Option<PathBuf>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<RunMode>,
    /// Search results dated after this day (YYYY-MM-DD) are discarded.
    #[arg(long)]
    max_date: Option<NaiveDate>,
    /// Replay cassette; defaults to cassette.json in the run directory.
    #[arg(long)]
    cassette: Option<PathBuf>,
    /// Replay execution log; defaults to executions.json in the run directory.
    #[arg(long)]
    executions: Option<PathBuf>,
    #[command(flatten)]
    counts: CountOverrides,
    /// Answer the questions of one iteration concurrently.
    #[arg(long)]
    parallel_questions: bool,
}

#[derive(Debug, Args)]
struct CountOverrides {
    #[arg(long)]
    n_iter: Option<usize>,
    #[arg(long)]
    n_q: Option<usize>,
    #[arg(long)]
    n_r: Option<usize>,
    #[arg(long)]
    n_fix: Option<usize>,
    #[arg(long)]
    select_s: Option<usize>,
    #[arg(long)]
    per_role_m: Option<usize>,
    #[arg(long)]
    sample_k: Option<usize>,
    #[arg(long)]
    per_query_k: Option<usize>,
    #[arg(long)]
    timeout_secs: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Finished run directory.
    #[arg(long)]
    run_dir: PathBuf,
    /// JSON document: {"insights": [...], "summary": "..."}.
    #[arg(long)]
    gold: PathBuf,
    /// Supplies model settings for the judge.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode, default_value = "live")]
    mode: RunMode,
    /// Judge cassette; defaults to eval_cassette.json in the run directory.
    #[arg(long)]
    cassette: Option<PathBuf>,
    /// Concurrent judge calls.
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Run directory holding run_report.json, cassette.json and executions.json.
    run_dir: PathBuf,
}

fn parse_mode(s: &str) -> Result<RunMode, String> {
    s.parse()
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        2 => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_target(false)
        .init();
}

fn resolve_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match &args.run_dir {
        Some(dir) => config.run_dir = dir.clone(),
        None if args.config.is_none() => bail!("--run-dir is required"),
        None => {}
    }
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if args.max_date.is_some() {
        config.max_date = args.max_date;
    }
    if args.parallel_questions {
        config.parallel_questions = true;
    }
    let c = &args.counts;
    let overrides = [
        (&mut config.n_iter, c.n_iter),
        (&mut config.n_q, c.n_q),
        (&mut config.n_r, c.n_r),
        (&mut config.n_fix, c.n_fix),
        (&mut config.select_s, c.select_s),
        (&mut config.per_role_m, c.per_role_m),
        (&mut config.sample_k, c.sample_k),
        (&mut config.per_query_k, c.per_query_k),
    ];
    for (slot, value) in overrides {
        if let Some(v) = value {
            *slot = v;
        }
    }
    if let Some(t) = c.timeout_secs {
        config.sandbox.timeout_secs = t;
    }
    config.validate()?;
    Ok(config)
}

fn read_goal(args: &RunArgs) -> anyhow::Result<AnalysisGoal> {
    let text = match (&args.goal, &args.goal_file) {
        (Some(g), _) => g.clone(),
        (None, Some(path)) => std::fs::read_to_string(path).with_context(|| format!("reading goal file {}", path.display()))?,
        (None, None) => bail!("--goal or --goal-file is required"),
    };
    Ok(AnalysisGoal::new(text.trim())?)
}

/// A search provider is optional: without one, knowledge acquisition falls
/// back to the model's own knowledge.
fn live_search() -> Option<Arc<dyn SearchProvider>> {
    match SerperSearch::from_env() {
        Ok(s) => Some(Arc::new(s)),
        Err(e) => {
            tracing::warn!("{e}; web search disabled");
            None
        }
    }
}

fn live_gateway(settings: &ModelSettings, record: bool) -> anyhow::Result<Gateway> {
    let backend = Arc::new(OpenAiCompatible::from_env(settings.base_url.clone())?);
    let search = live_search();
    Ok(if record {
        Gateway::record(backend, search, settings.clone())
    } else {
        Gateway::passthrough(backend, search, settings.clone())
    })
}

fn finish(report: &RunReport) -> ExitCode {
    println!("{}", report.summary);
    eprintln!(
        "answered {} of {} selected questions in {} iteration(s)",
        report.stats.questions_answered, report.stats.questions_selected, report.stats.iterations
    );
    if report.degraded() {
        for f in &report.flags {
            eprintln!("degraded [{}]: {}", f.stage, f.detail);
        }
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

async fn cmd_run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let config = resolve_config(&args)?;
    let goal = read_goal(&args)?;
    let run_dir = config.run_dir.clone();
    match config.mode {
        RunMode::Replay => {
            let cassette = args.cassette.clone().unwrap_or_else(|| run_dir.join(CASSETTE_FILE));
            let executions = args.executions.clone().unwrap_or_else(|| run_dir.join(EXECUTIONS_FILE));
            let gateway = Gateway::replay_from(&cassette, config.model.clone())?;
            let executor = ReplayExecutor::load(&executions)?;
            let report = run_analysis(&args.dataset, &goal, &config, &gateway, &executor).await?;
            Ok(finish(&report))
        }
        RunMode::Live => {
            let gateway = live_gateway(&config.model, false)?;
            let executor = ProcessExecutor::new(config.sandbox.command.clone())?;
            let report = run_analysis(&args.dataset, &goal, &config, &gateway, &executor).await?;
            Ok(finish(&report))
        }
        RunMode::Record => {
            let gateway = live_gateway(&config.model, true)?;
            let executor = RecordingExecutor::new(Arc::new(ProcessExecutor::new(config.sandbox.command.clone())?));
            let result = run_analysis(&args.dataset, &goal, &config, &gateway, &executor).await;
            // Recordings are kept even when the run aborts, to debug it offline.
            if run_dir.is_dir() {
                gateway.recorded().save(&run_dir.join(CASSETTE_FILE))?;
                executor.log().save(&run_dir.join(EXECUTIONS_FILE))?;
            }
            Ok(finish(&result?))
        }
    }
}

async fn cmd_eval(args: EvalArgs) -> anyhow::Result<ExitCode> {
    let gold = GoldStandard::load(&args.gold)?;
    let settings = match &args.config {
        Some(path) => RunConfig::load(path)?.model,
        None => ModelSettings::default(),
    };
    let cassette = args.cassette.clone().unwrap_or_else(|| args.run_dir.join(EVAL_CASSETTE_FILE));
    let gateway = match args.mode {
        RunMode::Replay => Gateway::replay_from(&cassette, settings)?,
        RunMode::Live => live_gateway(&settings, false)?,
        RunMode::Record => live_gateway(&settings, true)?,
    };
    let metrics = evaluate_run(&args.run_dir, &gold, &gateway, args.parallelism).await?;
    if args.mode == RunMode::Record {
        gateway.recorded().save(&cassette)?;
    }
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    eprintln!("metrics written to {}", args.run_dir.join(METRICS_FILE).display());
    Ok(if metrics.flags.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

async fn cmd_replay_verify(args: VerifyArgs) -> anyhow::Result<ExitCode> {
    let original = args.run_dir;
    let report = RunReport::load(&original)?;
    let cassette = original.join(CASSETTE_FILE);
    let executions = original.join(EXECUTIONS_FILE);
    for p in [&cassette, &executions] {
        if !p.is_file() {
            bail!("{} has no {}; only recorded runs can be verified", original.display(), p.display());
        }
    }
    let dataset = original.join(INPUT_DIR).join(&report.dataset.file_name);
    let tmp = tempfile::tempdir()?;
    let mut config = report.config.clone();
    config.mode = RunMode::Replay;
    config.run_dir = tmp.path().join("replay");
    let gateway = Gateway::replay_from(&cassette, config.model.clone())?;
    let executor = ReplayExecutor::load(&executions)?;
    run_analysis(&dataset, &report.goal, &config, &gateway, &executor).await?;

    let diffs = verify::diff_trees(&original, &config.run_dir, &[CASSETTE_FILE, EXECUTIONS_FILE, METRICS_FILE, EVAL_CASSETTE_FILE])?;
    if diffs.is_empty() {
        println!("replay matches {}", original.display());
        Ok(ExitCode::SUCCESS)
    } else {
        for d in &diffs {
            println!("{d}");
        }
        println!("{} artifact(s) differ", diffs.len());
        Ok(ExitCode::from(1))
    }
}

fn exit_on_error(result: anyhow::Result<ExitCode>) -> ExitCode {
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return exit_on_error(Err(anyhow!("cannot start async runtime: {e}"))),
    };
    exit_on_error(runtime.block_on(async {
        match cli.command {
            Command::Run(a) => cmd_run(a).await,
            Command::Eval(a) => cmd_eval(a).await,
            Command::ReplayVerify(a) => cmd_replay_verify(a).await,
        }
    }))
}
