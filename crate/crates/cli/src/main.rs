use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use capsule_core::analytics::{self, Aggregation, AttemptCounts, Rational};
use capsule_core::backend::BackendKind;
use capsule_core::config::{PartialConfig, RunConfig};
use capsule_core::dataset::{load_problems_with, LoadOptions, Problem};
use capsule_core::orchestrator::{Orchestrator, RunHeader, RunLog, RunLogWriter, SolveOutcome};
use capsule_core::sandbox::CancelToken;
use clap::{Args, Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "capsule", version, about = "Generate, execute and self-debug code solutions against test cases")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve every problem in a dataset and write a run log.
    Run(RunArgs),
    /// Solve one problem given on the command line.
    Solve(SolveArgs),
    /// Re-run a recorded transcript against a dataset.
    Replay(ReplayArgs),
    /// Influence table, decay fit and summary for run logs or a table row.
    Analyze(AnalyzeArgs),
}

/// Flags mirroring the config file keys.
#[derive(Args, Default)]
struct ConfigFlags {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// humaneval, mbpp, bigcodebench_lite or custom.
    #[arg(long)]
    format: Option<String>,
    /// complete or instruct (BigCodeBench only).
    #[arg(long)]
    split: Option<String>,
    /// http, mock or replay.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    #[arg(long)]
    max_output_tokens: Option<String>,
    /// Fix attempts after the initial generation.
    #[arg(long)]
    max_attempts: Option<String>,
    #[arg(long)]
    timeout: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    #[arg(long)]
    max_concurrent_requests: Option<String>,
    /// Character budget for refined error feedback.
    #[arg(long)]
    error_budget: Option<String>,
    /// subprocess or container.
    #[arg(long = "exec")]
    exec_backend: Option<String>,
    #[arg(long, short)]
    output: Option<String>,
    #[arg(long)]
    keep_artifacts: bool,
    #[arg(long)]
    record_transcript: Option<String>,
    #[arg(long)]
    mock_script: Option<String>,
    /// auto, always or never.
    #[arg(long)]
    hint_mode: Option<String>,
    #[arg(long)]
    work_dir: Option<String>,
    #[arg(long)]
    guidance_file: Option<String>,
    #[arg(long)]
    prompts_dir: Option<String>,
    #[arg(long)]
    python: Option<String>,
    #[arg(long)]
    engine: Option<String>,
    #[arg(long)]
    image: Option<String>,
    #[arg(long)]
    memory_limit: Option<String>,
}

impl ConfigFlags {
    fn layer(&self) -> Result<PartialConfig, capsule_core::config::ConfigError> {
        let mut p = PartialConfig::default();
        let pairs = [
            ("dataset_path", &self.dataset),
            ("format", &self.format),
            ("split", &self.split),
            ("backend", &self.backend),
            ("model_name", &self.model),
            ("temperature", &self.temperature),
            ("max_output_tokens", &self.max_output_tokens),
            ("max_attempts", &self.max_attempts),
            ("timeout_secs", &self.timeout),
            ("workers", &self.workers),
            ("max_concurrent_requests", &self.max_concurrent_requests),
            ("error_budget", &self.error_budget),
            ("exec_backend", &self.exec_backend),
            ("output_path", &self.output),
            ("record_transcript", &self.record_transcript),
            ("mock_script", &self.mock_script),
            ("hint_mode", &self.hint_mode),
            ("work_dir", &self.work_dir),
            ("guidance_file", &self.guidance_file),
            ("prompts_dir", &self.prompts_dir),
            ("python", &self.python),
            ("engine", &self.engine),
            ("image", &self.image),
            ("memory_limit", &self.memory_limit),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                p.set(key, v)?;
            }
        }
        if self.keep_artifacts {
            p.keep_artifacts = Some(true);
        }
        Ok(p)
    }

    /// flags > environment > file > defaults, with `extra` above the flags.
    fn resolve(&self, extra: PartialConfig) -> Result<RunConfig, Failure> {
        let file = match &self.config {
            Some(path) => PartialConfig::from_file(path).map_err(Failure::usage)?,
            None => PartialConfig::default(),
        };
        let env = PartialConfig::from_env().map_err(Failure::usage)?;
        let flags = extra.or(self.layer().map_err(Failure::usage)?);
        RunConfig::layered(flags, env, file).map_err(Failure::usage)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    description: String,
    /// Test statement; repeat for several.
    #[arg(long = "test", required = true)]
    tests: Vec<String>,
    #[arg(long)]
    entry_point: Option<String>,
    #[arg(long, default_value = "cli/0")]
    id: String,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    transcript: PathBuf,
    /// Original run log: its configuration is reused and its outcomes are
    /// compared with the replayed ones.
    #[arg(long)]
    from_log: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run logs; several logs are treated as separate series.
    logs: Vec<PathBuf>,
    /// Comma-separated per-attempt values S_0..S_A (e.g. percentages).
    #[arg(long, conflicts_with = "logs")]
    from_table: Option<String>,
    /// Total for --from-table.
    #[arg(long, default_value = "100")]
    n: String,
    /// Fit I(x) = a * exp(-b x) to the influence points.
    #[arg(long)]
    fit: bool,
    /// mean or pool (several logs only).
    #[arg(long, default_value = "mean")]
    aggregate: String,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    fit_json: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-attempt mean and sample sd across logs.
    #[arg(long)]
    repeats_csv: Option<PathBuf>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_USAGE, error: e.into() }
    }

    fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_RUNTIME, error: e.into() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Analyze(a) => cmd_analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn install_cancel_handler() -> CancelToken {
    let cancel = CancelToken::default();
    let c = cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        eprintln!("interrupt: stopping after in-flight work");
        c.cancel();
    }) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    cancel
}

fn load_dataset(config: &RunConfig) -> Result<Vec<Problem>, Failure> {
    let path = config.dataset_path.as_ref().ok_or_else(|| Failure::usage(anyhow!("no dataset given (--dataset)")))?;
    let problems = load_problems_with(path, config.format, LoadOptions { split: config.split }).map_err(Failure::usage)?;
    if problems.is_empty() {
        return Err(Failure::usage(anyhow!("dataset {} has no problems", path.display())));
    }
    Ok(problems)
}

/// Runs a suite, appending each outcome to the log as soon as its
/// predecessors are done.
fn run_logged(config: &RunConfig, problems: &[Problem], cancel: CancelToken) -> Result<Vec<SolveOutcome>, Failure> {
    let orch = Orchestrator::from_config(config, cancel.clone()).map_err(Failure::usage)?;
    let mut writer = RunLogWriter::create(&config.output_path, &RunHeader::new(config.clone()))
        .with_context(|| format!("cannot write run log {}", config.output_path.display()))
        .map_err(Failure::runtime)?;
    let mut write_err = None;
    let outcomes = orch.run_suite(problems, config.workers, |o| {
        if write_err.is_none() {
            if let Err(e) = writer.append(o) {
                write_err = Some(e);
            }
        }
    });
    if let Some(e) = write_err {
        return Err(Failure::runtime(anyhow!("cannot append to run log {}: {e}", config.output_path.display())));
    }
    if cancel.is_cancelled() {
        return Err(Failure::runtime(anyhow!(
            "interrupted; {} of {} outcomes written to {}",
            outcomes.len(),
            problems.len(),
            config.output_path.display()
        )));
    }
    Ok(outcomes)
}

fn print_summary(outcomes: &[SolveOutcome], log_path: &Path) {
    let s = analytics::summarize(outcomes);
    println!("solved {}/{} ({})", s.solved, s.problems, s.success_rate_pct);
    println!(
        "tokens: {} total, {:.1} per problem; llm calls: {:.2} per problem",
        s.total_tokens, s.avg_tokens_per_problem, s.avg_llm_calls_per_problem
    );
    if s.setup_errors > 0 {
        println!("setup errors: {}", s.setup_errors);
    }
    println!("log: {}", log_path.display());
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let config = args.config.resolve(PartialConfig::default())?;
    let problems = load_dataset(&config)?;
    let outcomes = run_logged(&config, &problems, install_cancel_handler())?;
    print_summary(&outcomes, &config.output_path);
    Ok(())
}

fn cmd_solve(args: SolveArgs) -> Result<(), Failure> {
    let config = args.config.resolve(PartialConfig::default())?;
    let problem = Problem {
        id: args.id,
        description: args.description,
        tests: args.tests,
        entry_point: args.entry_point,
        source_format: config.format,
    };
    problem.validate().map_err(|e| Failure::usage(anyhow!(e)))?;
    let orch = Orchestrator::from_config(&config, install_cancel_handler()).map_err(Failure::usage)?;
    let outcome = orch.solve(&problem);
    if let Some(e) = &outcome.setup_error {
        return Err(Failure::runtime(anyhow!("{}: {e}", problem.id)));
    }
    if outcome.solved {
        println!("solved at attempt {} ({} llm calls)", outcome.attempts.len() - 1, outcome.llm_calls);
        println!("{}", outcome.final_code.as_deref().unwrap_or_default());
    } else {
        println!("not solved after {} llm calls", outcome.llm_calls);
        for a in &outcome.attempts {
            let category = a.refined.as_ref().map(|r| r.category.as_str()).unwrap_or("-");
            println!("attempt {}: {} (exit {}, {category})", a.index, a.execution.status, a.execution.exit_code);
        }
        if let Some(code) = &outcome.final_code {
            println!("last code:\n{code}");
        }
    }
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<(), Failure> {
    let original = match &args.from_log {
        Some(p) => Some(RunLog::read(p).map_err(Failure::usage)?),
        None => None,
    };
    let mut config = match &original {
        Some(log) => {
            // The recorded configuration; only the dataset, output and
            // worker count may be overridden.
            let flags = args.config.layer().map_err(Failure::usage)?;
            let mut c = log.header.config.clone();
            c.dataset_path = flags.dataset_path.or(c.dataset_path);
            c.workers = flags.workers.unwrap_or(c.workers);
            c.output_path = flags.output_path.unwrap_or_else(|| c.output_path.with_extension("replay.jsonl"));
            c
        }
        None => args.config.resolve(PartialConfig::default())?,
    };
    config.backend = BackendKind::Replay;
    config.replay_transcript = Some(args.transcript.clone());
    config.record_transcript = None;
    let problems = load_dataset(&config)?;
    let outcomes = run_logged(&config, &problems, install_cancel_handler())?;
    print_summary(&outcomes, &config.output_path);
    if let Some(e) = outcomes.iter().find_map(|o| o.setup_error.as_ref()) {
        return Err(Failure::runtime(anyhow!("replay failed: {e}")));
    }
    if let Some(log) = original {
        let strip = |v: &[SolveOutcome]| v.iter().map(SolveOutcome::without_timing).collect::<Vec<_>>();
        if strip(&log.outcomes) != strip(&outcomes) {
            return Err(Failure::runtime(anyhow!("replayed outcomes differ from the original log")));
        }
        println!("replay matches the original log");
    }
    Ok(())
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display())).map_err(Failure::runtime),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sum_counts(all: &[AttemptCounts]) -> AttemptCounts {
    let len = all.iter().map(|c| c.s.len()).max().unwrap_or(0);
    let zero = Rational::from_integer(0);
    AttemptCounts {
        n: all.iter().map(|c| c.n).sum(),
        s: (0..len).map(|i| all.iter().map(|c| c.s.get(i).copied().unwrap_or(zero)).sum()).collect(),
        unsolved: all.iter().map(|c| c.unsolved).sum(),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let how: Aggregation = args.aggregate.parse().map_err(|e: String| Failure::usage(anyhow!(e)))?;
    let (counts, series, summary, runs) = if let Some(row) = &args.from_table {
        let values = analytics::parse_table(row).map_err(Failure::usage)?;
        let n = analytics::parse_decimal(&args.n).map_err(Failure::usage)?;
        let counts = analytics::from_table(&values, n).map_err(Failure::usage)?;
        let points = analytics::influence(&counts);
        (counts.clone(), vec![points], None, vec![counts])
    } else {
        if args.logs.is_empty() {
            return Err(Failure::usage(anyhow!("give run logs or --from-table")));
        }
        let mut runs = Vec::new();
        let mut outcomes = Vec::new();
        for path in &args.logs {
            let log = RunLog::read(path).map_err(Failure::usage)?;
            if log.outcomes.is_empty() {
                return Err(Failure::usage(anyhow!("run log {} has no outcomes", path.display())));
            }
            runs.push(analytics::tally(&log.outcomes, log.header.config.max_attempts));
            outcomes.extend(log.outcomes);
        }
        let series = runs.iter().map(analytics::influence).collect();
        (sum_counts(&runs), series, Some(analytics::summarize(&outcomes)), runs)
    };
    let points = analytics::influence(&counts);
    let fit = args.fit.then(|| analytics::fit_xy(&analytics::aggregate(&series, how)));

    write_or_print(args.csv.as_deref(), &analytics::influence_csv(&points))?;
    if let Some(p) = &args.repeats_csv {
        write_or_print(Some(p), &analytics::repeat_csv(&analytics::repeat_stats(&runs)))?;
    }
    if let (Some(Ok(f)), Some(p)) = (&fit, &args.fit_json) {
        write_or_print(Some(p), &format!("{:#}\n", analytics::fit_json(f)))?;
    }
    let report = analytics::report_json(summary.as_ref(), &points, fit.as_ref());
    let report_text = format!("{:#}\n", report);
    match &args.report {
        Some(p) => write_or_print(Some(p), &report_text)?,
        None if args.csv.is_some() => write_or_print(None, &report_text)?,
        None => {
            if let Some(Ok(f)) = &fit {
                println!("{}", analytics::fit_json(f));
            }
        }
    }
    match fit {
        Some(Err(e)) => Err(Failure::runtime(e)),
        _ => Ok(()),
    }
}
