//! `morphnas`: search, estimate, evaluate and report.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! input, 3 evaluator unreachable. `MORPHNAS_LOG` sets the log level.

mod config;
mod report;
mod search;

use clap::{Parser, Subcommand, ValueEnum};
use config::{train_config, ConfigError, SearchRunConfig};
use morphnas::arch::{expand_stack, from_json, Architecture, Shape};
use morphnas::evaluation::protocol::{serve, Behavior};
use morphnas::evaluation::{
    EvalRequest, EvalResult, Evaluator, ExternalConfig, ExternalEvaluator, NativeEvaluator, Schedule, Status,
    SurrogateEvaluator,
};
use morphnas::resources::{estimate, ConstraintSet};
use search::{RunError, RunOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "morphnas", version, about = "Progressive architecture search under resource constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search described by a TOML file.
    Search {
        config: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop (with a valid checkpoint) after this many episodes.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Print parameters, MFLOPs and FLOPs/byte of an architecture file.
    Estimate {
        arch: PathBuf,
        #[arg(long, default_value = "32x32x3")]
        input: Shape,
    },
    /// Evaluate one architecture and print the result as JSON.
    Eval {
        arch: PathBuf,
        #[arg(long, value_enum, default_value_t = EvaluatorArg::Surrogate)]
        evaluator: EvaluatorArg,
        /// Worker command line, split on whitespace (external).
        #[arg(long, conflicts_with = "addr")]
        cmd: Option<String>,
        /// `host:port` of a listening worker (external).
        #[arg(long)]
        addr: Option<String>,
        #[arg(long, default_value = "32x32x3")]
        input: Shape,
        #[arg(long, value_enum, default_value_t = ScheduleArg::Predictive)]
        schedule: ScheduleArg,
        #[arg(long, default_value_t = 60_000)]
        timeout_ms: u64,
        #[arg(long, default_value_t = 2)]
        retries: u32,
    },
    /// Summarize a history stream as CSV.
    Report {
        history: PathBuf,
        /// Run file or resolved config.json supplying the constraints;
        /// defaults to config.json next to the history.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write episodes.csv and pareto.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reference worker on standard streams.
    #[command(hide = true)]
    EchoWorker {
        /// echo, fixed:<p>, malformed-first, silent, wrong-protocol,
        /// reversed:<n> or crash-after:<n>.
        #[arg(long, default_value = "echo")]
        behavior: String,
        /// Accepted for command-line compatibility with other workers.
        #[arg(long)]
        mode: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvaluatorArg {
    Surrogate,
    Native,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Full,
    Predictive,
}

enum Failure {
    Runtime(String),
    Invalid(String),
    Unreachable(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Invalid(_) => 2,
            Failure::Unreachable(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Runtime(m) | Failure::Invalid(m) | Failure::Unreachable(m) => m,
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(_) | RunError::Usage(_) => Failure::Invalid(e.to_string()),
            RunError::Unreachable(_) => Failure::Unreachable(e.to_string()),
            RunError::Io { .. } | RunError::Search(_) => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

fn read_arch(path: &Path) -> Result<Architecture, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", path.display())))?;
    from_json(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl serde::Serialize) {
    let mut out = std::io::stdout().lock();
    let _ = serde_json::to_writer_pretty(&mut out, value);
    let _ = writeln!(out);
}

fn run_search_cmd(
    path: &Path,
    opts: RunOptions,
    seed: Option<u64>,
    episodes: Option<usize>,
    output: Option<PathBuf>,
    parallelism: Option<usize>,
) -> Result<(), Failure> {
    let mut cfg = SearchRunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = episodes {
        cfg.reinforce.episodes = e;
    }
    if let Some(o) = output {
        cfg.output = o;
    }
    if let Some(p) = parallelism {
        cfg.parallelism = p;
    }
    cfg.check()?;
    let report = search::cmd_search(&cfg, &opts)?;
    if !report.completed {
        eprintln!(
            "stopped after episode {}; continue with `morphnas search {} --resume`",
            report.episodes_run,
            path.display()
        );
    }
    print_json(&report);
    Ok(())
}

fn run_estimate(path: &Path, input: Shape) -> Result<(), Failure> {
    let arch = read_arch(path)?;
    let lowered = match &arch {
        Architecture::Layers(_) => arch,
        Architecture::Cell { .. } => expand_stack(&arch, input).map_err(|e| Failure::Invalid(e.to_string()))?,
    };
    let u = estimate(&lowered, input).map_err(|e| Failure::Invalid(e.to_string()))?;
    print_json(&serde_json::json!({
        "params": u.params,
        "flops": u.flops,
        "bytes": u.bytes,
        "mflops": u.mflops(),
        "flops_per_byte": u.intensity(),
    }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_eval(
    path: &Path,
    kind: EvaluatorArg,
    cmd: Option<String>,
    addr: Option<String>,
    input: Shape,
    schedule: ScheduleArg,
    timeout_ms: u64,
    retries: u32,
) -> Result<(), Failure> {
    let architecture = read_arch(path)?;
    let schedule = match schedule {
        ScheduleArg::Full => Schedule::Full,
        ScheduleArg::Predictive => Schedule::Predictive,
    };
    let mut train = train_config(schedule, &toml::Table::new())?;
    train.input_shape = input;
    let mut evaluator: Box<dyn Evaluator> = match kind {
        EvaluatorArg::Surrogate => Box::new(SurrogateEvaluator),
        EvaluatorArg::Native => Box::new(NativeEvaluator::new(false)),
        EvaluatorArg::External => {
            let endpoint = match (cmd, addr) {
                (Some(c), None) => morphnas::evaluation::Endpoint::Command(c.split_whitespace().map(String::from).collect()),
                (None, Some(a)) => morphnas::evaluation::Endpoint::Address(a),
                _ => return Err(Failure::Invalid("external evaluation needs --cmd or --addr".into())),
            };
            Box::new(ExternalEvaluator::new(ExternalConfig { timeout_ms, retries, ..ExternalConfig::new(endpoint) }))
        }
    };
    let request = EvalRequest { id: "eval".into(), architecture, train_config: train, constraints_echo: None };
    match evaluator.evaluate_batch(std::slice::from_ref(&request)) {
        Ok(mut results) => {
            let r = results.remove(0);
            print_json(&r);
            if r.status == Status::Ok {
                Ok(())
            } else {
                Err(Failure::Runtime(r.error_message.unwrap_or_else(|| "evaluation failed".into())))
            }
        }
        Err(e) => {
            print_json(&EvalResult::error("eval", e.to_string()));
            Err(Failure::Unreachable(e.to_string()))
        }
    }
}

fn load_constraints(history: &Path, config: Option<PathBuf>) -> Result<Option<ConstraintSet>, Failure> {
    let path = match config {
        Some(p) => p,
        None => {
            let sibling = history.parent().unwrap_or(Path::new(".")).join(search::CONFIG);
            if !sibling.exists() {
                return Ok(None);
            }
            sibling
        }
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let cfg = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str::<SearchRunConfig>(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?
    } else {
        SearchRunConfig::parse(&text)?
    };
    Ok(Some(cfg.constraints))
}

fn run_report(history: &Path, config: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), Failure> {
    let file = std::fs::File::open(history).map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", history.display())))?;
    let h = report::read_history(std::io::BufReader::new(file)).map_err(|e| Failure::Runtime(e.to_string()))?;
    let constraints = load_constraints(history, config)?;
    let episodes = report::episodes_csv(&report::episode_rows(&h.records));
    let pareto = report::pareto_csv(&h.records, &report::report_metrics(constraints.as_ref()));
    print!("{episodes}\n{pareto}");
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(e.to_string()))?;
        std::fs::write(dir.join("episodes.csv"), &episodes).map_err(|e| Failure::Runtime(e.to_string()))?;
        std::fs::write(dir.join("pareto.csv"), &pareto).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    if h.corrupt > 0 {
        eprintln!("skipped {} corrupt lines", h.corrupt);
    }
    if let Some(cs) = constraints {
        let bad = report::reward_mismatches(&h.records, &cs);
        if !bad.is_empty() {
            return Err(Failure::Runtime(format!("{} records carry rewards that do not match their metrics", bad.len())));
        }
    }
    Ok(())
}

fn parse_behavior(s: &str) -> Result<Behavior, Failure> {
    let bad = || Failure::Invalid(format!("unknown behavior `{s}`"));
    let (name, arg) = s.split_once(':').map_or((s, None), |(a, b)| (a, Some(b)));
    let num = |a: Option<&str>| a.and_then(|v| v.parse::<usize>().ok()).ok_or_else(bad);
    Ok(match name {
        "echo" => Behavior::Echo,
        "fixed" => Behavior::Fixed(arg.and_then(|v| v.parse().ok()).ok_or_else(bad)?),
        "malformed-first" => Behavior::MalformedFirst,
        "silent" => Behavior::Silent,
        "wrong-protocol" => Behavior::WrongProtocol,
        "reversed" => Behavior::Reversed(num(arg)?),
        "crash-after" => Behavior::CrashAfter(num(arg)?),
        _ => return Err(bad()),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MORPHNAS_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Search { config, resume, stop_after, seed, episodes, output, parallelism } => {
            run_search_cmd(&config, RunOptions { resume, stop_after }, seed, episodes, output, parallelism)
        }
        Command::Estimate { arch, input } => run_estimate(&arch, input),
        Command::Eval { arch, evaluator, cmd, addr, input, schedule, timeout_ms, retries } => {
            run_eval(&arch, evaluator, cmd, addr, input, schedule, timeout_ms, retries)
        }
        Command::Report { history, config, out } => run_report(&history, config, out),
        Command::EchoWorker { behavior, mode: _ } => parse_behavior(&behavior).and_then(|b| {
            let stdin = std::io::stdin().lock();
            serve(stdin, std::io::stdout().lock(), b).map_err(|e| Failure::Runtime(e.to_string()))
        }),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
