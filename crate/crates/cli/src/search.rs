//! Run lifecycle of `search`: output directory, history stream, checkpoints
//! and the final report.
//!
//! ```text
//! <output>/config.json          resolved configuration
//! <output>/history.jsonl        one candidate per line
//! <output>/checkpoint.json      state after the last finished episode
//! <output>/report.json          reported model, reward decomposition
//! <output>/best_architecture.json
//! ```

use crate::config::{ConfigError, SearchRunConfig};
use morphnas::arch::to_json_value;
use morphnas::policy::PolicyNet;
use morphnas::reinforce::{
    initial_seeds, run_search, Candidate, SearchContext, SearchError, SearchObserver, SearchState,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

pub const HISTORY: &str = "history.jsonl";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const CONFIG: &str = "config.json";
pub const REPORT: &str = "report.json";
pub const BEST: &str = "best_architecture.json";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("evaluator unreachable: {0}")]
    Unreachable(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Search(SearchError),
}

impl From<SearchError> for RunError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Unreachable(m) => RunError::Unreachable(m),
            other => RunError::Search(other),
        }
    }
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> RunError {
    let context = context.into();
    move |source| RunError::Io { context, source }
}

/// Writes through a temporary file and a rename, so `path` is either the old
/// or the complete new content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        // persists the rename where the platform allows opening directories
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config_sha256: String,
    state: SearchState,
}

/// Hash of everything that determines the run's results.
fn fingerprint(cfg: &SearchRunConfig) -> String {
    let mut c = cfg.clone();
    c.output = PathBuf::new();
    c.parallelism = 0;
    let digest = Sha256::digest(serde_json::to_vec(&c).expect("config serializes"));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct RunObserver {
    history: BufWriter<File>,
    checkpoint: PathBuf,
    config_sha256: String,
    stop_after: Option<usize>,
    episodes_done: usize,
}

impl SearchObserver for RunObserver {
    fn on_step(&mut self, records: &[Candidate]) -> Result<(), String> {
        for r in records {
            serde_json::to_writer(&mut self.history, r).map_err(|e| e.to_string())?;
            self.history.write_all(b"\n").map_err(|e| e.to_string())?;
        }
        self.history.flush().map_err(|e| format!("writing history: {e}"))
    }

    fn on_episode(&mut self, state: &SearchState) -> Result<ControlFlow<()>, String> {
        self.history.flush().map_err(|e| format!("writing history: {e}"))?;
        self.history.get_ref().sync_data().map_err(|e| format!("syncing history: {e}"))?;
        let cp = Checkpoint { config_sha256: self.config_sha256.clone(), state: state.clone() };
        let bytes = serde_json::to_vec(&cp).map_err(|e| e.to_string())?;
        write_atomic(&self.checkpoint, &bytes).map_err(|e| format!("writing checkpoint: {e}"))?;
        self.episodes_done += 1;
        Ok(match self.stop_after {
            Some(n) if self.episodes_done >= n => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        })
    }
}

/// Cuts the history back to the records covered by the checkpoint.
fn truncate_history(path: &Path, keep: usize) -> Result<(), RunError> {
    let mut offset = 0u64;
    if keep > 0 {
        let f = File::open(path).map_err(io(format!("opening {}", path.display())))?;
        let mut reader = BufReader::new(f);
        let mut line = Vec::new();
        for i in 0..keep {
            line.clear();
            let n = reader.read_until(b'\n', &mut line).map_err(io("reading history"))?;
            if n == 0 || line.last() != Some(&b'\n') {
                return Err(RunError::Usage(format!("history holds {i} complete records, checkpoint expects {keep}")));
            }
            offset += n as u64;
        }
    }
    let f = OpenOptions::new().write(true).create(true).truncate(false).open(path).map_err(io("opening history"))?;
    f.set_len(offset).map_err(io("truncating history"))?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop after this many episodes in this invocation.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct ConstraintTerm {
    pub metric: morphnas::resources::Metric,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    pub violation: f64,
}

#[derive(Debug, Serialize)]
pub struct Reported {
    pub episode: usize,
    pub branch: usize,
    pub step: usize,
    pub architecture: serde_json::Value,
    pub usage: Option<morphnas::resources::UsageReport>,
    pub performance: Option<f64>,
    pub constraints: Vec<ConstraintTerm>,
    pub reward: f64,
    pub satisfied: bool,
}

impl Reported {
    fn new(c: &Candidate, cfg: &SearchRunConfig) -> Self {
        let constraints = cfg
            .constraints
            .0
            .iter()
            .zip(&c.violations)
            .map(|(spec, &violation)| ConstraintTerm {
                metric: spec.metric,
                value: c.usage.map_or(f64::NAN, |u| u.metric(spec.metric)),
                lower: spec.lower,
                upper: spec.upper,
                violation,
            })
            .collect();
        Reported {
            episode: c.episode,
            branch: c.branch,
            step: c.step,
            architecture: to_json_value(&c.architecture),
            usage: c.usage.map(|u| u.report()),
            performance: c.performance,
            constraints,
            reward: c.reward,
            satisfied: c.satisfied,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FinalReport {
    pub completed: bool,
    pub episodes_run: usize,
    pub candidates: usize,
    /// Best candidate within every constraint, else the best overall.
    pub selected: Option<Reported>,
    pub best_by_reward: Option<Reported>,
}

pub fn cmd_search(cfg: &SearchRunConfig, opts: &RunOptions) -> Result<FinalReport, RunError> {
    let out = &cfg.output;
    std::fs::create_dir_all(out).map_err(io(format!("creating {}", out.display())))?;
    let history_path = out.join(HISTORY);
    let checkpoint_path = out.join(CHECKPOINT);
    let sha = fingerprint(cfg);

    let net = PolicyNet::new(cfg.mode, cfg.actions.clone(), cfg.policy.clone());
    let ctx = SearchContext::new(cfg.episode(), cfg.constraints.clone(), cfg.input, cfg.train.clone());

    let existing = checkpoint_path.exists();
    if existing && !opts.resume {
        return Err(RunError::Usage(format!("{} already holds a run; pass --resume to continue it", out.display())));
    }
    let state = if existing {
        let text = std::fs::read(&checkpoint_path).map_err(io("reading checkpoint"))?;
        let cp: Checkpoint =
            serde_json::from_slice(&text).map_err(|e| RunError::Usage(format!("corrupt checkpoint: {e}")))?;
        if cp.config_sha256 != sha {
            return Err(RunError::Usage("configuration differs from the checkpointed run".into()));
        }
        truncate_history(&history_path, cp.state.history_len)?;
        log::info!("resuming at episode {}", cp.state.episode);
        cp.state
    } else {
        truncate_history(&history_path, 0)?;
        let seeds = initial_seeds(cfg.seed, cfg.mode, &cfg.random_limits(), cfg.input, cfg.reinforce.branches);
        SearchState::new(&net, &ctx, seeds)
    };
    let config_json = serde_json::to_vec_pretty(cfg).expect("config serializes");
    write_atomic(&out.join(CONFIG), &config_json).map_err(io("writing config.json"))?;

    let history = OpenOptions::new().append(true).open(&history_path).map_err(io("opening history"))?;
    let mut observer = RunObserver {
        history: BufWriter::new(history),
        checkpoint: checkpoint_path,
        config_sha256: sha,
        stop_after: opts.stop_after,
        episodes_done: 0,
    };
    let mut evaluator = cfg.evaluator.build(cfg.parallelism)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| RunError::Usage(format!("thread pool: {e}")))?;
    let result = pool.install(|| run_search(&ctx, &net, evaluator.as_mut(), state, &mut observer))?;

    let report = FinalReport {
        completed: result.completed,
        episodes_run: result.state.episode,
        candidates: result.state.history_len,
        selected: result.selected().map(|c| Reported::new(c, cfg)),
        best_by_reward: result.best().map(|c| Reported::new(c, cfg)),
    };
    if result.completed {
        let text = serde_json::to_vec_pretty(&report).expect("report serializes");
        write_atomic(&out.join(REPORT), &text).map_err(io("writing report"))?;
        if let Some(c) = result.selected() {
            let arch = morphnas::arch::to_json(&c.architecture).map_err(|e| RunError::Usage(e.to_string()))?;
            write_atomic(&out.join(BEST), arch.as_bytes()).map_err(io("writing best architecture"))?;
        }
    }
    Ok(report)
}
