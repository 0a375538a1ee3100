//! Policy-gradient training of the controller.
//!
//! An episode runs `N` branches in lock step for `T` steps. At every step
//! each branch samples an action bundle, morphs its current architecture and
//! the `N` resulting candidates are evaluated as one batch. After the episode
//! the controller ascends
//!
//! ```text
//! g = (1/N) Σ_n Σ_t ∇log π(a_tn | X_tn) · (R_tn − b)
//! ```
//!
//! where `R_tn` is the undiscounted return-to-go and `b` an exponential moving
//! average of batch-mean returns. The best distinct candidates of the episode
//! seed the next one.

use crate::actions::{apply_bundle, ActionBundle, ActionTables};
use crate::arch::{random_architecture, to_json_value, Architecture, Mode, RandomLimits, Shape};
use crate::codec;
use crate::evaluation::{EvalRequest, EvalResult, Evaluator, TrainConfig};
use crate::policy::{ParamSet, PolicyError, PolicyNet, SampledStep};
use crate::resources::{estimate, violations, ConstraintSet, ResourceUsage};
use crate::seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::ops::ControlFlow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    #[serde(default = "defaults::branches")]
    pub branches: usize,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::episodes")]
    pub episodes: usize,
    #[serde(default = "defaults::topk")]
    pub topk: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::baseline_decay")]
    pub baseline_decay: f64,
    pub seed: u64,
}

mod defaults {
    pub fn branches() -> usize {
        8
    }
    pub fn steps() -> usize {
        5
    }
    pub fn episodes() -> usize {
        15
    }
    pub fn topk() -> usize {
        8
    }
    pub fn learning_rate() -> f64 {
        0.0006
    }
    pub fn baseline_decay() -> f64 {
        0.95
    }
}

impl EpisodeConfig {
    pub fn new(seed: u64) -> Self {
        EpisodeConfig {
            branches: defaults::branches(),
            steps: defaults::steps(),
            episodes: defaults::episodes(),
            topk: defaults::topk(),
            learning_rate: defaults::learning_rate(),
            baseline_decay: defaults::baseline_decay(),
            seed,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.branches == 0 || self.steps == 0 || self.episodes == 0 {
            return Err("branches, steps and episodes must be at least 1".into());
        }
        if self.topk == 0 || self.topk > self.branches * self.steps {
            return Err(format!("topk must lie in 1..={} (candidates per episode)", self.branches * self.steps));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err("baseline_decay must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Undiscounted returns: `R_t = r_t + R_{t+1}`.
pub fn returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub arch_before: Architecture,
    pub bundle: ActionBundle,
    pub logprob: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub branch: usize,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn returns(&self) -> Vec<f64> {
        returns_to_go(&self.steps.iter().map(|s| s.reward).collect::<Vec<_>>())
    }
}

/// Moving-average baseline; unset until the first batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: Option<f64>,
    pub decay: f64,
}

impl Baseline {
    pub fn new(decay: f64) -> Self {
        Baseline { value: None, decay }
    }

    pub fn get(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }
}

/// Folds the batch-mean return of `trajs` into the baseline. The first batch
/// sets it directly.
pub fn update_baseline(state: &Baseline, trajs: &[Trajectory]) -> Baseline {
    let returns: Vec<f64> = trajs.iter().flat_map(Trajectory::returns).collect();
    if returns.is_empty() {
        return *state;
    }
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let value = match state.value {
        None => mean,
        Some(b) => state.decay * b + (1.0 - state.decay) * mean,
    };
    Baseline { value: Some(value), decay: state.decay }
}

/// The batch policy gradient, summed in branch order.
pub fn policy_gradient(
    net: &PolicyNet,
    params: &ParamSet,
    trajs: &[Trajectory],
    baseline: f64,
) -> Result<ParamSet, PolicyError> {
    let n = trajs.len().max(1) as f64;
    let per_branch: Vec<ParamSet> = trajs
        .par_iter()
        .map(|traj| {
            let mut g = net.zero_params();
            for (step, ret) in traj.steps.iter().zip(traj.returns()) {
                let advantage = ret - baseline;
                if advantage != 0.0 {
                    net.accumulate_grad(params, &step.arch_before, &step.bundle, advantage / n, 0.0, &mut g)?;
                }
            }
            Ok(g)
        })
        .collect::<Result<_, PolicyError>>()?;
    let mut total = net.zero_params();
    for g in &per_branch {
        for (t, v) in total.data.iter_mut().zip(&g.data) {
            *t += v;
        }
    }
    Ok(total)
}

/// Adam, ascending the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(with = "codec::f64s")]
    pub m: Vec<f64>,
    #[serde(with = "codec::f64s")]
    pub v: Vec<f64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimizerError {
    #[error("gradient has {count} non-finite entries, first in tensor `{tensor}`")]
    NonFinite { count: usize, tensor: String },
    #[error("gradient holds {got} values, optimizer expects {want}")]
    Shape { got: usize, want: usize },
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn update(&mut self, params: &mut ParamSet, grad: &ParamSet) -> Result<(), OptimizerError> {
        if grad.data.len() != self.m.len() || params.data.len() != self.m.len() {
            return Err(OptimizerError::Shape { got: grad.data.len(), want: self.m.len() });
        }
        let bad = grad.data.iter().filter(|g| !g.is_finite()).count();
        if bad > 0 {
            let first = grad.data.iter().position(|g| !g.is_finite()).expect("bad > 0");
            let tensor = grad
                .specs()
                .iter()
                .find(|s| (s.offset..s.offset + s.len()).contains(&first))
                .map_or_else(|| "?".to_string(), |s| s.name.clone());
            return Err(OptimizerError::NonFinite { count: bad, tensor });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..self.m.len() {
            let g = grad.data[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params.data[i] += self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One evaluated candidate; also the history-stream record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub episode: usize,
    pub branch: usize,
    pub step: usize,
    pub architecture: Architecture,
    pub action: ActionBundle,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub performance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<ResourceUsage>,
    pub violations: Vec<f64>,
    pub reward: f64,
    pub satisfied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, serde_json::Value>,
}

impl Candidate {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    fn serialization(&self) -> String {
        to_json_value(&self.architecture).to_string()
    }
}

/// Ranking: reward descending, then fewer params, then canonical
/// serialization.
pub fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    let params = |c: &Candidate| c.usage.map_or(u64::MAX, |u| u.params);
    b.reward
        .total_cmp(&a.reward)
        .then(params(a).cmp(&params(b)))
        .then_with(|| a.serialization().cmp(&b.serialization()))
}

/// The `k` best distinct successful architectures, repeated cyclically to
/// `n` entries. Empty when every candidate failed.
pub fn select_topk(pool: &[Candidate], k: usize, n: usize) -> Vec<Architecture> {
    let mut ranked: Vec<&Candidate> = pool.iter().filter(|c| !c.failed()).collect();
    ranked.sort_by(|a, b| rank(a, b));
    let mut seen = HashSet::new();
    let top: Vec<Architecture> = ranked
        .into_iter()
        .filter(|c| seen.insert(c.serialization()))
        .take(k)
        .map(|c| c.architecture.clone())
        .collect();
    if top.is_empty() {
        return top;
    }
    top.iter().cycle().take(n).cloned().collect()
}

/// Samples action bundles; implemented by the policy and by test doubles.
pub trait ActionSampler: Sync {
    fn tables(&self) -> &ActionTables;

    fn sample(&self, params: &ParamSet, arch: &Architecture, seed: u64) -> Result<SampledStep, PolicyError>;
}

impl ActionSampler for PolicyNet {
    fn tables(&self) -> &ActionTables {
        &self.tables
    }

    fn sample(&self, params: &ParamSet, arch: &Architecture, seed: u64) -> Result<SampledStep, PolicyError> {
        PolicyNet::sample(self, params, arch, seed)
    }
}

/// Fixed inputs of a search.
#[derive(Clone, Debug)]
pub struct SearchContext {
    pub episode: EpisodeConfig,
    pub constraints: ConstraintSet,
    pub input: Shape,
    /// Sent with every request; its input shape is forced to `input`.
    pub train_config: TrainConfig,
}

impl SearchContext {
    pub fn new(episode: EpisodeConfig, constraints: ConstraintSet, input: Shape, mut train_config: TrainConfig) -> Self {
        train_config.input_shape = input;
        SearchContext { episode, constraints, input, train_config }
    }
}

/// Everything needed to continue a search at an episode boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    /// Next episode to run.
    pub episode: usize,
    #[serde(with = "param_set")]
    pub params: ParamSet,
    pub optimizer: Adam,
    pub baseline: Baseline,
    pub seeds: Vec<Architecture>,
    pub best: Option<Candidate>,
    /// Best candidate meeting every constraint exactly.
    pub best_feasible: Option<Candidate>,
    /// History records emitted so far.
    pub history_len: usize,
    pub evaluator: serde_json::Value,
}

mod param_set {
    use crate::policy::ParamSet;
    use base64::engine::general_purpose::STANDARD as B64;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &ParamSet, s: S) -> Result<S::Ok, S::Error> {
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).map_err(serde::ser::Error::custom)?;
        s.serialize_str(&B64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ParamSet, D::Error> {
        use serde::de::Error;
        let bytes = B64.decode(String::deserialize(d)?.as_bytes()).map_err(D::Error::custom)?;
        ParamSet::read_from(bytes.as_slice()).map_err(D::Error::custom)
    }
}

/// `n` random architectures that the estimator accepts at `input`.
pub fn initial_seeds(root: u64, mode: Mode, limits: &RandomLimits, input: Shape, n: usize) -> Vec<Architecture> {
    let mut out = Vec::with_capacity(n);
    let mut i = 0u64;
    while out.len() < n {
        let arch = random_architecture(seed::derive(root, "initial", &[i]), mode, limits);
        i += 1;
        let lowered_ok = match &arch {
            Architecture::Layers(_) => estimate(&arch, input).is_ok(),
            Architecture::Cell { .. } => {
                crate::arch::expand_stack(&arch, input).is_ok_and(|l| estimate(&l, input).is_ok())
            }
        };
        if lowered_ok {
            out.push(arch);
        }
        assert!(i < 10_000 * n as u64 + 10_000, "no estimable random architecture at {input}");
    }
    out
}

impl SearchState {
    pub fn new(net: &PolicyNet, ctx: &SearchContext, seeds: Vec<Architecture>) -> Self {
        let params = net.init_params(seed::derive(ctx.episode.seed, "policy.init", &[]));
        SearchState {
            episode: 0,
            optimizer: Adam::new(params.data.len(), ctx.episode.learning_rate),
            params,
            baseline: Baseline::new(ctx.episode.baseline_decay),
            seeds,
            best: None,
            best_feasible: None,
            history_len: 0,
            evaluator: serde_json::Value::Null,
        }
    }
}

impl SearchState {
    pub fn selected(&self) -> Option<&Candidate> {
        self.best_feasible.as_ref().or(self.best.as_ref())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("optimizer: {0}")]
    Optimizer(#[from] OptimizerError),
    #[error("evaluator unreachable: {0}")]
    Unreachable(String),
    #[error("evaluator state: {0}")]
    Evaluator(String),
    #[error("{0}")]
    Observer(String),
    #[error("state does not fit the configuration: {0}")]
    State(String),
}

/// Receives history records as they are produced and the search state at
/// every episode boundary.
pub trait SearchObserver {
    fn on_step(&mut self, _records: &[Candidate]) -> Result<(), String> {
        Ok(())
    }

    fn on_episode(&mut self, _state: &SearchState) -> Result<ControlFlow<()>, String> {
        Ok(ControlFlow::Continue(()))
    }
}

impl SearchObserver for () {}

/// Collects the history in memory.
impl SearchObserver for Vec<Candidate> {
    fn on_step(&mut self, records: &[Candidate]) -> Result<(), String> {
        self.extend_from_slice(records);
        Ok(())
    }
}

fn score(
    ctx: &SearchContext,
    episode: usize,
    branch: usize,
    step: usize,
    arch: Architecture,
    sampled: &SampledStep,
    usage: Result<ResourceUsage, String>,
    result: Option<EvalResult>,
) -> Candidate {
    let mut c = Candidate {
        episode,
        branch,
        step,
        architecture: arch,
        action: sampled.bundle.clone(),
        logprob: sampled.logprob,
        performance: None,
        usage: usage.as_ref().ok().copied(),
        violations: Vec::new(),
        reward: 0.0,
        satisfied: false,
        error: None,
        metrics: BTreeMap::new(),
    };
    let usage = match usage {
        Ok(u) => u,
        Err(e) => {
            c.error = Some(e);
            return c;
        }
    };
    let result = result.expect("estimable candidates are evaluated");
    c.metrics = result.metrics.clone();
    let Some(perf) = result.usable_performance() else {
        c.error = Some(result.error_message.unwrap_or_else(|| "evaluator returned no usable performance".into()));
        return c;
    };
    c.performance = Some(perf);
    match violations(&usage, &ctx.constraints) {
        Ok(v) => {
            c.reward = v.iter().fold(perf, |r, f| r * f);
            c.violations = v;
            c.satisfied = ctx.constraints.satisfied(&usage);
        }
        Err(e) => c.error = Some(e.to_string()),
    }
    c
}

fn usage_of(arch: &Architecture, input: Shape) -> Result<ResourceUsage, String> {
    let lowered = match arch {
        Architecture::Layers(_) => arch.clone(),
        Architecture::Cell { .. } => crate::arch::expand_stack(arch, input).map_err(|e| e.to_string())?,
    };
    estimate(&lowered, input).map_err(|e| e.to_string())
}

/// Runs one episode from `seeds`. Records go to `observer` step by step.
pub fn run_episode(
    ctx: &SearchContext,
    sampler: &dyn ActionSampler,
    params: &ParamSet,
    seeds: &[Architecture],
    episode: usize,
    evaluator: &mut dyn Evaluator,
    observer: &mut dyn SearchObserver,
) -> Result<(Vec<Trajectory>, Vec<Candidate>), SearchError> {
    let root = ctx.episode.seed;
    let mut current: Vec<Architecture> = seeds.to_vec();
    let mut trajs: Vec<Trajectory> = (0..current.len()).map(|branch| Trajectory { branch, steps: Vec::new() }).collect();
    let mut pool = Vec::new();
    for step in 0..ctx.episode.steps {
        let sampled: Vec<SampledStep> = current
            .par_iter()
            .enumerate()
            .map(|(b, arch)| sampler.sample(params, arch, seed::derive(root, "policy.sample", &[episode as u64, b as u64, step as u64])))
            .collect::<Result<_, _>>()?;
        let mut next = Vec::with_capacity(current.len());
        let mut usages = Vec::with_capacity(current.len());
        let mut requests = Vec::new();
        for (b, (arch, s)) in current.iter().zip(&sampled).enumerate() {
            let (child, usage) = match apply_bundle(arch, &s.bundle, sampler.tables()) {
                Ok(child) => {
                    let usage = usage_of(&child, ctx.input);
                    (child, usage)
                }
                Err(e) => (arch.clone(), Err(format!("action rejected: {e}"))),
            };
            if usage.is_ok() {
                requests.push(EvalRequest {
                    id: format!("e{episode}b{b}s{step}"),
                    architecture: child.clone(),
                    train_config: ctx.train_config.clone(),
                    constraints_echo: None,
                });
            }
            next.push(child);
            usages.push(usage);
        }
        let results = evaluator.evaluate_batch(&requests).map_err(|e| SearchError::Unreachable(e.0))?;
        evaluator.end_step();
        let mut results = results.into_iter();
        let mut records = Vec::with_capacity(current.len());
        for (b, (child, usage)) in next.iter().zip(usages).enumerate() {
            let result = if usage.is_ok() { results.next() } else { None };
            let c = score(ctx, episode, b, step, child.clone(), &sampled[b], usage, result);
            trajs[b].steps.push(TrajectoryStep {
                arch_before: current[b].clone(),
                bundle: sampled[b].bundle.clone(),
                logprob: sampled[b].logprob,
                reward: c.reward,
            });
            records.push(c);
        }
        observer.on_step(&records).map_err(SearchError::Observer)?;
        pool.extend(records);
        current = next;
    }
    Ok((trajs, pool))
}

/// Outcome of [`run_search`].
#[derive(Clone, Debug)]
pub struct SearchResult {
    pub state: SearchState,
    /// False when the observer stopped the run early.
    pub completed: bool,
}

impl SearchResult {
    /// Highest-reward candidate overall.
    pub fn best(&self) -> Option<&Candidate> {
        self.state.best.as_ref()
    }

    /// The reported model: the best candidate within all constraints, or the
    /// best overall when none satisfies them.
    pub fn selected(&self) -> Option<&Candidate> {
        self.state.selected()
    }
}

/// Runs episodes from `state.episode` up to the configured count. The policy
/// gradient is evaluated with `net`; bundles come from `sampler`, which is
/// normally the same policy.
pub fn run_search_with(
    ctx: &SearchContext,
    net: &PolicyNet,
    sampler: &dyn ActionSampler,
    evaluator: &mut dyn Evaluator,
    mut state: SearchState,
    observer: &mut dyn SearchObserver,
) -> Result<SearchResult, SearchError> {
    let cfg = &ctx.episode;
    if state.seeds.len() != cfg.branches {
        return Err(SearchError::State(format!("{} seeds for {} branches", state.seeds.len(), cfg.branches)));
    }
    if state.optimizer.m.len() != state.params.data.len() {
        return Err(SearchError::State("optimizer and parameter sizes differ".into()));
    }
    if state.episode > 0 {
        evaluator.restore(&state.evaluator).map_err(SearchError::Evaluator)?;
    }
    while state.episode < cfg.episodes {
        let e = state.episode;
        let (trajs, pool) = run_episode(ctx, sampler, &state.params, &state.seeds, e, evaluator, observer)?;
        state.baseline = update_baseline(&state.baseline, &trajs);
        let grad = policy_gradient(net, &state.params, &trajs, state.baseline.get())?;
        state.optimizer.update(&mut state.params, &grad)?;
        let seeds = select_topk(&pool, cfg.topk, cfg.branches);
        if !seeds.is_empty() {
            state.seeds = seeds;
        }
        for c in pool.iter().filter(|c| !c.failed()) {
            if state.best.as_ref().is_none_or(|b| rank(c, b) == Ordering::Less) {
                state.best = Some(c.clone());
            }
            if c.satisfied && state.best_feasible.as_ref().is_none_or(|b| rank(c, b) == Ordering::Less) {
                state.best_feasible = Some(c.clone());
            }
        }
        evaluator.end_episode();
        state.episode += 1;
        state.history_len += pool.len();
        state.evaluator = evaluator.snapshot();
        log::info!(
            "episode {e}: best reward {:.4}, baseline {:.4}",
            pool.iter().map(|c| c.reward).fold(0.0, f64::max),
            state.baseline.get()
        );
        if observer.on_episode(&state).map_err(SearchError::Observer)?.is_break() {
            return Ok(SearchResult { completed: state.episode == cfg.episodes, state });
        }
    }
    Ok(SearchResult { state, completed: true })
}

/// [`run_search_with`] sampling from the policy itself.
pub fn run_search(
    ctx: &SearchContext,
    net: &PolicyNet,
    evaluator: &mut dyn Evaluator,
    state: SearchState,
    observer: &mut dyn SearchObserver,
) -> Result<SearchResult, SearchError> {
    run_search_with(ctx, net, net, evaluator, state, observer)
}
