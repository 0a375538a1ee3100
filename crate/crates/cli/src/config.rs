//! The search run file: TOML with one section per component.
//!
//! ```toml
//! seed = 7
//! mode = "layer_net"
//! input = "32x32x3"
//! output = "runs/demo"
//!
//! [reinforce]
//! branches = 8
//! steps = 5
//! episodes = 15
//!
//! [[constraints]]
//! metric = "model_size"
//! upper = 1e5
//!
//! [evaluator]
//! kind = "surrogate"
//! ```

use morphnas::actions::ActionTables;
use morphnas::arch::{Mode, RandomLimits, Shape, StackingTemplate};
use morphnas::evaluation::{
    Endpoint, Evaluator, ExternalConfig, ExternalEvaluator, NativeEvaluator, Schedule, SurrogateEvaluator, TrainConfig,
};
use morphnas::policy::PolicyConfig;
use morphnas::reinforce::EpisodeConfig;
use morphnas::resources::{ConstraintSet, ConstraintSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl ToString) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReinforceSection {
    #[serde(default = "d::branches")]
    pub branches: usize,
    #[serde(default = "d::steps")]
    pub steps: usize,
    #[serde(default = "d::episodes")]
    pub episodes: usize,
    #[serde(default = "d::topk")]
    pub topk: usize,
    #[serde(default = "d::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d::baseline_decay")]
    pub baseline_decay: f64,
}

mod d {
    use morphnas::reinforce::EpisodeConfig;

    pub fn branches() -> usize {
        EpisodeConfig::new(0).branches
    }
    pub fn steps() -> usize {
        EpisodeConfig::new(0).steps
    }
    pub fn episodes() -> usize {
        EpisodeConfig::new(0).episodes
    }
    pub fn topk() -> usize {
        EpisodeConfig::new(0).topk
    }
    pub fn learning_rate() -> f64 {
        EpisodeConfig::new(0).learning_rate
    }
    pub fn baseline_decay() -> f64 {
        EpisodeConfig::new(0).baseline_decay
    }
    pub fn output() -> std::path::PathBuf {
        "morphnas-run".into()
    }
}

impl Default for ReinforceSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields default")
    }
}

/// Bounds of the random starting architectures; domains come from
/// `[actions.space]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSection {
    pub min_layers: usize,
    pub max_layers: usize,
    pub min_branches: usize,
    pub max_branches: usize,
    pub skip_probability: f64,
    pub stacking: StackingTemplate,
}

impl Default for InitialSection {
    fn default() -> Self {
        let r = RandomLimits::default();
        InitialSection {
            min_layers: r.min_layers,
            max_layers: r.max_layers,
            min_branches: r.min_branches,
            max_branches: r.max_branches,
            skip_probability: r.skip_probability,
            stacking: r.stacking,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    #[default]
    Surrogate,
    Native,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorSection {
    #[serde(default)]
    pub kind: EvaluatorKind,
    /// Preset that `[train]` overrides.
    #[serde(default = "predictive")]
    pub schedule: Schedule,
    #[serde(default)]
    pub clear_dictionary_per_episode: bool,
    /// Worker program and arguments (external).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    /// `host:port` of a listening worker (external).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retries: Option<u32>,
    /// Worker connections; defaults to the run's parallelism.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connect_timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connect_attempts: Option<u32>,
}

impl Default for EvaluatorSection {
    fn default() -> Self {
        EvaluatorSection {
            kind: EvaluatorKind::default(),
            schedule: predictive(),
            clear_dictionary_per_episode: false,
            command: None,
            address: None,
            timeout_ms: None,
            retries: None,
            workers: None,
            connect_timeout_ms: None,
            connect_attempts: None,
        }
    }
}

fn predictive() -> Schedule {
    Schedule::Predictive
}

impl EvaluatorSection {
    pub fn external_config(&self, parallelism: usize) -> Result<ExternalConfig, ConfigError> {
        let endpoint = match (&self.command, &self.address) {
            (Some(cmd), None) if !cmd.is_empty() => Endpoint::Command(cmd.clone()),
            (None, Some(addr)) => Endpoint::Address(addr.clone()),
            (Some(_), Some(_)) => return Err(invalid("evaluator", "give either `command` or `address`, not both")),
            _ => return Err(invalid("evaluator", "external evaluation needs `command` or `address`")),
        };
        let mut c = ExternalConfig::new(endpoint);
        c.workers = self.workers.unwrap_or(parallelism).max(1);
        if let Some(v) = self.timeout_ms {
            c.timeout_ms = v;
        }
        if let Some(v) = self.retries {
            c.retries = v;
        }
        if let Some(v) = self.connect_timeout_ms {
            c.connect_timeout_ms = v;
        }
        if let Some(v) = self.connect_attempts {
            c.connect_attempts = v;
        }
        Ok(c)
    }

    pub fn build(&self, parallelism: usize) -> Result<Box<dyn Evaluator>, ConfigError> {
        Ok(match self.kind {
            EvaluatorKind::Surrogate => Box::new(SurrogateEvaluator),
            EvaluatorKind::Native => Box::new(NativeEvaluator::new(self.clear_dictionary_per_episode)),
            EvaluatorKind::External => Box::new(ExternalEvaluator::new(self.external_config(parallelism)?)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: u64,
    #[serde(default = "layer_net")]
    mode: Mode,
    #[serde(default = "default_input")]
    input: Shape,
    #[serde(default = "d::output")]
    output: PathBuf,
    #[serde(default)]
    parallelism: Option<usize>,
    #[serde(default)]
    reinforce: ReinforceSection,
    #[serde(default)]
    constraints: Vec<ConstraintSpec>,
    #[serde(default)]
    evaluator: EvaluatorSection,
    #[serde(default)]
    train: toml::Table,
    #[serde(default)]
    actions: ActionTables,
    #[serde(default)]
    policy: PolicyConfig,
    #[serde(default)]
    initial: InitialSection,
}

fn layer_net() -> Mode {
    Mode::LayerNet
}

fn default_input() -> Shape {
    Shape::new(32, 32, 3)
}

/// A validated run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub input: Shape,
    pub output: PathBuf,
    pub parallelism: usize,
    pub reinforce: ReinforceSection,
    pub constraints: ConstraintSet,
    pub evaluator: EvaluatorSection,
    pub train: TrainConfig,
    pub actions: ActionTables,
    pub policy: PolicyConfig,
    pub initial: InitialSection,
}

/// Applies `overrides` on top of the schedule preset.
pub fn train_config(schedule: Schedule, overrides: &toml::Table) -> Result<TrainConfig, ConfigError> {
    let preset = match schedule {
        Schedule::Full => TrainConfig::full(),
        Schedule::Predictive => TrainConfig::predictive(),
    };
    let mut merged = toml::Table::try_from(&preset).expect("train config is a table");
    for (k, v) in overrides {
        merged.insert(k.clone(), v.clone());
    }
    let cfg: TrainConfig = merged.try_into().map_err(|e: toml::de::Error| invalid("train", e.message()))?;
    cfg.check().map_err(|e| invalid("train", e))?;
    Ok(cfg)
}

impl SearchRunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string().trim_end().to_string()))?;
        raw.resolve()
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::parse(&text)
    }

    pub fn episode(&self) -> EpisodeConfig {
        let r = &self.reinforce;
        EpisodeConfig {
            branches: r.branches,
            steps: r.steps,
            episodes: r.episodes,
            topk: r.topk,
            learning_rate: r.learning_rate,
            baseline_decay: r.baseline_decay,
            seed: self.seed,
        }
    }

    pub fn random_limits(&self) -> RandomLimits {
        let i = &self.initial;
        RandomLimits {
            min_layers: i.min_layers,
            max_layers: i.max_layers,
            min_branches: i.min_branches,
            max_branches: i.max_branches,
            skip_probability: i.skip_probability,
            space: self.actions.space.clone(),
            stacking: i.stacking.clone(),
        }
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        self.episode().check().map_err(|e| invalid("reinforce", e))?;
        for (i, c) in self.constraints.0.iter().enumerate() {
            c.check().map_err(|e| invalid(format!("constraints[{i}]"), e))?;
        }
        self.actions.check().map_err(|e| invalid("actions", e))?;
        if self.parallelism == 0 {
            return Err(invalid("parallelism", "must be at least 1"));
        }
        if self.input.height == 0 || self.input.width == 0 || self.input.channels == 0 {
            return Err(invalid("input", "every dimension must be positive"));
        }
        if self.policy.embed_hidden == 0 || self.policy.head_hidden == 0 {
            return Err(invalid("policy", "hidden sizes must be positive"));
        }
        if self.evaluator.kind == EvaluatorKind::External {
            self.evaluator.external_config(self.parallelism)?;
        }
        Ok(())
    }
}

impl RawConfig {
    fn resolve(self) -> Result<SearchRunConfig, ConfigError> {
        let mut train = train_config(self.evaluator.schedule, &self.train)?;
        train.input_shape = self.input;
        let cfg = SearchRunConfig {
            seed: self.seed,
            mode: self.mode,
            input: self.input,
            output: self.output,
            parallelism: self.parallelism.unwrap_or(self.reinforce.branches),
            reinforce: self.reinforce,
            constraints: ConstraintSet(self.constraints),
            evaluator: self.evaluator,
            train,
            actions: self.actions,
            policy: self.policy,
            initial: self.initial,
        };
        cfg.check()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use morphnas::resources::Metric;

    #[test]
    fn minimal_file_takes_defaults() {
        let c = SearchRunConfig::parse("seed = 3").unwrap();
        assert_eq!((c.seed, c.mode, c.input), (3, Mode::LayerNet, Shape::new(32, 32, 3)));
        assert_eq!(c.parallelism, 8);
        assert_eq!(c.train.schedule, Schedule::Predictive);
        assert_eq!(c.train.input_shape, c.input);
        assert_eq!(c.episode().learning_rate, 0.0006);
    }

    #[test]
    fn seed_is_mandatory() {
        let err = SearchRunConfig::parse("mode = \"cell_net\"").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn inverted_constraint_names_its_entry() {
        let text = "seed = 1\n[[constraints]]\nmetric = \"model_size\"\nupper = 1e5\n[[constraints]]\nmetric = \"compute_complexity\"\nlower = 50\nupper = 10\n";
        let err = SearchRunConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("constraints[1]") && err.contains("ComputeComplexity") && err.contains("lower bound exceeds"), "{err}");
    }

    #[test]
    fn unknown_keys_are_reported_with_location() {
        let err = SearchRunConfig::parse("seed = 1\n[reinforce]\nbranchez = 2\n").unwrap_err().to_string();
        assert!(err.contains("branchez") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn train_overrides_apply_to_preset() {
        let c = SearchRunConfig::parse("seed = 1\n[evaluator]\nkind = \"native\"\nschedule = \"full\"\n[train]\nmax_epochs = 3\n").unwrap();
        assert_eq!((c.train.max_epochs, c.train.batch_size), (3, 128));
        assert!(SearchRunConfig::parse("seed = 1\n[train]\nmax_epochs = 0\n").is_err());
        assert!(SearchRunConfig::parse("seed = 1\n[train]\nepochs = 3\n").is_err());
    }

    #[test]
    fn external_needs_one_endpoint() {
        assert!(SearchRunConfig::parse("seed = 1\n[evaluator]\nkind = \"external\"\n").is_err());
        let c = SearchRunConfig::parse("seed = 1\nparallelism = 3\n[evaluator]\nkind = \"external\"\naddress = \"127.0.0.1:9\"\n").unwrap();
        assert_eq!(c.evaluator.external_config(c.parallelism).unwrap().workers, 3);
    }

    #[test]
    fn resolved_config_round_trips_as_json() {
        let text = "seed = 9\n[[constraints]]\nmetric = \"model_size\"\nupper = 1e5\n";
        let c = SearchRunConfig::parse(text).unwrap();
        assert_eq!(c.constraints.0[0].metric, Metric::ModelSize);
        let back: SearchRunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
