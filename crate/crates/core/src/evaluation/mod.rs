//! Candidate evaluation: requests, results and the [`Evaluator`] trait with
//! its three implementations (surrogate, native trainer, external worker).

pub mod dataset;
pub mod dictionary;
pub mod external;
pub mod native;
pub mod nn;
pub mod protocol;
pub mod schedule;
pub mod surrogate;

pub use external::{Endpoint, ExternalConfig, ExternalEvaluator};
pub use dictionary::{merge_dictionary, splice_or_pad, Contribution, DictKey, WeightDictionary};
pub use native::{native_train_evaluate, NativeEvaluator};
pub use schedule::cosine_lr;
pub use surrogate::{surrogate_performance, SurrogateEvaluator};

use crate::arch::{Architecture, Shape};
use crate::resources::ConstraintSet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Full,
    Predictive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Length of the first restart period, in epochs.
    pub t_0: usize,
    /// Period growth factor at each restart.
    pub t_mul: usize,
    pub momentum: f64,
    pub dataset_seed: u64,
    /// Seeds fresh weights and batch order.
    pub init_seed: u64,
    /// Network input and dataset sample shape; also the shape resources are
    /// estimated at.
    pub input_shape: Shape,
    pub classes: usize,
    pub noise: f64,
    pub train_samples: usize,
    pub val_samples: usize,
}

impl TrainConfig {
    pub fn full() -> Self {
        TrainConfig {
            schedule: Schedule::Full,
            max_epochs: 20,
            batch_size: 128,
            lr_max: 0.05,
            lr_min: 0.001,
            t_0: 10,
            t_mul: 2,
            momentum: 0.9,
            dataset_seed: 0,
            init_seed: 0,
            input_shape: Shape::new(8, 8, 1),
            classes: 4,
            noise: 0.3,
            train_samples: 2048,
            val_samples: 512,
        }
    }

    /// Early-stopped variant: batch ×8 with the learning rates scaled by the
    /// same factor.
    pub fn predictive() -> Self {
        TrainConfig {
            schedule: Schedule::Predictive,
            max_epochs: 10,
            batch_size: 1024,
            lr_max: 0.4,
            lr_min: 0.008,
            ..TrainConfig::full()
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.t_0 == 0 || self.t_mul == 0 {
            return Err("max_epochs, batch_size, t_0 and t_mul must be positive".into());
        }
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0 && self.lr_max.is_finite()) {
            return Err("need 0 <= lr_min <= lr_max".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err("momentum must lie in [0, 1)".into());
        }
        if self.classes < 2 || self.train_samples == 0 || self.val_samples == 0 {
            return Err("dataset needs at least 2 classes and non-empty splits".into());
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::full()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub id: String,
    pub architecture: Architecture,
    pub train_config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints_echo: Option<ConstraintSet>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub id: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub performance: Option<f64>,
    #[serde(default)]
    pub metrics: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
}

impl EvalResult {
    pub fn ok(id: impl Into<String>, performance: f64) -> Self {
        EvalResult {
            id: id.into(),
            status: Status::Ok,
            performance: Some(performance),
            metrics: BTreeMap::new(),
            error_message: None,
        }
    }

    pub fn error(id: impl Into<String>, message: impl Into<String>) -> Self {
        EvalResult {
            id: id.into(),
            status: Status::Error,
            performance: None,
            metrics: BTreeMap::new(),
            error_message: Some(message.into()),
        }
    }

    /// The performance if the result is usable: status ok and P in [0, 1].
    pub fn usable_performance(&self) -> Option<f64> {
        match (self.status, self.performance) {
            (Status::Ok, Some(p)) if (0.0..=1.0).contains(&p) => Some(p),
            _ => None,
        }
    }
}

/// The evaluator cannot be reached at all; the search cannot continue.
#[derive(Debug, thiserror::Error)]
#[error("evaluator unreachable: {0}")]
pub struct Unreachable(pub String);

/// Scores candidates. A search calls [`Evaluator::evaluate_batch`] once per
/// step with one request per branch, then [`Evaluator::end_step`].
pub trait Evaluator: Send {
    fn name(&self) -> &'static str;

    /// Results in request order. Per-candidate failures are `status=error`
    /// results; `Err` means the evaluator is down.
    fn evaluate_batch(&mut self, requests: &[EvalRequest]) -> Result<Vec<EvalResult>, Unreachable>;

    fn end_step(&mut self) {}

    fn end_episode(&mut self) {}

    /// Serializable state for checkpoints.
    fn snapshot(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    fn restore(&mut self, _state: &serde_json::Value) -> Result<(), String> {
        Ok(())
    }
}
