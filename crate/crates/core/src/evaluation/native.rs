//! Built-in trainer: compiles a candidate with [`Network`], warm-starts it
//! from the weight dictionary and trains it with Nesterov momentum SGD under
//! the cosine schedule on the synthetic dataset.

use super::dataset::{Dataset, Split};
use super::dictionary::{merge_dictionary, splice_or_pad, Contribution, DictKey, RoleTensors, StoredTensor, WeightDictionary};
use super::nn::{fresh_value, BatchStats, Network, Tensor, Weights};
use super::schedule::cosine_lr;
use super::{EvalRequest, EvalResult, Evaluator, TrainConfig, Unreachable};
use crate::arch::Architecture;
use crate::seed;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Samples per gradient chunk. Fixed so results do not depend on the number
/// of worker threads.
pub const CHUNK: usize = 32;

pub fn dict_key(net: &Network, node: usize) -> DictKey {
    let l = &net.graph.nodes[node].layer;
    DictKey { layer_index: node, op_kind: l.op_kind, filter_width: l.filter_width, activation: l.activation }
}

/// Initial weights: tensors whose layer key and role are in `dict` are spliced
/// from it, everything else (the head always) is fresh. Returns the weights
/// and the number of tensors taken from the dictionary.
pub fn warm_start(net: &Network, dict: &WeightDictionary, init_seed: u64) -> (Weights, usize) {
    let mut hits = 0;
    let weights = net
        .params
        .iter()
        .map(|p| {
            let fresh = fresh_value(p, &mut net.param_rng(init_seed, p));
            let stored = p.node.and_then(|n| dict.get(&dict_key(net, n))).and_then(|e| e.tensors.get(&p.role));
            match stored.and_then(|s| splice_or_pad(s, &p.shape, &p.centered_axes(), fresh.clone()).ok()) {
                Some(v) => {
                    hits += 1;
                    v
                }
                None => fresh,
            }
        })
        .collect();
    (weights, hits)
}

/// Per-layer tensors of a trained model, head excluded.
pub fn export(net: &Network, weights: &Weights) -> BTreeMap<DictKey, RoleTensors> {
    let mut out: BTreeMap<DictKey, RoleTensors> = BTreeMap::new();
    for (p, v) in net.params.iter().zip(weights) {
        if let Some(n) = p.node {
            out.entry(dict_key(net, n))
                .or_default()
                .insert(p.role.clone(), StoredTensor { shape: p.shape.clone(), data: v.clone() });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Best validation accuracy.
    pub performance: f64,
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    /// Weights at the best validation epoch.
    pub best_weights: Weights,
}

fn batch_tensor(split: &Split, idx: &[usize], net: &Network) -> (Tensor, Vec<usize>) {
    let samples: Vec<&[f64]> = idx.iter().map(|&i| split.images[i].as_slice()).collect();
    (Tensor::from_samples(&samples, net.graph.input), idx.iter().map(|&i| split.labels[i]).collect())
}

pub fn evaluate_split(net: &Network, weights: &Weights, split: &Split) -> BatchStats {
    let idx: Vec<usize> = (0..split.len()).collect();
    idx.par_chunks(CHUNK)
        .map(|c| {
            let (x, y) = batch_tensor(split, c, net);
            net.evaluate(weights, &x, &y)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(BatchStats::default(), BatchStats::merge)
}

/// Mean loss and gradient over the samples `idx`.
fn batch_gradient(net: &Network, weights: &Weights, split: &Split, idx: &[usize]) -> (BatchStats, Weights) {
    let parts: Vec<(BatchStats, Weights)> = idx
        .par_chunks(CHUNK)
        .map(|c| {
            let (x, y) = batch_tensor(split, c, net);
            let mut g = net.zeros();
            let s = net.loss_grad(weights, &x, &y, &mut g);
            (s, g)
        })
        .collect();
    let mut iter = parts.into_iter();
    let (mut stats, mut grad) = iter.next().expect("non-empty batch");
    for (s, g) in iter {
        stats = stats.merge(s);
        for (a, b) in grad.iter_mut().zip(g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    let scale = 1.0 / idx.len() as f64;
    grad.iter_mut().flatten().for_each(|v| *v *= scale);
    (stats, grad)
}

/// Global gradient norm cap applied before each momentum update.
pub const MAX_GRAD_NORM: f64 = 5.0;

pub fn train(net: &Network, mut weights: Weights, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, String> {
    cfg.check()?;
    let n = data.train.len();
    let iters = n.div_ceil(cfg.batch_size);
    let mut velocity = net.zeros();
    let mut out = TrainOutcome {
        performance: 0.0,
        train_loss: Vec::with_capacity(cfg.max_epochs),
        val_accuracy: Vec::with_capacity(cfg.max_epochs),
        best_epoch: 0,
        best_weights: weights.clone(),
    };
    let mut best = f64::NEG_INFINITY;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::stream(cfg.init_seed, "batch_order", &[epoch as u64]));
        let mut loss_sum = 0.0;
        for (it, idx) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cosine_lr(epoch as f64 + it as f64 / iters as f64, cfg);
            let (stats, grad) = batch_gradient(net, &weights, &data.train, idx);
            if !stats.loss_sum.is_finite() {
                return Err(format!("non-finite training loss at epoch {epoch}"));
            }
            loss_sum += stats.loss_sum;
            let norm = grad.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            let clip = if norm > MAX_GRAD_NORM { MAX_GRAD_NORM / norm } else { 1.0 };
            for ((w, v), g) in weights.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                    let g = g * clip;
                    *v = cfg.momentum * *v + g;
                    *w -= lr * (g + cfg.momentum * *v);
                }
            }
        }
        out.train_loss.push(loss_sum / n as f64);
        let val = evaluate_split(net, &weights, &data.val);
        let acc = val.correct as f64 / val.count as f64;
        out.val_accuracy.push(acc);
        if acc > best {
            best = acc;
            out.best_epoch = epoch;
            out.best_weights.clone_from(&weights);
        }
    }
    out.performance = best;
    Ok(out)
}

/// Trains one candidate against a read-only dictionary snapshot. The
/// contribution is returned for the step-end merge.
pub fn native_train_evaluate(request: &EvalRequest, dict: &WeightDictionary) -> (EvalResult, Option<Contribution>) {
    let cfg = &request.train_config;
    let run = || -> Result<(EvalResult, Contribution), String> {
        let net = Network::new(&request.architecture, cfg.input_shape, cfg.classes).map_err(|e| e.to_string())?;
        let data = Dataset::from_config(cfg);
        let (init, hits) = warm_start(&net, dict, cfg.init_seed);
        let outcome = train(&net, init, &data, cfg)?;
        let mut r = EvalResult::ok(&request.id, outcome.performance);
        r.metrics.insert("train_loss".into(), outcome.train_loss.clone().into());
        r.metrics.insert("val_accuracy".into(), outcome.val_accuracy.clone().into());
        r.metrics.insert("epochs_run".into(), outcome.train_loss.len().into());
        r.metrics.insert("best_epoch".into(), outcome.best_epoch.into());
        r.metrics.insert("warm_started_tensors".into(), hits.into());
        r.metrics.insert("params".into(), net.backbone_scalars().into());
        let contribution = Contribution { tensors: export(&net, &outcome.best_weights), accuracy: outcome.performance };
        Ok((r, contribution))
    };
    match run() {
        Ok((r, c)) => (r, Some(c)),
        Err(e) => (EvalResult::error(&request.id, e), None),
    }
}

/// Trains candidates natively and keeps the weight dictionary.
#[derive(Debug, Default)]
pub struct NativeEvaluator {
    pub dict: WeightDictionary,
    pub step: u64,
    /// Drop the dictionary at every episode boundary.
    pub clear_per_episode: bool,
    pending: Vec<Contribution>,
}

impl NativeEvaluator {
    pub fn new(clear_per_episode: bool) -> Self {
        NativeEvaluator { clear_per_episode, ..Default::default() }
    }
}

impl Evaluator for NativeEvaluator {
    fn name(&self) -> &'static str {
        "native"
    }

    fn evaluate_batch(&mut self, requests: &[EvalRequest]) -> Result<Vec<EvalResult>, Unreachable> {
        let dict = &self.dict;
        let outs: Vec<(EvalResult, Option<Contribution>)> =
            requests.par_iter().map(|r| native_train_evaluate(r, dict)).collect();
        let mut results = Vec::with_capacity(outs.len());
        for (r, c) in outs {
            self.pending.extend(c);
            results.push(r);
        }
        Ok(results)
    }

    fn end_step(&mut self) {
        merge_dictionary(&mut self.dict, &self.pending, self.step);
        self.pending.clear();
        self.step += 1;
    }

    fn end_episode(&mut self) {
        if self.clear_per_episode {
            self.dict.clear();
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({ "dictionary": self.dict, "step": self.step })
    }

    fn restore(&mut self, state: &serde_json::Value) -> Result<(), String> {
        if state.is_null() {
            return Ok(());
        }
        self.dict = serde_json::from_value(state["dictionary"].clone()).map_err(|e| e.to_string())?;
        self.step = state["step"].as_u64().ok_or("snapshot lacks step")?;
        self.pending.clear();
        Ok(())
    }
}

/// Architecture instantiation as used by the trainer, for parameter audits.
pub fn instantiate(arch: &Architecture, cfg: &TrainConfig) -> Result<Network, String> {
    Network::new(arch, cfg.input_shape, cfg.classes).map_err(|e| e.to_string())
}
