use super::{Architecture, BranchSpec, LayerSpec, Mode, OpKind, SearchSpace, StackingTemplate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Bounds for [`random_architecture`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomLimits {
    /// Inclusive depth range in layers (layer nets).
    pub min_layers: usize,
    pub max_layers: usize,
    /// Inclusive branch-count range (cell nets).
    pub min_branches: usize,
    pub max_branches: usize,
    /// Probability that a non-merge layer gets a skip connection.
    pub skip_probability: f64,
    pub space: SearchSpace,
    pub stacking: StackingTemplate,
}

impl Default for RandomLimits {
    fn default() -> Self {
        RandomLimits {
            min_layers: 4,
            max_layers: 12,
            min_branches: 2,
            max_branches: 5,
            skip_probability: 0.25,
            space: SearchSpace::default(),
            stacking: StackingTemplate::default(),
        }
    }
}

/// Draws a valid architecture; a pure function of `(seed, mode, limits)`.
pub fn random_architecture(seed: u64, mode: Mode, limits: &RandomLimits) -> Architecture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        Mode::LayerNet => {
            let hi = limits.max_layers.min(limits.space.max_layers).max(1);
            let lo = limits.min_layers.clamp(1, hi);
            let depth = rng.random_range(lo..=hi);
            Architecture::Layers((0..depth).map(|i| random_layer(&mut rng, i, limits)).collect())
        }
        Mode::CellNet => {
            let hi = limits.max_branches.min(limits.space.max_branches).max(1);
            let lo = limits.min_branches.clamp(1, hi);
            let count = rng.random_range(lo..=hi);
            let mut branches: Vec<BranchSpec> = (0..count).map(|i| random_branch(&mut rng, i, limits)).collect();
            if !branches.iter().any(|b| b.propagate) {
                branches.last_mut().expect("count >= 1").propagate = true;
            }
            Architecture::Cell { branches, stacking: limits.stacking.clone() }
        }
    }
}

fn random_layer(rng: &mut ChaCha8Rng, index: usize, limits: &RandomLimits) -> LayerSpec {
    let d = &limits.space.domains;
    let i = index as i32;
    let op = *d.layer_ops.choose(rng).expect("non-empty domain");
    match op {
        OpKind::Conv2d | OpKind::DepSepConv2d => {
            let fw = *d.filter_widths.choose(rng).expect("non-empty domain");
            let ch = *d.layer_channels.choose(rng).expect("non-empty domain");
            let act = *d.activations.choose(rng).expect("non-empty domain");
            let mut layer = LayerSpec::conv(fw, ch, act, i - 1);
            layer.op_kind = op;
            layer.with_skip(random_skip(rng, index, limits.skip_probability))
        }
        OpKind::MaxPool2d | OpKind::AvgPool2d => {
            let pw = *d.pool_widths.choose(rng).expect("non-empty domain");
            LayerSpec::pool(op, pw, i - 1).with_skip(random_skip(rng, index, limits.skip_probability))
        }
        OpKind::Add => {
            let act = *d.activations.choose(rng).expect("non-empty domain");
            LayerSpec::merge(OpKind::Add, act, i - 1, rng.random_range(-1..i))
        }
        OpKind::Concat | OpKind::FactorizedConv => unreachable!("domains never contain lowered-only ops"),
    }
}

fn random_skip(rng: &mut ChaCha8Rng, index: usize, p: f64) -> i32 {
    if index >= 1 && rng.random_bool(p.clamp(0.0, 1.0)) {
        rng.random_range(0..index as i32)
    } else {
        -1
    }
}

fn random_branch(rng: &mut ChaCha8Rng, index: usize, limits: &RandomLimits) -> BranchSpec {
    let d = &limits.space.domains;
    let branch_type = *d.branch_types.choose(rng).expect("non-empty domain");
    let filter_width =
        if branch_type.uses_filter_width() { *d.filter_widths.choose(rng).expect("non-empty domain") } else { 0 };
    let pool_width =
        if branch_type.uses_pool_width() { *d.pool_widths.choose(rng).expect("non-empty domain") } else { 0 };
    let channels =
        if branch_type.uses_channels() { *d.branch_channels.choose(rng).expect("non-empty domain") } else { 0 };
    BranchSpec {
        branch_type,
        filter_width,
        pool_width,
        channels,
        src1: rng.random_range(0..=index as u32),
        src2: rng.random_range(0..=index as u32),
        propagate: rng.random_bool(0.5),
    }
}
