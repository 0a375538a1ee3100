//! Resource estimation and the soft-constrained reward.
//!
//! Counting conventions (a multiply-accumulate is two FLOPs):
//!
//! | op | params | FLOPs |
//! |----|--------|-------|
//! | conv2d | `k²·Ci·Co + Co` | `2·k²·Ci·Co·H·W` |
//! | dep_sep_conv2d | `k²·Ci + Ci·Co + Co` | `2·k²·Ci·H·W + 2·Ci·Co·H·W` |
//! | factorized_conv | `k·Ci·Co + Co + k·Co·Co + Co` | `2·k·Ci·Co·H·W + 2·k·Co·Co·H·W` |
//! | pools | 0 | `p²·C·Ho·Wo` |
//! | add, skip add | 0 | `C·H·W` |
//! | 1×1 adapter | `Ci·Co + Co` | `2·Ci·Co·Ho·Wo` |
//!
//! Activations other than `none` cost one FLOP per output scalar. Bytes
//! assume 4-byte scalars and no cache: each layer reads its weights and its
//! source activations once and writes its output once.

use crate::arch::{Architecture, LayerSpec, OpKind, Shape};
use crate::graph::{plan, GraphError, Node};
use serde::{Deserialize, Serialize};

pub const BYTES_PER_SCALAR: u64 = 4;
pub const DEFAULT_BASE_PENALTY: f64 = 0.9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub params: u64,
    pub flops: u64,
    pub bytes: u64,
}

impl ResourceUsage {
    pub fn mflops(&self) -> f64 {
        self.flops as f64 / 1e6
    }

    /// FLOPs per byte of memory traffic.
    pub fn intensity(&self) -> f64 {
        if self.bytes == 0 {
            0.0
        } else {
            self.flops as f64 / self.bytes as f64
        }
    }

    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::ModelSize => self.params as f64,
            Metric::ComputeComplexity => self.mflops(),
            Metric::ComputeIntensity => self.intensity(),
        }
    }

    pub fn report(&self) -> UsageReport {
        UsageReport { params: self.params, mflops: self.mflops(), flops_per_byte: self.intensity() }
    }
}

/// The printed form: raw parameter count, MFLOPs and FLOPs/byte.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub params: u64,
    pub mflops: f64,
    pub flops_per_byte: f64,
}

/// Parameters of the layer's own op, excluding adapters.
pub fn op_params(layer: &LayerSpec, input_channels: usize) -> u64 {
    let k = layer.filter_width as u64;
    let ci = input_channels as u64;
    let co = layer.channels as u64;
    match layer.op_kind {
        OpKind::Conv2d => k * k * ci * co + co,
        OpKind::DepSepConv2d => k * k * ci + ci * co + co,
        OpKind::FactorizedConv => k * ci * co + co + k * co * co + co,
        OpKind::MaxPool2d | OpKind::AvgPool2d | OpKind::Add | OpKind::Concat => 0,
    }
}

fn op_flops(node: &Node) -> u64 {
    let layer = &node.layer;
    let k = layer.filter_width as u64;
    let ci = node.main.shape.channels as u64;
    let pre = node.pre_activation;
    let hw = (pre.height * pre.width) as u64;
    let co = pre.channels as u64;
    match layer.op_kind {
        OpKind::Conv2d => 2 * k * k * ci * co * hw,
        OpKind::DepSepConv2d => 2 * k * k * ci * hw + 2 * ci * co * hw,
        OpKind::FactorizedConv => 2 * k * ci * co * hw + 2 * k * co * co * hw,
        OpKind::MaxPool2d | OpKind::AvgPool2d => {
            let p = layer.pool_width as u64;
            p * p * co * hw
        }
        OpKind::Add => pre.elements() as u64,
        OpKind::Concat => 0,
    }
}

/// Usage of a single planned node, adapters and skip add included.
pub fn node_usage(node: &Node) -> ResourceUsage {
    let mut params = op_params(&node.layer, node.main.shape.channels);
    let mut flops = op_flops(node);
    let mut reads = node.main.shape.elements() as u64;
    let operands = std::iter::once(&node.main).chain(node.second.as_ref());
    for adapter in operands.filter_map(|o| o.adapter) {
        params += adapter.params();
        flops += adapter.flops();
    }
    if node.layer.activation != crate::arch::Activation::None {
        flops += node.output.elements() as u64;
    }
    if let Some(second) = &node.second {
        reads += second.shape.elements() as u64;
        if !node.layer.op_kind.is_merge() {
            flops += node.output.elements() as u64;
        }
    }
    let bytes = BYTES_PER_SCALAR * (params + reads + node.output.elements() as u64);
    ResourceUsage { params, flops, bytes }
}

/// Estimates a layer net, or a cell net after stacking.
pub fn estimate(arch: &Architecture, input: Shape) -> Result<ResourceUsage, GraphError> {
    let graph = plan(arch, input)?;
    Ok(graph.nodes.iter().map(node_usage).fold(ResourceUsage::default(), |acc, u| ResourceUsage {
        params: acc.params + u.params,
        flops: acc.flops + u.flops,
        bytes: acc.bytes + u.bytes,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Parameter count.
    ModelSize,
    /// MFLOPs per inference.
    ComputeComplexity,
    /// FLOPs per byte.
    ComputeIntensity,
}

fn default_penalty() -> f64 {
    DEFAULT_BASE_PENALTY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    #[serde(default = "default_penalty")]
    pub base_penalty: f64,
}

impl ConstraintSpec {
    pub fn upper(metric: Metric, bound: f64) -> Self {
        ConstraintSpec { metric, lower: None, upper: Some(bound), base_penalty: DEFAULT_BASE_PENALTY }
    }

    pub fn lower(metric: Metric, bound: f64) -> Self {
        ConstraintSpec { metric, lower: Some(bound), upper: None, base_penalty: DEFAULT_BASE_PENALTY }
    }

    pub fn check(&self) -> Result<(), ResourceError> {
        let bad = |why: &str| Err(ResourceError::BadConstraint(format!("{:?}: {why}", self.metric)));
        if self.lower.is_none() && self.upper.is_none() {
            return bad("needs a lower or an upper bound");
        }
        for b in self.lower.iter().chain(&self.upper) {
            if !(b.is_finite() && *b > 0.0) {
                return bad("bounds must be positive and finite");
            }
        }
        if let (Some(l), Some(u)) = (self.lower, self.upper) {
            if l > u {
                return bad("lower bound exceeds upper bound");
            }
        }
        if !(0.0..=1.0).contains(&self.base_penalty) {
            return bad("base_penalty must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn satisfied(&self, u: f64) -> bool {
        self.lower.is_none_or(|l| u >= l) && self.upper.is_none_or(|c| u <= c)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConstraintSet(pub Vec<ConstraintSpec>);

impl ConstraintSet {
    pub fn check(&self) -> Result<(), ResourceError> {
        self.0.iter().try_for_each(ConstraintSpec::check)
    }

    pub fn satisfied(&self, usage: &ResourceUsage) -> bool {
        self.0.iter().all(|c| c.satisfied(usage.metric(c.metric)))
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ResourceError {
    #[error("usage {0} must be positive when a lower bound is present")]
    Domain(f64),
    #[error("performance {0} outside [0, 1]")]
    Performance(f64),
    #[error("invalid constraint {0}")]
    BadConstraint(String),
}

/// Soft violation factor in `(0, 1]`; `1` when `u` lies within the bounds.
pub fn violation(u: f64, c: &ConstraintSpec) -> Result<f64, ResourceError> {
    let over = c.upper.map_or(0.0, |cu| (u / cu - 1.0).max(0.0));
    let under = match c.lower {
        Some(cl) => {
            if u <= 0.0 {
                return Err(ResourceError::Domain(u));
            }
            (cl / u - 1.0).max(0.0)
        }
        None => 0.0,
    };
    let exponent = over.max(under);
    Ok(if exponent == 0.0 { 1.0 } else { c.base_penalty.powf(exponent) })
}

/// Violation factor of every constraint, in order.
pub fn violations(usage: &ResourceUsage, cs: &ConstraintSet) -> Result<Vec<f64>, ResourceError> {
    cs.0.iter().map(|c| violation(usage.metric(c.metric), c)).collect()
}

/// `perf` times the product of the violation factors.
pub fn reward(perf: f64, usage: &ResourceUsage, cs: &ConstraintSet) -> Result<f64, ResourceError> {
    if !(0.0..=1.0).contains(&perf) {
        return Err(ResourceError::Performance(perf));
    }
    Ok(violations(usage, cs)?.into_iter().fold(perf, |r, v| r * v))
}
