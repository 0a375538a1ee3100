//! Architecture intermediate representation.
//!
//! Two search patterns share one representation:
//!
//! * a **layer net** is an ordered list of [`LayerSpec`]s. Layer `i` reads its
//!   main input from `src1` and may read a second operand from `src2`; both
//!   must precede `i`, so index order is a topological order.
//! * a **cell net** is a small ordered list of [`BranchSpec`]s that is stacked
//!   by a [`StackingTemplate`] into a full network (see [`expand_stack`]).
//!
//! Source index conventions for layers: `src1 = -1` reads the network input.
//! For `add` and `concat` layers both operands are mandatory and `-1` on either
//! side reads the network input; for every other op `src2 = -1` means "no skip
//! connection". Cell branches address *slots*: slot 0 is the cell input and
//! branch `i` occupies slot `i + 1`.

mod json;
mod random;
mod stack;

pub use json::{from_json, to_json, to_json_value, ArchError};
pub use random::{random_architecture, RandomLimits};
pub use stack::{expand_stack, StackError};

use serde::{Deserialize, Serialize};
use std::fmt;

pub const DEFAULT_MAX_LAYERS: usize = 32;
pub const DEFAULT_MAX_BRANCHES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv2d,
    DepSepConv2d,
    MaxPool2d,
    AvgPool2d,
    Add,
    /// Channel concatenation. Only produced by stack expansion.
    Concat,
    /// A `1×k` convolution followed by a `k×1` convolution. Only produced by
    /// stack expansion of `sep17_71_none` branches.
    FactorizedConv,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::Conv2d,
        OpKind::DepSepConv2d,
        OpKind::MaxPool2d,
        OpKind::AvgPool2d,
        OpKind::Add,
        OpKind::Concat,
        OpKind::FactorizedConv,
    ];

    pub fn is_conv(self) -> bool {
        matches!(self, OpKind::Conv2d | OpKind::DepSepConv2d | OpKind::FactorizedConv)
    }

    pub fn is_pool(self) -> bool {
        matches!(self, OpKind::MaxPool2d | OpKind::AvgPool2d)
    }

    /// Ops whose two operands are both mandatory.
    pub fn is_merge(self) -> bool {
        matches!(self, OpKind::Add | OpKind::Concat)
    }

    /// Ops that only appear in expanded (lowered) networks.
    pub fn is_lowered_only(self) -> bool {
        matches!(self, OpKind::Concat | OpKind::FactorizedConv)
    }

    pub fn takes_activation(self) -> bool {
        self.is_conv() || self == OpKind::Add
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::DepSepConv2d => "dep_sep_conv2d",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
            OpKind::FactorizedConv => "factorized_conv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Concatenated ReLU: `[relu(x), relu(-x)]`, doubling the channel count.
    Crelu,
    Elu,
    Selu,
    Swish,
    None,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Relu,
        Activation::Crelu,
        Activation::Elu,
        Activation::Selu,
        Activation::Swish,
        Activation::None,
    ];

    pub fn channel_factor(self) -> usize {
        if self == Activation::Crelu {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BranchType {
    #[serde(rename = "conv_conv")]
    ConvConv,
    #[serde(rename = "conv_maxpool")]
    ConvMaxpool,
    #[serde(rename = "conv_avgpool")]
    ConvAvgpool,
    #[serde(rename = "conv_none")]
    ConvNone,
    #[serde(rename = "maxpool_none")]
    MaxpoolNone,
    #[serde(rename = "avgpool_none")]
    AvgpoolNone,
    #[serde(rename = "sep17_71_none")]
    Sep17x71None,
}

impl BranchType {
    pub const ALL: [BranchType; 7] = [
        BranchType::ConvConv,
        BranchType::ConvMaxpool,
        BranchType::ConvAvgpool,
        BranchType::ConvNone,
        BranchType::MaxpoolNone,
        BranchType::AvgpoolNone,
        BranchType::Sep17x71None,
    ];

    /// Filter width is a free parameter (the 1×7/7×1 branch has a fixed width).
    pub fn uses_filter_width(self) -> bool {
        matches!(
            self,
            BranchType::ConvConv | BranchType::ConvMaxpool | BranchType::ConvAvgpool | BranchType::ConvNone
        )
    }

    pub fn uses_pool_width(self) -> bool {
        matches!(
            self,
            BranchType::ConvMaxpool | BranchType::ConvAvgpool | BranchType::MaxpoolNone | BranchType::AvgpoolNone
        )
    }

    /// Any convolution in the branch, so `channels` is meaningful.
    pub fn uses_channels(self) -> bool {
        !matches!(self, BranchType::MaxpoolNone | BranchType::AvgpoolNone)
    }
}

/// Width of both convolutions in a `sep17_71_none` branch.
pub const FACTORIZED_WIDTH: u32 = 7;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub op_kind: OpKind,
    /// Conv kinds only, otherwise 0.
    pub filter_width: u32,
    /// Pool kinds only, otherwise 0.
    pub pool_width: u32,
    /// Conv kinds only, otherwise 0.
    pub channels: u32,
    pub activation: Activation,
    pub src1: i32,
    pub src2: i32,
}

impl LayerSpec {
    pub fn conv(filter_width: u32, channels: u32, activation: Activation, src1: i32) -> Self {
        LayerSpec {
            op_kind: OpKind::Conv2d,
            filter_width,
            pool_width: 0,
            channels,
            activation,
            src1,
            src2: -1,
        }
    }

    pub fn dep_sep(filter_width: u32, channels: u32, activation: Activation, src1: i32) -> Self {
        LayerSpec { op_kind: OpKind::DepSepConv2d, ..LayerSpec::conv(filter_width, channels, activation, src1) }
    }

    pub fn pool(op_kind: OpKind, pool_width: u32, src1: i32) -> Self {
        debug_assert!(op_kind.is_pool());
        LayerSpec {
            op_kind,
            filter_width: 0,
            pool_width,
            channels: 0,
            activation: Activation::None,
            src1,
            src2: -1,
        }
    }

    pub fn merge(op_kind: OpKind, activation: Activation, src1: i32, src2: i32) -> Self {
        debug_assert!(op_kind.is_merge());
        LayerSpec {
            op_kind,
            filter_width: 0,
            pool_width: 0,
            channels: 0,
            activation,
            src1,
            src2,
        }
    }

    pub fn with_skip(mut self, src2: i32) -> Self {
        self.src2 = src2;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub branch_type: BranchType,
    pub filter_width: u32,
    pub pool_width: u32,
    pub channels: u32,
    pub src1: u32,
    pub src2: u32,
    pub propagate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    AvgPoolStride2,
}

/// How a cell is stacked into a full network.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackingTemplate {
    pub cells_per_stage: u32,
    pub num_stages: u32,
    pub stage_channel_multiplier: Multiplier,
    pub reduction: Reduction,
}

impl Default for StackingTemplate {
    fn default() -> Self {
        StackingTemplate {
            cells_per_stage: 2,
            num_stages: 3,
            stage_channel_multiplier: Multiplier(2.0),
            reduction: Reduction::AvgPoolStride2,
        }
    }
}

/// A positive real that serializes as an integer when it is whole, so that
/// canonical text never contains `2.0` where `2` is meant.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Multiplier(pub f64);

impl Serialize for Multiplier {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.fract() == 0.0 && self.0.abs() < 9.0e15 {
            s.serialize_i64(self.0 as i64)
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Multiplier {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        f64::deserialize(d).map(Multiplier)
    }
}

impl Eq for Multiplier {}

impl std::hash::Hash for Multiplier {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state)
    }
}

/// Spatial extent and channel count of an activation (`HxWxC`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape { height, width, channels }
    }

    pub fn elements(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl std::str::FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let dims: Vec<usize> = s
            .split(['x', 'X', '×'])
            .map(|d| d.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("input shape `{s}` is not HxWxC"))?;
        match dims[..] {
            [h, w, c] if h > 0 && w > 0 && c > 0 => Ok(Shape::new(h, w, c)),
            _ => Err(format!("input shape `{s}` must have three positive dimensions HxWxC")),
        }
    }
}

impl Serialize for Shape {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Shape {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    LayerNet,
    CellNet,
}

/// A searchable network.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Layers(Vec<LayerSpec>),
    Cell { branches: Vec<BranchSpec>, stacking: StackingTemplate },
}

impl Architecture {
    pub fn mode(&self) -> Mode {
        match self {
            Architecture::Layers(_) => Mode::LayerNet,
            Architecture::Cell { .. } => Mode::CellNet,
        }
    }

    /// Number of layers or branches.
    pub fn len(&self) -> usize {
        match self {
            Architecture::Layers(l) => l.len(),
            Architecture::Cell { branches, .. } => branches.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layers(&self) -> Option<&[LayerSpec]> {
        match self {
            Architecture::Layers(l) => Some(l),
            Architecture::Cell { .. } => None,
        }
    }

    pub fn branches(&self) -> Option<&[BranchSpec]> {
        match self {
            Architecture::Cell { branches, .. } => Some(branches),
            Architecture::Layers(_) => None,
        }
    }
}

/// Feature domains of the insert tables for both search patterns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureDomains {
    pub layer_ops: Vec<OpKind>,
    pub filter_widths: Vec<u32>,
    pub pool_widths: Vec<u32>,
    pub layer_channels: Vec<u32>,
    pub activations: Vec<Activation>,
    pub branch_types: Vec<BranchType>,
    pub branch_channels: Vec<u32>,
}

impl Default for FeatureDomains {
    fn default() -> Self {
        FeatureDomains {
            layer_ops: vec![
                OpKind::Conv2d,
                OpKind::DepSepConv2d,
                OpKind::MaxPool2d,
                OpKind::AvgPool2d,
                OpKind::Add,
            ],
            filter_widths: vec![1, 3, 5, 7],
            pool_widths: vec![2, 3],
            layer_channels: vec![16, 32, 64, 96, 128, 256],
            activations: vec![
                Activation::Relu,
                Activation::Crelu,
                Activation::Elu,
                Activation::Selu,
                Activation::Swish,
            ],
            branch_types: BranchType::ALL.to_vec(),
            branch_channels: vec![8, 12, 16, 24, 32],
        }
    }
}

impl FeatureDomains {
    pub fn check(&self) -> Result<(), String> {
        let empty = [
            ("layer_ops", self.layer_ops.is_empty()),
            ("filter_widths", self.filter_widths.is_empty()),
            ("pool_widths", self.pool_widths.is_empty()),
            ("layer_channels", self.layer_channels.is_empty()),
            ("activations", self.activations.is_empty()),
            ("branch_types", self.branch_types.is_empty()),
            ("branch_channels", self.branch_channels.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(format!("domain `{name}` is empty"));
        }
        if self.layer_ops.iter().any(|op| op.is_lowered_only()) {
            return Err("layer_ops may only contain searchable op kinds".into());
        }
        if self.filter_widths.iter().any(|w| w % 2 == 0) {
            return Err("filter widths must be odd".into());
        }
        if self.pool_widths.iter().any(|&w| w < 2) {
            return Err("pool widths must be at least 2".into());
        }
        if self.layer_channels.contains(&0) || self.branch_channels.contains(&0) {
            return Err("channel sizes must be positive".into());
        }
        Ok(())
    }
}

/// Domains plus capacity caps: everything `validate` needs to know.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub max_layers: usize,
    pub max_branches: usize,
    pub domains: FeatureDomains,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            max_layers: DEFAULT_MAX_LAYERS,
            max_branches: DEFAULT_MAX_BRANCHES,
            domains: FeatureDomains::default(),
        }
    }
}

impl SearchSpace {
    pub fn capacity(&self, mode: Mode) -> usize {
        match mode {
            Mode::LayerNet => self.max_layers,
            Mode::CellNet => self.max_branches,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Empty,
    TooMany { count: usize, max: usize },
    ForwardReference { index: usize, field: &'static str, value: i64 },
    InvalidSource { index: usize, field: &'static str, value: i64 },
    SourceSlotOutOfRange { index: usize, field: &'static str, slot: u32, max: u32 },
    BadFilterWidth { index: usize, value: u32 },
    BadPoolWidth { index: usize, value: u32 },
    BadChannels { index: usize, value: u32 },
    /// A field that is meaningless for the op/branch type is not stored as 0
    /// (or `none` for activations).
    NonCanonicalField { index: usize, field: &'static str },
    OpNotAllowed { index: usize, op: OpKind },
    NoPropagatingBranch,
    BadStacking(&'static str),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "network is empty"),
            Violation::TooMany { count, max } => write!(f, "{count} nodes exceed the cap of {max}"),
            Violation::ForwardReference { index, field, value } => {
                write!(f, "forward reference: node {index} {field}={value}")
            }
            Violation::InvalidSource { index, field, value } => {
                write!(f, "invalid source: node {index} {field}={value}")
            }
            Violation::SourceSlotOutOfRange { index, field, slot, max } => {
                write!(f, "source slot out of range: branch {index} {field}={slot} (max {max})")
            }
            Violation::BadFilterWidth { index, value } => write!(f, "node {index}: filter width {value} not allowed"),
            Violation::BadPoolWidth { index, value } => write!(f, "node {index}: pool width {value} not allowed"),
            Violation::BadChannels { index, value } => write!(f, "node {index}: channel count {value} not allowed"),
            Violation::NonCanonicalField { index, field } => {
                write!(f, "node {index}: field `{field}` is meaningless here and must be 0/none")
            }
            Violation::OpNotAllowed { index, op } => write!(f, "node {index}: op `{}` not allowed", op.name()),
            Violation::NoPropagatingBranch => write!(f, "no branch propagates to the cell output"),
            Violation::BadStacking(what) => write!(f, "stacking template: {what}"),
        }
    }
}

/// Result of [`validate`]; violations are data, not faults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Validates against the default search space.
pub fn validate(arch: &Architecture) -> ValidationReport {
    validate_in(arch, &SearchSpace::default())
}

/// Validates a searchable architecture against `space`.
pub fn validate_in(arch: &Architecture, space: &SearchSpace) -> ValidationReport {
    let mut report = ValidationReport::default();
    match arch {
        Architecture::Layers(layers) => check_layers(layers, Some(space), &mut report),
        Architecture::Cell { branches, stacking } => check_cell(branches, stacking, Some(space), &mut report),
    }
    report
}

/// Structure-only validation of either mode: sources, canonical fields and
/// stacking, but no capacity caps or feature domains beyond positivity.
pub fn validate_structure(arch: &Architecture) -> ValidationReport {
    match arch {
        Architecture::Layers(layers) => validate_lowered(layers),
        Architecture::Cell { branches, stacking } => {
            let mut report = ValidationReport::default();
            check_cell(branches, stacking, None, &mut report);
            report
        }
    }
}

/// Validates an expanded (lowered) layer list: structure only, no caps or
/// channel domains, lowered-only ops allowed.
pub fn validate_lowered(layers: &[LayerSpec]) -> ValidationReport {
    let mut report = ValidationReport::default();
    check_layers(layers, None, &mut report);
    report
}

fn check_layers(layers: &[LayerSpec], space: Option<&SearchSpace>, report: &mut ValidationReport) {
    let v = &mut report.violations;
    if layers.is_empty() {
        v.push(Violation::Empty);
    }
    if let Some(space) = space {
        if layers.len() > space.max_layers {
            v.push(Violation::TooMany { count: layers.len(), max: space.max_layers });
        }
    }
    for (i, layer) in layers.iter().enumerate() {
        for (field, src) in [("src1", layer.src1), ("src2", layer.src2)] {
            if src < -1 {
                v.push(Violation::InvalidSource { index: i, field, value: src.into() });
            } else if src >= 0 && src as usize >= i {
                v.push(Violation::ForwardReference { index: i, field, value: src.into() });
            }
        }
        let op = layer.op_kind;
        if let Some(space) = space {
            if !space.domains.layer_ops.contains(&op) {
                v.push(Violation::OpNotAllowed { index: i, op });
            }
        } else if op == OpKind::FactorizedConv && layer.filter_width == 0 {
            v.push(Violation::BadFilterWidth { index: i, value: 0 });
        }
        if op.is_conv() {
            let fw_ok = match space {
                Some(s) => s.domains.filter_widths.contains(&layer.filter_width),
                None => layer.filter_width % 2 == 1,
            };
            if !fw_ok {
                v.push(Violation::BadFilterWidth { index: i, value: layer.filter_width });
            }
            let ch_ok = match space {
                Some(s) => s.domains.layer_channels.contains(&layer.channels),
                None => layer.channels > 0,
            };
            if !ch_ok {
                v.push(Violation::BadChannels { index: i, value: layer.channels });
            }
        } else {
            if layer.filter_width != 0 {
                v.push(Violation::NonCanonicalField { index: i, field: "filter_width" });
            }
            if layer.channels != 0 {
                v.push(Violation::NonCanonicalField { index: i, field: "channels" });
            }
        }
        if op.is_pool() {
            let pw_ok = match space {
                Some(s) => s.domains.pool_widths.contains(&layer.pool_width),
                None => layer.pool_width >= 2,
            };
            if !pw_ok {
                v.push(Violation::BadPoolWidth { index: i, value: layer.pool_width });
            }
        } else if layer.pool_width != 0 {
            v.push(Violation::NonCanonicalField { index: i, field: "pool_width" });
        }
        if !op.takes_activation() && layer.activation != Activation::None {
            v.push(Violation::NonCanonicalField { index: i, field: "activation" });
        }
    }
}

fn check_cell(
    branches: &[BranchSpec],
    stacking: &StackingTemplate,
    space: Option<&SearchSpace>,
    report: &mut ValidationReport,
) {
    let v = &mut report.violations;
    if branches.is_empty() {
        v.push(Violation::Empty);
    }
    if let Some(space) = space {
        if branches.len() > space.max_branches {
            v.push(Violation::TooMany { count: branches.len(), max: space.max_branches });
        }
    }
    let d = space.map(|s| &s.domains);
    for (i, b) in branches.iter().enumerate() {
        for (field, slot) in [("src1", b.src1), ("src2", b.src2)] {
            // branch i may read the cell input (slot 0) and branches 0..i
            if slot as usize > i {
                v.push(Violation::SourceSlotOutOfRange { index: i, field, slot, max: i as u32 });
            }
        }
        if d.is_some_and(|d| !d.branch_types.contains(&b.branch_type)) {
            v.push(Violation::NonCanonicalField { index: i, field: "branch_type" });
        }
        if b.branch_type.uses_filter_width() {
            if !d.map_or(b.filter_width % 2 == 1, |d| d.filter_widths.contains(&b.filter_width)) {
                v.push(Violation::BadFilterWidth { index: i, value: b.filter_width });
            }
        } else if b.filter_width != 0 {
            v.push(Violation::NonCanonicalField { index: i, field: "filter_width" });
        }
        if b.branch_type.uses_pool_width() {
            if !d.map_or(b.pool_width >= 2, |d| d.pool_widths.contains(&b.pool_width)) {
                v.push(Violation::BadPoolWidth { index: i, value: b.pool_width });
            }
        } else if b.pool_width != 0 {
            v.push(Violation::NonCanonicalField { index: i, field: "pool_width" });
        }
        if b.branch_type.uses_channels() {
            if !d.map_or(b.channels > 0, |d| d.branch_channels.contains(&b.channels)) {
                v.push(Violation::BadChannels { index: i, value: b.channels });
            }
        } else if b.channels != 0 {
            v.push(Violation::NonCanonicalField { index: i, field: "channels" });
        }
    }
    if !branches.is_empty() && !branches.iter().any(|b| b.propagate) {
        v.push(Violation::NoPropagatingBranch);
    }
    if stacking.cells_per_stage == 0 {
        v.push(Violation::BadStacking("cells_per_stage must be positive"));
    }
    if stacking.num_stages == 0 {
        v.push(Violation::BadStacking("num_stages must be positive"));
    }
    let m = stacking.stage_channel_multiplier.0;
    if !(m.is_finite() && m > 0.0) {
        v.push(Violation::BadStacking("stage_channel_multiplier must be positive"));
    }
}
