//! The recurrent policy network.
//!
//! ```text
//! layers/branches ──feature tables──▶ embedding LSTM (32) ──▶ e
//! e ──▶ scale LSTM (128), one step per part ──▶ (multiplier, filter delta)
//! e ──▶ insert LSTM (128), one step per decided field ──▶ kind, position, payload
//! ```
//!
//! Each node of the architecture is embedded as the sum of one row per
//! feature table. Decoder steps after the first are fed a learned embedding
//! of the value chosen at the previous step. Categorical fields are masked so
//! that only legal actions have non-zero probability; fields that the sampled
//! kind or op does not need are not decided and contribute nothing to the
//! log-probability.

mod params;
mod tape;

pub use params::{CheckpointError, ParamId, ParamSet, TensorSpec, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{masked_softmax, NodeId, Tape};

use crate::actions::{
    kind_allowed, valid_positions, ActionBundle, ActionTables, InsertAction, InsertKind, PartScale, Payload,
    ScaleAction,
};
use crate::arch::{Activation, Architecture, BranchSpec, LayerSpec, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Hidden size of the embedding LSTM; also the width of every feature
    /// and field-value embedding.
    pub embed_hidden: usize,
    /// Hidden size of the scale and insert LSTMs.
    pub head_hidden: usize,
    /// Parameters are initialized uniformly in `[-init_range, init_range]`.
    pub init_range: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { embed_hidden: 32, head_hidden: 128, init_range: 0.1 }
    }
}

/// Insert-head fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Kind,
    Position,
    OpKind,
    BranchType,
    FilterWidth,
    PoolWidth,
    Channels,
    Activation,
    Src1,
    Src2,
    Propagate,
}

impl Field {
    pub fn name(self) -> &'static str {
        match self {
            Field::Kind => "kind",
            Field::Position => "position",
            Field::OpKind => "op_kind",
            Field::BranchType => "branch_type",
            Field::FilterWidth => "filter_width",
            Field::PoolWidth => "pool_width",
            Field::Channels => "channels",
            Field::Activation => "activation",
            Field::Src1 => "src1",
            Field::Src2 => "src2",
            Field::Propagate => "propagate",
        }
    }

    pub fn for_mode(mode: Mode) -> &'static [Field] {
        match mode {
            Mode::LayerNet => &[
                Field::Kind,
                Field::Position,
                Field::OpKind,
                Field::FilterWidth,
                Field::PoolWidth,
                Field::Channels,
                Field::Activation,
                Field::Src2,
            ],
            Mode::CellNet => &[
                Field::Kind,
                Field::Position,
                Field::BranchType,
                Field::FilterWidth,
                Field::PoolWidth,
                Field::Channels,
                Field::Src1,
                Field::Src2,
                Field::Propagate,
            ],
        }
    }
}

/// One categorical decision of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Multiplier(usize),
    FilterDelta(usize),
    Insert(Field),
}

/// The distribution of one decided field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldDistribution {
    pub decision: Decision,
    pub mask: Vec<bool>,
    pub probs: Vec<f64>,
    pub choice: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledStep {
    pub bundle: ActionBundle,
    pub logprob: f64,
    pub entropy: f64,
    /// Seed of the sampling stream; resampling with it reproduces the step.
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("feature `{feature}` of node {index} has value {value} outside its table")]
    OutOfDomain { feature: &'static str, index: usize, value: i64 },
    #[error("impossible action: {0}")]
    ImpossibleAction(String),
    #[error("policy built for {expected:?} cannot handle {got:?}")]
    WrongMode { expected: Mode, got: Mode },
    #[error("parameter layout does not match the policy")]
    Layout,
}

struct Lstm {
    w: ParamId,
    b: ParamId,
    hidden: usize,
}

struct Projection {
    w: ParamId,
    b: ParamId,
}

/// Layout and structure of the policy for one mode and action-table set. The
/// parameters themselves live in a separate [`ParamSet`].
pub struct PolicyNet {
    pub mode: Mode,
    pub tables: ActionTables,
    pub config: PolicyConfig,
    layout: ParamSet,
    features: Vec<(&'static str, ParamId)>,
    embed_lstm: Lstm,
    scale_lstm: Lstm,
    scale_heads: Vec<(Projection, Projection)>,
    scale_inputs: (ParamId, ParamId),
    insert_lstm: Lstm,
    insert_heads: HashMap<Field, (Projection, ParamId)>,
}

fn feature_tables(mode: Mode, tables: &ActionTables) -> Vec<(&'static str, usize)> {
    let d = &tables.space.domains;
    match mode {
        Mode::LayerNet => vec![
            ("op_kind", d.layer_ops.len()),
            ("filter_width", d.filter_widths.len() + 1),
            ("pool_width", d.pool_widths.len() + 1),
            ("channels", d.layer_channels.len() + 1),
            ("activation", d.activations.len() + 1),
            ("skip", tables.space.max_layers + 1),
        ],
        Mode::CellNet => vec![
            ("branch_type", d.branch_types.len()),
            ("filter_width", d.filter_widths.len() + 1),
            ("pool_width", d.pool_widths.len() + 1),
            ("channels", d.branch_channels.len() + 1),
            ("src1", tables.space.max_branches + 1),
            ("src2", tables.space.max_branches + 1),
            ("propagate", 2),
        ],
    }
}

impl PolicyNet {
    pub fn new(mode: Mode, tables: ActionTables, config: PolicyConfig) -> Self {
        let e = config.embed_hidden;
        let hh = config.head_hidden;
        let mut layout: Vec<(String, Vec<usize>)> = Vec::new();
        let features = feature_tables(mode, &tables);
        for (name, n) in &features {
            layout.push((format!("embed.{name}"), vec![*n, e]));
        }
        let lstm = |layout: &mut Vec<(String, Vec<usize>)>, prefix: &str, input: usize, hidden: usize| {
            layout.push((format!("{prefix}.lstm.w"), vec![4 * hidden, input + hidden]));
            layout.push((format!("{prefix}.lstm.b"), vec![4 * hidden]));
        };
        lstm(&mut layout, "embed", e, e);
        lstm(&mut layout, "scale", e, hh);
        let (nm, nd) = (tables.scale_table.len(), tables.filter_delta_table.len());
        for f in 0..tables.num_parts {
            for (what, n) in [("multiplier", nm), ("filter_delta", nd)] {
                layout.push((format!("scale.part{f}.{what}.w"), vec![n, hh]));
                layout.push((format!("scale.part{f}.{what}.b"), vec![n]));
            }
        }
        layout.push(("scale.input.multiplier".into(), vec![nm, e]));
        layout.push(("scale.input.filter_delta".into(), vec![nd, e]));
        lstm(&mut layout, "insert", e, hh);
        for &field in Field::for_mode(mode) {
            let n = field_size(mode, &tables, field);
            layout.push((format!("insert.{}.w", field.name()), vec![n, hh]));
            layout.push((format!("insert.{}.b", field.name()), vec![n]));
            layout.push((format!("insert.{}.input", field.name()), vec![n, e]));
        }
        let layout = ParamSet::new(layout);
        let id = |name: &str| layout.id(name).expect("layout contains every named tensor");
        let proj = |prefix: &str| Projection { w: id(&format!("{prefix}.w")), b: id(&format!("{prefix}.b")) };
        let lstm_ids = |prefix: &str, hidden| Lstm {
            w: id(&format!("{prefix}.lstm.w")),
            b: id(&format!("{prefix}.lstm.b")),
            hidden,
        };
        PolicyNet {
            mode,
            features: features.iter().map(|(name, _)| (*name, id(&format!("embed.{name}")))).collect(),
            embed_lstm: lstm_ids("embed", e),
            scale_lstm: lstm_ids("scale", hh),
            scale_heads: (0..tables.num_parts)
                .map(|f| (proj(&format!("scale.part{f}.multiplier")), proj(&format!("scale.part{f}.filter_delta"))))
                .collect(),
            scale_inputs: (id("scale.input.multiplier"), id("scale.input.filter_delta")),
            insert_lstm: lstm_ids("insert", hh),
            insert_heads: Field::for_mode(mode)
                .iter()
                .map(|&f| (f, (proj(&format!("insert.{}", f.name())), id(&format!("insert.{}.input", f.name())))))
                .collect(),
            layout,
            tables,
            config,
        }
    }

    /// Zero-valued parameters with this policy's layout.
    pub fn zero_params(&self) -> ParamSet {
        self.layout.zeros_like()
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut p = self.zero_params();
        p.fill_uniform(&mut ChaCha8Rng::seed_from_u64(seed), self.config.init_range);
        p
    }

    fn check(&self, params: &ParamSet, arch: &Architecture) -> Result<(), PolicyError> {
        if !params.same_layout(&self.layout) {
            return Err(PolicyError::Layout);
        }
        if arch.mode() != self.mode {
            return Err(PolicyError::WrongMode { expected: self.mode, got: arch.mode() });
        }
        Ok(())
    }

    /// Final hidden state of the embedding LSTM.
    pub fn embed(&self, params: &ParamSet, arch: &Architecture) -> Result<Vec<f64>, PolicyError> {
        self.check(params, arch)?;
        let mut tape = Tape::new(params);
        let e = self.embed_network(&mut tape, arch)?;
        Ok(tape.value(e).to_vec())
    }

    fn feature_rows(&self, arch: &Architecture) -> Result<Vec<Vec<usize>>, PolicyError> {
        let d = &self.tables.space.domains;
        let optional = |feature: &'static str, index: usize, value: u32, domain: &[u32]| {
            if value == 0 {
                Ok(0)
            } else {
                domain.iter().position(|&v| v == value).map(|i| i + 1).ok_or(PolicyError::OutOfDomain {
                    feature,
                    index,
                    value: value.into(),
                })
            }
        };
        match arch {
            Architecture::Layers(layers) => layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let op = d.layer_ops.iter().position(|&o| o == l.op_kind).ok_or(PolicyError::OutOfDomain {
                        feature: "op_kind",
                        index: i,
                        value: l.op_kind as i64,
                    })?;
                    let act = if l.activation == Activation::None {
                        0
                    } else {
                        d.activations.iter().position(|&a| a == l.activation).map(|a| a + 1).ok_or(
                            PolicyError::OutOfDomain { feature: "activation", index: i, value: l.activation as i64 },
                        )?
                    };
                    let has_second = l.op_kind.is_merge() || l.src2 >= 0;
                    let skip = if has_second { (i as i64 - l.src2 as i64) as usize } else { 0 };
                    if skip > self.tables.space.max_layers {
                        return Err(PolicyError::OutOfDomain { feature: "skip", index: i, value: skip as i64 });
                    }
                    Ok(vec![
                        op,
                        optional("filter_width", i, l.filter_width, &d.filter_widths)?,
                        optional("pool_width", i, l.pool_width, &d.pool_widths)?,
                        optional("channels", i, l.channels, &d.layer_channels)?,
                        act,
                        skip,
                    ])
                })
                .collect(),
            Architecture::Cell { branches, .. } => branches
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let bt = d.branch_types.iter().position(|&t| t == b.branch_type).ok_or(
                        PolicyError::OutOfDomain { feature: "branch_type", index: i, value: b.branch_type as i64 },
                    )?;
                    let slot = |feature, v: u32| {
                        if v as usize > self.tables.space.max_branches {
                            Err(PolicyError::OutOfDomain { feature, index: i, value: v.into() })
                        } else {
                            Ok(v as usize)
                        }
                    };
                    Ok(vec![
                        bt,
                        optional("filter_width", i, b.filter_width, &d.filter_widths)?,
                        optional("pool_width", i, b.pool_width, &d.pool_widths)?,
                        optional("channels", i, b.channels, &d.branch_channels)?,
                        slot("src1", b.src1)?,
                        slot("src2", b.src2)?,
                        usize::from(b.propagate),
                    ])
                })
                .collect(),
        }
    }

    fn lstm_step(tape: &mut Tape, cell: &Lstm, x: NodeId, h: NodeId, c: NodeId) -> (NodeId, NodeId) {
        let n = cell.hidden;
        let xh = tape.concat(x, h);
        let z = tape.affine(cell.w, cell.b, xh);
        let zi = tape.slice(z, 0, n);
        let zf = tape.slice(z, n, n);
        let zg = tape.slice(z, 2 * n, n);
        let zo = tape.slice(z, 3 * n, n);
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c2 = tape.add(fc, ig);
        let tc = tape.tanh(c2);
        let h2 = tape.mul(o, tc);
        (h2, c2)
    }

    fn embed_network(&self, tape: &mut Tape, arch: &Architecture) -> Result<NodeId, PolicyError> {
        let rows = self.feature_rows(arch)?;
        let zeros = vec![0.0; self.embed_lstm.hidden];
        let mut h = tape.constant(zeros.clone());
        let mut c = tape.constant(zeros);
        for row in rows {
            let parts: Vec<NodeId> =
                self.features.iter().zip(&row).map(|(&(_, table), &r)| tape.row(table, r)).collect();
            let x = tape.sum(parts);
            (h, c) = Self::lstm_step(tape, &self.embed_lstm, x, h, c);
        }
        Ok(h)
    }

    fn decide(
        &self,
        tape: &mut Tape,
        decision: Decision,
        logits: NodeId,
        mask: Vec<bool>,
        chooser: &mut dyn Chooser,
        out: &mut Decoded,
    ) -> Result<usize, PolicyError> {
        if !mask.iter().any(|&m| m) {
            return Err(PolicyError::ImpossibleAction(format!("{decision:?} has no legal value")));
        }
        let probs = masked_softmax(tape.value(logits), &mask);
        let choice = chooser.choose(decision, &probs)?;
        if choice >= probs.len() || probs[choice] == 0.0 {
            return Err(PolicyError::ImpossibleAction(format!("{decision:?} value {choice} is masked")));
        }
        out.logprobs.push(tape.logprob(logits, &mask, choice));
        out.entropies.push(tape.entropy(logits, &mask));
        out.distributions.push(FieldDistribution { decision, mask, probs, choice });
        Ok(choice)
    }

    fn decode(&self, tape: &mut Tape, arch: &Architecture, chooser: &mut dyn Chooser) -> Result<Decoded, PolicyError> {
        let mut out = Decoded::default();
        let e = self.embed_network(tape, arch)?;

        let zeros = vec![0.0; self.config.head_hidden];
        let (mut h, mut c) = (tape.constant(zeros.clone()), tape.constant(zeros.clone()));
        let mut x = e;
        let mut parts = Vec::with_capacity(self.tables.num_parts);
        for (f, (mult, delta)) in self.scale_heads.iter().enumerate() {
            (h, c) = Self::lstm_step(tape, &self.scale_lstm, x, h, c);
            let lm = tape.affine(mult.w, mult.b, h);
            let m = self.decide(tape, Decision::Multiplier(f), lm, vec![true; self.tables.scale_table.len()], chooser, &mut out)?;
            let ld = tape.affine(delta.w, delta.b, h);
            let d = self.decide(
                tape,
                Decision::FilterDelta(f),
                ld,
                vec![true; self.tables.filter_delta_table.len()],
                chooser,
                &mut out,
            )?;
            let xm = tape.row(self.scale_inputs.0, m);
            let xd = tape.row(self.scale_inputs.1, d);
            x = tape.add(xm, xd);
            parts.push(PartScale { multiplier: m, filter_delta: d });
        }

        let mut head = InsertHead { h: tape.constant(zeros.clone()), c: tape.constant(zeros), x: e };
        let kind_mask: Vec<bool> = InsertKind::ALL.iter().map(|&k| kind_allowed(arch, k, &self.tables.space)).collect();
        let kind = InsertKind::ALL[self.field(tape, &mut head, Field::Kind, kind_mask, chooser, &mut out)?];
        let d = &self.tables.space.domains;
        let insert = match (kind, arch) {
            (InsertKind::Keep, _) => InsertAction::Keep,
            (InsertKind::Remove, _) => {
                let mask = valid_positions(arch, InsertKind::Remove, &self.tables);
                InsertAction::Remove { position: self.field(tape, &mut head, Field::Position, mask, chooser, &mut out)? }
            }
            (InsertKind::Insert, Architecture::Layers(_)) => {
                let mask = valid_positions(arch, InsertKind::Insert, &self.tables);
                let position = self.field(tape, &mut head, Field::Position, mask, chooser, &mut out)?;
                let all = |n| vec![true; n];
                let op = d.layer_ops[self.field(tape, &mut head, Field::OpKind, all(d.layer_ops.len()), chooser, &mut out)?];
                let mut layer = LayerSpec {
                    op_kind: op,
                    filter_width: 0,
                    pool_width: 0,
                    channels: 0,
                    activation: Activation::None,
                    src1: position as i32 - 1,
                    src2: -1,
                };
                if op.is_conv() {
                    layer.filter_width = d.filter_widths
                        [self.field(tape, &mut head, Field::FilterWidth, all(d.filter_widths.len()), chooser, &mut out)?];
                }
                if op.is_pool() {
                    layer.pool_width = d.pool_widths
                        [self.field(tape, &mut head, Field::PoolWidth, all(d.pool_widths.len()), chooser, &mut out)?];
                }
                if op.is_conv() {
                    layer.channels = d.layer_channels
                        [self.field(tape, &mut head, Field::Channels, all(d.layer_channels.len()), chooser, &mut out)?];
                }
                if op.takes_activation() {
                    layer.activation = d.activations
                        [self.field(tape, &mut head, Field::Activation, all(d.activations.len()), chooser, &mut out)?];
                }
                let slots = field_size(self.mode, &self.tables, Field::Src2);
                let src_mask: Vec<bool> = (0..slots).map(|s| s <= position).collect();
                layer.src2 = self.field(tape, &mut head, Field::Src2, src_mask, chooser, &mut out)? as i32 - 1;
                InsertAction::Insert { position, payload: Payload::Layer(layer) }
            }
            (InsertKind::Insert, Architecture::Cell { branches, .. }) => {
                let all = |n| vec![true; n];
                let bt = d.branch_types
                    [self.field(tape, &mut head, Field::BranchType, all(d.branch_types.len()), chooser, &mut out)?];
                let mut branch = BranchSpec {
                    branch_type: bt,
                    filter_width: 0,
                    pool_width: 0,
                    channels: 0,
                    src1: 0,
                    src2: 0,
                    propagate: true,
                };
                if bt.uses_filter_width() {
                    branch.filter_width = d.filter_widths
                        [self.field(tape, &mut head, Field::FilterWidth, all(d.filter_widths.len()), chooser, &mut out)?];
                }
                if bt.uses_pool_width() {
                    branch.pool_width = d.pool_widths
                        [self.field(tape, &mut head, Field::PoolWidth, all(d.pool_widths.len()), chooser, &mut out)?];
                }
                if bt.uses_channels() {
                    branch.channels = d.branch_channels
                        [self.field(tape, &mut head, Field::Channels, all(d.branch_channels.len()), chooser, &mut out)?];
                }
                let b = branches.len();
                let slots = field_size(self.mode, &self.tables, Field::Src1);
                let src_mask: Vec<bool> = (0..slots).map(|s| s <= b).collect();
                branch.src1 = self.field(tape, &mut head, Field::Src1, src_mask.clone(), chooser, &mut out)? as u32;
                branch.src2 = self.field(tape, &mut head, Field::Src2, src_mask, chooser, &mut out)? as u32;
                branch.propagate = self.field(tape, &mut head, Field::Propagate, all(2), chooser, &mut out)? == 1;
                InsertAction::Insert { position: b, payload: Payload::Branch(branch) }
            }
        };
        out.bundle = Some(ActionBundle { scale: ScaleAction { parts }, insert });
        Ok(out)
    }

    fn field(
        &self,
        tape: &mut Tape,
        head: &mut InsertHead,
        field: Field,
        mask: Vec<bool>,
        chooser: &mut dyn Chooser,
        out: &mut Decoded,
    ) -> Result<usize, PolicyError> {
        let (proj, input) = &self.insert_heads[&field];
        (head.h, head.c) = Self::lstm_step(tape, &self.insert_lstm, head.x, head.h, head.c);
        let logits = tape.affine(proj.w, proj.b, head.h);
        let choice = self.decide(tape, Decision::Insert(field), logits, mask, chooser, out)?;
        head.x = tape.row(*input, choice);
        Ok(choice)
    }

    fn total(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
        tape.sum(nodes.to_vec())
    }

    /// Samples one action bundle. The result is a pure function of
    /// `(params, arch, seed)`.
    pub fn sample(&self, params: &ParamSet, arch: &Architecture, seed: u64) -> Result<SampledStep, PolicyError> {
        self.check(params, arch)?;
        let mut tape = Tape::new(params);
        let mut chooser = Sampler(ChaCha8Rng::seed_from_u64(seed));
        let decoded = self.decode(&mut tape, arch, &mut chooser)?;
        let lp = Self::total(&mut tape, &decoded.logprobs);
        let ent = Self::total(&mut tape, &decoded.entropies);
        Ok(SampledStep {
            bundle: decoded.bundle.expect("decode sets the bundle"),
            logprob: tape.value(lp)[0],
            entropy: tape.value(ent)[0],
            seed,
        })
    }

    fn replay<'p>(&self, params: &'p ParamSet, arch: &Architecture, bundle: &ActionBundle) -> Result<(Tape<'p>, Decoded), PolicyError> {
        self.check(params, arch)?;
        let mut chooser = Replay(self.encode(bundle)?);
        let mut tape = Tape::new(params);
        let decoded = self.decode(&mut tape, arch, &mut chooser)?;
        if decoded.bundle.as_ref() != Some(bundle) {
            return Err(PolicyError::ImpossibleAction("bundle carries values the decoder would not emit".into()));
        }
        Ok((tape, decoded))
    }

    /// Log-probability of `bundle` for `arch`.
    pub fn logprob(&self, params: &ParamSet, arch: &Architecture, bundle: &ActionBundle) -> Result<f64, PolicyError> {
        let (mut tape, decoded) = self.replay(params, arch, bundle)?;
        let lp = Self::total(&mut tape, &decoded.logprobs);
        Ok(tape.value(lp)[0])
    }

    /// Every decided field with its masked distribution.
    pub fn distributions(
        &self,
        params: &ParamSet,
        arch: &Architecture,
        bundle: &ActionBundle,
    ) -> Result<Vec<FieldDistribution>, PolicyError> {
        Ok(self.replay(params, arch, bundle)?.1.distributions)
    }

    /// Adds `weight · ∇logπ + entropy_weight · ∇H` to `grad` and returns the
    /// log-probability.
    pub fn accumulate_grad(
        &self,
        params: &ParamSet,
        arch: &Architecture,
        bundle: &ActionBundle,
        weight: f64,
        entropy_weight: f64,
        grad: &mut ParamSet,
    ) -> Result<f64, PolicyError> {
        if !grad.same_layout(&self.layout) {
            return Err(PolicyError::Layout);
        }
        let (mut tape, decoded) = self.replay(params, arch, bundle)?;
        let lp = Self::total(&mut tape, &decoded.logprobs);
        let value = tape.value(lp)[0];
        let mut terms = vec![tape.scale(lp, weight)];
        if entropy_weight != 0.0 {
            let ent = Self::total(&mut tape, &decoded.entropies);
            terms.push(tape.scale(ent, entropy_weight));
        }
        let objective = tape.sum(terms);
        tape.backward(objective, 1.0, &mut grad.data);
        Ok(value)
    }

    /// Exact gradient of the log-probability.
    pub fn grad_logprob(
        &self,
        params: &ParamSet,
        arch: &Architecture,
        bundle: &ActionBundle,
    ) -> Result<ParamSet, PolicyError> {
        let mut grad = self.zero_params();
        self.accumulate_grad(params, arch, bundle, 1.0, 0.0, &mut grad)?;
        Ok(grad)
    }

    /// Field choices a bundle implies; fields the decoder does not reach are
    /// ignored, values the decoder cannot emit are rejected.
    fn encode(&self, bundle: &ActionBundle) -> Result<HashMap<Decision, usize>, PolicyError> {
        let d = &self.tables.space.domains;
        let mut map = HashMap::new();
        for (f, part) in bundle.scale.parts.iter().enumerate() {
            map.insert(Decision::Multiplier(f), part.multiplier);
            map.insert(Decision::FilterDelta(f), part.filter_delta);
        }
        let mut put = |field, value: Option<usize>| {
            if let Some(v) = value {
                map.insert(Decision::Insert(field), v);
            }
        };
        let index = |domain: &[u32], v: u32| domain.iter().position(|&x| x == v);
        match &bundle.insert {
            InsertAction::Keep => put(Field::Kind, Some(2)),
            InsertAction::Remove { position } => {
                put(Field::Kind, Some(1));
                put(Field::Position, Some(*position));
            }
            InsertAction::Insert { position, payload } => {
                put(Field::Kind, Some(0));
                put(Field::Position, Some(*position));
                match payload {
                    Payload::Layer(l) => {
                        put(Field::OpKind, d.layer_ops.iter().position(|&o| o == l.op_kind));
                        put(Field::FilterWidth, index(&d.filter_widths, l.filter_width));
                        put(Field::PoolWidth, index(&d.pool_widths, l.pool_width));
                        put(Field::Channels, index(&d.layer_channels, l.channels));
                        put(Field::Activation, d.activations.iter().position(|&a| a == l.activation));
                        put(Field::Src2, usize::try_from(l.src2 + 1).ok());
                    }
                    Payload::Branch(b) => {
                        put(Field::BranchType, d.branch_types.iter().position(|&t| t == b.branch_type));
                        put(Field::FilterWidth, index(&d.filter_widths, b.filter_width));
                        put(Field::PoolWidth, index(&d.pool_widths, b.pool_width));
                        put(Field::Channels, index(&d.branch_channels, b.channels));
                        put(Field::Src1, Some(b.src1 as usize));
                        put(Field::Src2, Some(b.src2 as usize));
                        put(Field::Propagate, Some(usize::from(b.propagate)));
                    }
                }
            }
        }
        Ok(map)
    }
}

/// Number of slots of an insert-head field.
pub fn field_size(mode: Mode, tables: &ActionTables, field: Field) -> usize {
    let d = &tables.space.domains;
    match field {
        Field::Kind => InsertKind::ALL.len(),
        Field::Position => tables.position_slots(mode),
        Field::OpKind => d.layer_ops.len(),
        Field::BranchType => d.branch_types.len(),
        Field::FilterWidth => d.filter_widths.len(),
        Field::PoolWidth => d.pool_widths.len(),
        Field::Channels => match mode {
            Mode::LayerNet => d.layer_channels.len(),
            Mode::CellNet => d.branch_channels.len(),
        },
        Field::Activation => d.activations.len(),
        Field::Src1 | Field::Src2 => match mode {
            Mode::LayerNet => tables.position_slots(mode),
            Mode::CellNet => tables.space.max_branches + 1,
        },
        Field::Propagate => 2,
    }
}

struct InsertHead {
    h: NodeId,
    c: NodeId,
    x: NodeId,
}

#[derive(Default)]
struct Decoded {
    bundle: Option<ActionBundle>,
    logprobs: Vec<NodeId>,
    entropies: Vec<NodeId>,
    distributions: Vec<FieldDistribution>,
}

trait Chooser {
    fn choose(&mut self, decision: Decision, probs: &[f64]) -> Result<usize, PolicyError>;
}

struct Sampler(ChaCha8Rng);

impl Chooser for Sampler {
    fn choose(&mut self, _: Decision, probs: &[f64]) -> Result<usize, PolicyError> {
        let u: f64 = self.0.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return Ok(i);
                }
            }
        }
        Ok(last)
    }
}

struct Replay(HashMap<Decision, usize>);

impl Chooser for Replay {
    fn choose(&mut self, decision: Decision, _: &[f64]) -> Result<usize, PolicyError> {
        self.0
            .get(&decision)
            .copied()
            .ok_or_else(|| PolicyError::ImpossibleAction(format!("bundle has no value for {decision:?}")))
    }
}
