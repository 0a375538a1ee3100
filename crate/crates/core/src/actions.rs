//! Morph actions and their application.
//!
//! One search step applies an [`ActionBundle`]: first a [`ScaleAction`] that
//! rescales channel counts and filter widths part by part, then an
//! [`InsertAction`] that inserts, removes or keeps a layer (layer nets) or a
//! branch (cell nets). Every application on a valid architecture yields a
//! valid architecture or a typed error; nothing is left half-applied.

use crate::arch::{
    validate_in, Architecture, BranchSpec, LayerSpec, Mode, SearchSpace, ValidationReport,
};
use serde::{Deserialize, Serialize};

/// Extra slots of the position head beyond the capacity cap.
pub const POSITION_HEADROOM: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionTables {
    pub space: SearchSpace,
    pub scale_table: Vec<f64>,
    pub filter_delta_table: Vec<i32>,
    /// Number of contiguous parts the scale action addresses.
    pub num_parts: usize,
}

impl Default for ActionTables {
    fn default() -> Self {
        ActionTables {
            space: SearchSpace::default(),
            scale_table: vec![0.5, 0.75, 1.0, 1.5, 2.0],
            filter_delta_table: vec![-2, 0, 2],
            num_parts: 4,
        }
    }
}

impl ActionTables {
    pub fn check(&self) -> Result<(), String> {
        self.space.domains.check()?;
        if self.scale_table.is_empty() || self.filter_delta_table.is_empty() {
            return Err("scale and filter-delta tables must be non-empty".into());
        }
        if self.scale_table.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err("scale multipliers must be positive".into());
        }
        if self.num_parts == 0 {
            return Err("num_parts must be at least 1".into());
        }
        if self.space.max_layers == 0 || self.space.max_branches == 0 {
            return Err("capacity caps must be positive".into());
        }
        Ok(())
    }

    /// Slots in the position head for `mode`: capacity plus headroom.
    pub fn position_slots(&self, mode: Mode) -> usize {
        self.space.capacity(mode) + POSITION_HEADROOM
    }

    /// The scale action that changes nothing, if the tables contain 1.0 and 0.
    pub fn identity_scale(&self) -> Option<ScaleAction> {
        let multiplier = self.scale_table.iter().position(|&m| m == 1.0)?;
        let filter_delta = self.filter_delta_table.iter().position(|&d| d == 0)?;
        Some(ScaleAction { parts: vec![PartScale { multiplier, filter_delta }; self.num_parts] })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartScale {
    /// Index into `scale_table`.
    pub multiplier: usize,
    /// Index into `filter_delta_table`.
    pub filter_delta: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaleAction {
    pub parts: Vec<PartScale>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Layer(LayerSpec),
    Branch(BranchSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertKind {
    Insert,
    Remove,
    Keep,
}

impl InsertKind {
    pub const ALL: [InsertKind; 3] = [InsertKind::Insert, InsertKind::Remove, InsertKind::Keep];
}

/// The insert-head decision. For `Remove`, `position` is the index of the
/// removed layer or branch.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InsertAction {
    Insert { position: usize, payload: Payload },
    Remove { position: usize },
    Keep,
}

impl InsertAction {
    pub fn kind(&self) -> InsertKind {
        match self {
            InsertAction::Insert { .. } => InsertKind::Insert,
            InsertAction::Remove { .. } => InsertKind::Remove,
            InsertAction::Keep => InsertKind::Keep,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionBundle {
    pub scale: ScaleAction,
    pub insert: InsertAction,
}

/// One line of the replayable action log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub episode: usize,
    pub branch: usize,
    pub step: usize,
    pub scale: ScaleAction,
    pub insert: InsertAction,
}

#[derive(Debug, thiserror::Error)]
pub enum ActionError {
    #[error("scale action has {got} parts, expected {expected}")]
    PartCount { got: usize, expected: usize },
    #[error("scale index {index} out of range for table of size {len}")]
    ScaleIndex { index: usize, len: usize },
    #[error("payload does not match the architecture mode")]
    WrongMode,
    #[error("insert position {position} out of range 0..={max}")]
    PositionOutOfRange { position: usize, max: usize },
    #[error("capacity of {0} nodes reached")]
    CapacityExceeded(usize),
    #[error("invalid skip source {src2} for insertion at {position}")]
    InvalidSkipSource { src2: i32, position: usize },
    #[error("removal would empty the network")]
    WouldEmpty,
    #[error("remove target {position} does not exist")]
    NoSuchNode { position: usize },
    #[error("morph produced an invalid architecture: {0}")]
    Invalid(ValidationReport),
}

/// Splits `n` nodes into `parts` contiguous ranges, as evenly as possible.
pub fn part_ranges(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    (0..parts).map(|f| (f * n / parts)..((f + 1) * n / parts)).collect()
}

/// Nearest value of `domain`, ties resolved upward.
pub fn snap(value: f64, domain: &[u32]) -> u32 {
    let mut best = domain[0];
    let mut best_dist = (f64::from(best) - value).abs();
    for &d in &domain[1..] {
        let dist = (f64::from(d) - value).abs();
        if dist < best_dist || (dist == best_dist && d > best) {
            best = d;
            best_dist = dist;
        }
    }
    best
}

/// Clamps to `[lo, hi]` and, if the result is even, steps back toward the
/// original value's side to stay odd.
pub fn clamp_odd(value: i64, lo: i64, hi: i64) -> u32 {
    let mut v = value.clamp(lo, hi);
    if v % 2 == 0 {
        v = if v + 1 <= hi { v + 1 } else { v - 1 };
    }
    v as u32
}

fn resolve_scale(scale: &ScaleAction, tables: &ActionTables) -> Result<Vec<(f64, i64)>, ActionError> {
    if scale.parts.len() != tables.num_parts {
        return Err(ActionError::PartCount { got: scale.parts.len(), expected: tables.num_parts });
    }
    scale
        .parts
        .iter()
        .map(|p| {
            let m = *tables
                .scale_table
                .get(p.multiplier)
                .ok_or(ActionError::ScaleIndex { index: p.multiplier, len: tables.scale_table.len() })?;
            let d = *tables
                .filter_delta_table
                .get(p.filter_delta)
                .ok_or(ActionError::ScaleIndex { index: p.filter_delta, len: tables.filter_delta_table.len() })?;
            Ok((m, i64::from(d)))
        })
        .collect()
}

fn filter_bounds(domain: &[u32]) -> (i64, i64) {
    let lo = domain.iter().copied().min().unwrap_or(1);
    let hi = domain.iter().copied().max().unwrap_or(7);
    (i64::from(lo), i64::from(hi))
}

/// Rescales each part: conv channels are snapped to the mode's channel domain
/// after multiplying, filter widths shift by the delta and are clamped odd.
pub fn apply_scale(arch: &Architecture, scale: &ScaleAction, tables: &ActionTables) -> Result<Architecture, ActionError> {
    let factors = resolve_scale(scale, tables)?;
    let d = &tables.space.domains;
    let (fw_lo, fw_hi) = filter_bounds(&d.filter_widths);
    let ranges = part_ranges(arch.len(), tables.num_parts);
    let mut out = arch.clone();
    match &mut out {
        Architecture::Layers(layers) => {
            for (range, &(mult, delta)) in ranges.into_iter().zip(&factors) {
                for layer in &mut layers[range] {
                    if layer.op_kind.is_conv() {
                        layer.channels = snap(f64::from(layer.channels) * mult, &d.layer_channels);
                        layer.filter_width = clamp_odd(i64::from(layer.filter_width) + delta, fw_lo, fw_hi);
                    }
                }
            }
        }
        Architecture::Cell { branches, .. } => {
            for (range, &(mult, delta)) in ranges.into_iter().zip(&factors) {
                for b in &mut branches[range] {
                    if b.branch_type.uses_channels() {
                        b.channels = snap(f64::from(b.channels) * mult, &d.branch_channels);
                    }
                    if b.branch_type.uses_filter_width() {
                        b.filter_width = clamp_odd(i64::from(b.filter_width) + delta, fw_lo, fw_hi);
                    }
                }
            }
        }
    }
    checked(out, &tables.space)
}

fn checked(arch: Architecture, space: &SearchSpace) -> Result<Architecture, ActionError> {
    let report = validate_in(&arch, space);
    if report.is_ok() {
        Ok(arch)
    } else {
        Err(ActionError::Invalid(report))
    }
}

/// Inserts `payload` as layer `position`. The new layer reads layer
/// `position - 1` (or the input), downstream references shift by one, and the
/// layer that previously followed the insertion point now reads the new layer.
pub fn apply_insert_layer(
    arch: &Architecture,
    position: usize,
    payload: &LayerSpec,
    space: &SearchSpace,
) -> Result<Architecture, ActionError> {
    let Architecture::Layers(layers) = arch else {
        return Err(ActionError::WrongMode);
    };
    if layers.len() >= space.max_layers {
        return Err(ActionError::CapacityExceeded(space.max_layers));
    }
    if position > layers.len() {
        return Err(ActionError::PositionOutOfRange { position, max: layers.len() });
    }
    let l = position as i32;
    if payload.src2 < -1 || payload.src2 >= l {
        return Err(ActionError::InvalidSkipSource { src2: payload.src2, position });
    }
    let mut layers = layers.clone();
    for layer in &mut layers[position..] {
        for src in [&mut layer.src1, &mut layer.src2] {
            if *src >= l {
                *src += 1;
            }
        }
    }
    let mut new_layer = payload.clone();
    new_layer.src1 = l - 1;
    layers.insert(position, new_layer);
    if let Some(next) = layers.get_mut(position + 1) {
        if next.src1 == l - 1 {
            next.src1 = l;
        }
    }
    checked(Architecture::Layers(layers), space)
}

/// Appends a branch. Existing branches the new branch reads from stop
/// propagating to the cell output when the new branch itself propagates.
pub fn apply_insert_branch(
    arch: &Architecture,
    payload: &BranchSpec,
    space: &SearchSpace,
) -> Result<Architecture, ActionError> {
    let Architecture::Cell { branches, stacking } = arch else {
        return Err(ActionError::WrongMode);
    };
    if branches.len() >= space.max_branches {
        return Err(ActionError::CapacityExceeded(space.max_branches));
    }
    let mut branches = branches.clone();
    if payload.propagate {
        for slot in [payload.src1, payload.src2] {
            if slot >= 1 {
                if let Some(b) = branches.get_mut(slot as usize - 1) {
                    b.propagate = false;
                }
            }
        }
    }
    branches.push(payload.clone());
    checked(Architecture::Cell { branches, stacking: stacking.clone() }, space)
}

/// Removes layer or branch `position`; references to it are rewired to its
/// `src1` and later indices shift down.
pub fn apply_remove(arch: &Architecture, position: usize, space: &SearchSpace) -> Result<Architecture, ActionError> {
    if arch.len() < 2 {
        return Err(ActionError::WouldEmpty);
    }
    if position >= arch.len() {
        return Err(ActionError::NoSuchNode { position });
    }
    match arch {
        Architecture::Layers(layers) => {
            let mut layers = layers.clone();
            let removed = layers.remove(position);
            let k = position as i32;
            for layer in &mut layers[position..] {
                for src in [&mut layer.src1, &mut layer.src2] {
                    if *src == k {
                        *src = removed.src1;
                    } else if *src > k {
                        *src -= 1;
                    }
                }
            }
            checked(Architecture::Layers(layers), space)
        }
        Architecture::Cell { branches, stacking } => {
            let mut branches = branches.clone();
            let removed = branches.remove(position);
            let slot = position as u32 + 1;
            for b in &mut branches[position..] {
                for src in [&mut b.src1, &mut b.src2] {
                    if *src == slot {
                        *src = removed.src1;
                    } else if *src > slot {
                        *src -= 1;
                    }
                }
            }
            if removed.propagate {
                // undo the cut-off the removed branch imposed on its sources
                for s in [removed.src1, removed.src2] {
                    if s >= 1 {
                        let consumed = branches.iter().any(|b| b.src1 == s || b.src2 == s);
                        if !consumed {
                            branches[s as usize - 1].propagate = true;
                        }
                    }
                }
            }
            if !branches.iter().any(|b| b.propagate) {
                branches.last_mut().expect("at least one branch remains").propagate = true;
            }
            checked(Architecture::Cell { branches, stacking: stacking.clone() }, space)
        }
    }
}

pub fn apply_insert(arch: &Architecture, action: &InsertAction, space: &SearchSpace) -> Result<Architecture, ActionError> {
    match action {
        InsertAction::Keep => Ok(arch.clone()),
        InsertAction::Remove { position } => apply_remove(arch, *position, space),
        InsertAction::Insert { position, payload } => match (arch, payload) {
            (Architecture::Layers(_), Payload::Layer(layer)) => apply_insert_layer(arch, *position, layer, space),
            (Architecture::Cell { branches, .. }, Payload::Branch(branch)) => {
                if *position != branches.len() {
                    return Err(ActionError::PositionOutOfRange { position: *position, max: branches.len() });
                }
                apply_insert_branch(arch, branch, space)
            }
            _ => Err(ActionError::WrongMode),
        },
    }
}

/// Scale, then insert.
pub fn apply_bundle(arch: &Architecture, bundle: &ActionBundle, tables: &ActionTables) -> Result<Architecture, ActionError> {
    let scaled = apply_scale(arch, &bundle.scale, tables)?;
    apply_insert(&scaled, &bundle.insert, &tables.space)
}

/// Whether `kind` is legal at all for `arch`.
pub fn kind_allowed(arch: &Architecture, kind: InsertKind, space: &SearchSpace) -> bool {
    match kind {
        InsertKind::Keep => true,
        InsertKind::Insert => arch.len() < space.capacity(arch.mode()),
        InsertKind::Remove => arch.len() >= 2,
    }
}

/// Mask over the position head's slots. Layer-net inserts may target
/// `0..=L` (slot `L` appends); cell-net inserts always append; removals may
/// target any existing node.
pub fn valid_positions(arch: &Architecture, kind: InsertKind, tables: &ActionTables) -> Vec<bool> {
    let slots = tables.position_slots(arch.mode());
    let len = arch.len();
    let mut mask = vec![false; slots];
    match kind {
        InsertKind::Keep => {}
        InsertKind::Insert => {
            if len < tables.space.capacity(arch.mode()) {
                match arch.mode() {
                    Mode::LayerNet => mask[..=len.min(slots - 1)].iter_mut().for_each(|m| *m = true),
                    Mode::CellNet => mask[len.min(slots - 1)] = true,
                }
            }
        }
        InsertKind::Remove => mask[..len.min(slots)].iter_mut().for_each(|m| *m = true),
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{random_architecture, Activation, BranchType, OpKind, RandomLimits, StackingTemplate};
    use proptest::prelude::*;

    fn chain(channels: &[u32]) -> Architecture {
        Architecture::Layers(
            channels.iter().enumerate().map(|(i, &c)| LayerSpec::conv(3, c, Activation::Relu, i as i32 - 1)).collect(),
        )
    }

    fn uniform_scale(tables: &ActionTables, mult: f64, delta: i32) -> ScaleAction {
        let multiplier = tables.scale_table.iter().position(|&m| m == mult).unwrap();
        let filter_delta = tables.filter_delta_table.iter().position(|&d| d == delta).unwrap();
        ScaleAction { parts: vec![PartScale { multiplier, filter_delta }; tables.num_parts] }
    }

    fn branch(branch_type: BranchType, src1: u32, src2: u32, propagate: bool) -> BranchSpec {
        BranchSpec {
            branch_type,
            filter_width: if branch_type.uses_filter_width() { 3 } else { 0 },
            pool_width: if branch_type.uses_pool_width() { 2 } else { 0 },
            channels: if branch_type.uses_channels() { 16 } else { 0 },
            src1,
            src2,
            propagate,
        }
    }

    #[test]
    fn identity_scale_is_fixed_point() {
        let tables = ActionTables::default();
        let id = tables.identity_scale().unwrap();
        for seed in 0..100 {
            for mode in [Mode::LayerNet, Mode::CellNet] {
                let arch = random_architecture(seed, mode, &RandomLimits::default());
                assert_eq!(apply_scale(&arch, &id, &tables).unwrap(), arch);
            }
        }
    }

    #[test]
    fn doubling_and_halving_snap_into_domain() {
        let tables = ActionTables::default();
        let up = apply_scale(&chain(&[32]), &uniform_scale(&tables, 2.0, 0), &tables).unwrap();
        assert_eq!(up.layers().unwrap()[0].channels, 64);
        let down = apply_scale(&chain(&[96]), &uniform_scale(&tables, 0.5, 0), &tables).unwrap();
        // 48 is equidistant from 32 and 64
        assert_eq!(down.layers().unwrap()[0].channels, 64);
    }

    #[test]
    fn snap_and_clamp_rules() {
        assert_eq!(snap(48.0, &[16, 32, 64]), 64);
        assert_eq!(snap(40.0, &[16, 32, 64]), 32);
        assert_eq!(snap(1000.0, &[16, 32, 64]), 64);
        assert_eq!(clamp_odd(9, 1, 7), 7);
        assert_eq!(clamp_odd(-1, 1, 7), 1);
        assert_eq!(clamp_odd(5, 1, 7), 5);
    }

    #[test]
    fn parts_are_contiguous_and_even() {
        assert_eq!(part_ranges(10, 4), vec![0..2, 2..5, 5..7, 7..10]);
        assert_eq!(part_ranges(2, 4), vec![0..0, 0..1, 1..1, 1..2]);
        for n in 0..40 {
            let ranges = part_ranges(n, 4);
            assert_eq!(ranges.iter().map(|r| r.len()).sum::<usize>(), n);
            let (lo, hi) = (ranges.iter().map(|r| r.len()).min().unwrap(), ranges.iter().map(|r| r.len()).max().unwrap());
            assert!(hi - lo <= 1);
        }
    }

    #[test]
    fn scale_applies_per_part() {
        let mut tables = ActionTables::default();
        tables.num_parts = 2;
        let arch = chain(&[32, 32, 32, 32]);
        let scale = ScaleAction {
            parts: vec![PartScale { multiplier: 4, filter_delta: 2 }, PartScale { multiplier: 2, filter_delta: 0 }],
        };
        let out = apply_scale(&arch, &scale, &tables).unwrap();
        let got: Vec<(u32, u32)> = out.layers().unwrap().iter().map(|l| (l.channels, l.filter_width)).collect();
        assert_eq!(got, vec![(64, 5), (64, 5), (32, 1), (32, 1)]);
    }

    #[test]
    fn append_without_skip() {
        let arch = chain(&[16, 16, 16]);
        let payload = LayerSpec::conv(5, 32, Activation::Relu, 0);
        let out = apply_insert_layer(&arch, 3, &payload, &SearchSpace::default()).unwrap();
        let layers = out.layers().unwrap();
        assert_eq!(layers.len(), 4);
        assert_eq!((layers[3].src1, layers[3].src2), (2, -1));
        assert_eq!(&layers[..3], arch.layers().unwrap());
    }

    #[test]
    fn insert_after_last_with_skip_two_back() {
        // insert after layer L = 3 with a skip from L - 2 = 1
        let arch = chain(&[16, 16, 16, 16]);
        let payload = LayerSpec::conv(3, 32, Activation::Relu, 0).with_skip(1);
        let out = apply_insert_layer(&arch, 4, &payload, &SearchSpace::default()).unwrap();
        let new = &out.layers().unwrap()[4];
        assert_eq!((new.src1, new.src2), (3, 1));
    }

    #[test]
    fn insert_shifts_downstream_references() {
        let mut layers = chain(&[16, 16, 16]).layers().unwrap().to_vec();
        layers[2].src2 = 1;
        let arch = Architecture::Layers(layers);
        let out = apply_insert_layer(&arch, 1, &LayerSpec::conv(3, 16, Activation::Relu, 0), &SearchSpace::default())
            .unwrap();
        let layers = out.layers().unwrap();
        assert_eq!(layers[3].src2, 2);
        assert_eq!(layers[1].src1, 0);
        // the old successor now reads the inserted layer
        assert_eq!(layers[2].src1, 1);
        assert_eq!(layers[3].src1, 2);
    }

    #[test]
    fn insert_rejects_bad_skip_and_capacity() {
        let arch = chain(&[16, 16]);
        let payload = LayerSpec::conv(3, 16, Activation::Relu, 0).with_skip(1);
        assert!(matches!(
            apply_insert_layer(&arch, 1, &payload, &SearchSpace::default()),
            Err(ActionError::InvalidSkipSource { src2: 1, position: 1 })
        ));
        let full = chain(&[16; 32]);
        assert!(matches!(
            apply_insert_layer(&full, 0, &LayerSpec::conv(3, 16, Activation::Relu, 0), &SearchSpace::default()),
            Err(ActionError::CapacityExceeded(32))
        ));
    }

    #[test]
    fn remove_rewires_skip_target_of_add() {
        let layers = vec![
            LayerSpec::conv(3, 16, Activation::Relu, -1),
            LayerSpec::conv(3, 16, Activation::Relu, 0),
            LayerSpec::conv(3, 16, Activation::Relu, 1),
            LayerSpec::merge(OpKind::Add, Activation::None, 2, 1),
        ];
        let out = apply_remove(&Architecture::Layers(layers), 1, &SearchSpace::default()).unwrap();
        let layers = out.layers().unwrap();
        assert_eq!(layers.len(), 3);
        // layer 2 (now 1) read the removed node; it and the add's skip go to its src1 = 0
        assert_eq!(layers[1].src1, 0);
        assert_eq!((layers[2].src1, layers[2].src2), (1, 0));
    }

    #[test]
    fn remove_tail_truncates() {
        let arch = chain(&[16, 32, 64]);
        let out = apply_remove(&arch, 2, &SearchSpace::default()).unwrap();
        assert_eq!(out.layers().unwrap(), &arch.layers().unwrap()[..2]);
    }

    #[test]
    fn remove_guard() {
        assert!(matches!(apply_remove(&chain(&[16]), 0, &SearchSpace::default()), Err(ActionError::WouldEmpty)));
    }

    #[test]
    fn inserting_consumer_cuts_propagation() {
        let arch = Architecture::Cell {
            branches: vec![branch(BranchType::ConvNone, 0, 0, true), branch(BranchType::ConvConv, 0, 1, true)],
            stacking: StackingTemplate::default(),
        };
        let new = branch(BranchType::ConvMaxpool, 2, 0, true);
        let out = apply_insert_branch(&arch, &new, &SearchSpace::default()).unwrap();
        let b = out.branches().unwrap();
        assert!(b[0].propagate);
        assert!(!b[1].propagate);
        assert!(b[2].propagate);

        let independent = branch(BranchType::ConvNone, 0, 0, true);
        let out = apply_insert_branch(&arch, &independent, &SearchSpace::default()).unwrap();
        assert_eq!(&out.branches().unwrap()[..2], arch.branches().unwrap());
    }

    #[test]
    fn remove_then_reinsert_tail_branch_restores_cell() {
        let stacking = StackingTemplate::default();
        let seed = Architecture::Cell { branches: vec![branch(BranchType::ConvNone, 0, 0, true)], stacking };
        let base =
            apply_insert_branch(&seed, &branch(BranchType::AvgpoolNone, 1, 0, true), &SearchSpace::default()).unwrap();
        let tail = branch(BranchType::ConvConv, 2, 1, true);
        let full = apply_insert_branch(&base, &tail, &SearchSpace::default()).unwrap();
        let removed = apply_remove(&full, 2, &SearchSpace::default()).unwrap();
        assert_eq!(removed, base);
        let again = apply_insert_branch(&removed, &tail, &SearchSpace::default()).unwrap();
        assert_eq!(crate::arch::to_json(&again).unwrap(), crate::arch::to_json(&full).unwrap());
    }

    #[test]
    fn position_masks() {
        let tables = ActionTables::default();
        let arch = chain(&[16, 16, 16]);
        let mask = valid_positions(&arch, InsertKind::Insert, &tables);
        assert_eq!(mask.len(), 37);
        assert!(mask[..=3].iter().all(|&m| m) && mask[4..].iter().all(|&m| !m));
        let remove = valid_positions(&arch, InsertKind::Remove, &tables);
        assert!(remove[..3].iter().all(|&m| m) && remove[3..].iter().all(|&m| !m));

        let full = chain(&[16; 32]);
        assert!(valid_positions(&full, InsertKind::Insert, &tables).iter().all(|&m| !m));
        assert!(!kind_allowed(&full, InsertKind::Insert, &tables.space));
        assert_eq!(valid_positions(&full, InsertKind::Remove, &tables).iter().filter(|&&m| m).count(), 32);
        assert!(!kind_allowed(&chain(&[16]), InsertKind::Remove, &tables.space));
    }

    #[test]
    fn action_json_shape() {
        let bundle = ActionBundle {
            scale: ScaleAction { parts: vec![PartScale { multiplier: 2, filter_delta: 1 }] },
            insert: InsertAction::Remove { position: 3 },
        };
        let text = serde_json::to_string(&bundle).unwrap();
        assert_eq!(text, r#"{"scale":[{"multiplier":2,"filter_delta":1}],"insert":{"kind":"remove","position":3}}"#);
        assert_eq!(serde_json::from_str::<ActionBundle>(&text).unwrap(), bundle);
        let insert = InsertAction::Insert {
            position: 0,
            payload: Payload::Branch(branch(BranchType::ConvNone, 0, 0, true)),
        };
        let back: InsertAction = serde_json::from_str(&serde_json::to_string(&insert).unwrap()).unwrap();
        assert_eq!(back, insert);
    }

    fn shift(src: i32, l: i32) -> i32 {
        if src >= l {
            src + 1
        } else {
            src
        }
    }

    proptest! {
        #[test]
        fn insert_reindexes_every_reference(seed in 0u64..5000, pos in 0usize..16, skip in -1i32..16) {
            let arch = random_architecture(seed, Mode::LayerNet, &RandomLimits::default());
            let old = arch.layers().unwrap().to_vec();
            let position = pos % (old.len() + 1);
            let src2 = skip.min(position as i32 - 1);
            let payload = LayerSpec::conv(3, 16, Activation::Relu, 0).with_skip(src2);
            let out = apply_insert_layer(&arch, position, &payload, &SearchSpace::default()).unwrap();
            let new = out.layers().unwrap();
            prop_assert_eq!(new.len(), old.len() + 1);
            let l = position as i32;
            for (i, layer) in old.iter().enumerate() {
                let j = if i < position { i } else { i + 1 };
                let mut expect_src1 = shift(layer.src1, l);
                if i == position && layer.src1 == l - 1 {
                    expect_src1 = l;
                }
                prop_assert_eq!(new[j].src1, expect_src1);
                prop_assert_eq!(new[j].src2, shift(layer.src2, l));
            }
            prop_assert_eq!(new[position].src1, l - 1);
            prop_assert_eq!(new[position].src2, src2);
        }

        #[test]
        fn morphs_preserve_cardinality(seed in 0u64..5000, pos in 0usize..40) {
            let tables = ActionTables::default();
            for mode in [Mode::LayerNet, Mode::CellNet] {
                let arch = random_architecture(seed, mode, &RandomLimits::default());
                let n = arch.len();
                let removed = apply_remove(&arch, pos % n, &tables.space);
                if n >= 2 {
                    prop_assert_eq!(removed.unwrap().len(), n - 1);
                } else {
                    prop_assert!(removed.is_err());
                }
                prop_assert_eq!(apply_insert(&arch, &InsertAction::Keep, &tables.space).unwrap(), arch.clone());
            }
        }
    }
}
