//! Lowering of a cell net into a layer net.
//!
//! Each stage holds `cells_per_stage` copies of the cell; an average-pool
//! stride-2 reduction separates consecutive stages and convolution channel
//! counts in stage `s` are multiplied by `stage_channel_multiplier^s`.
//!
//! A branch `(op1, op2)` lowers to `op1(src1) + op2(src2)`; a `*_none` branch
//! uses the identity for `op2`. The cell output is the channel concatenation
//! of all propagating branches.

use super::{
    validate_structure, Activation, Architecture, BranchSpec, BranchType, LayerSpec, OpKind, Shape, ValidationReport,
    FACTORIZED_WIDTH,
};

#[derive(Debug, thiserror::Error)]
pub enum StackError {
    #[error("expand_stack needs a cell net")]
    NotACell,
    #[error("invalid cell: {0}")]
    Invalid(ValidationReport),
    #[error("shape underflow: spatial extent {height}x{width} entering stage {stage}")]
    ShapeUnderflow { stage: u32, height: usize, width: usize },
}

/// Expands a cell net into a layer net. Deterministic.
pub fn expand_stack(arch: &Architecture, input: Shape) -> Result<Architecture, StackError> {
    let Architecture::Cell { branches, stacking } = arch else {
        return Err(StackError::NotACell);
    };
    let report = validate_structure(arch);
    if !report.is_ok() {
        return Err(StackError::Invalid(report));
    }
    let mut out = Lowering { layers: Vec::new(), extents: Vec::new(), input: (input.height, input.width) };
    let mut prev: i32 = -1;
    for stage in 0..stacking.num_stages {
        if stage > 0 {
            prev = out.push(LayerSpec::pool(OpKind::AvgPool2d, 2, prev));
            let (height, width) = out.extent(prev);
            if height < 2 || width < 2 {
                return Err(StackError::ShapeUnderflow { stage: stage + 1, height, width });
            }
        }
        let scale = stacking.stage_channel_multiplier.0.powi(stage as i32);
        for _ in 0..stacking.cells_per_stage {
            prev = out.cell(branches, scale, prev);
        }
    }
    Ok(Architecture::Layers(out.layers))
}

fn scaled_channels(channels: u32, scale: f64) -> u32 {
    ((f64::from(channels) * scale).round() as u32).max(1)
}

struct Lowering {
    layers: Vec<LayerSpec>,
    extents: Vec<(usize, usize)>,
    input: (usize, usize),
}

impl Lowering {
    fn extent(&self, src: i32) -> (usize, usize) {
        if src < 0 {
            self.input
        } else {
            self.extents[src as usize]
        }
    }

    fn push(&mut self, layer: LayerSpec) -> i32 {
        let (h1, w1) = self.extent(layer.src1);
        let (mut h, mut w) = (h1, w1);
        if layer.src2 >= 0 || layer.op_kind.is_merge() {
            let (h2, w2) = self.extent(layer.src2);
            h = h.min(h2);
            w = w.min(w2);
        }
        if layer.op_kind.is_pool() {
            let p = layer.pool_width as usize;
            h = h.div_ceil(p);
            w = w.div_ceil(p);
        }
        self.layers.push(layer);
        self.extents.push((h, w));
        (self.layers.len() - 1) as i32
    }

    fn cell(&mut self, branches: &[BranchSpec], scale: f64, input: i32) -> i32 {
        let mut slots = vec![input];
        for b in branches {
            let s1 = slots[b.src1 as usize];
            let s2 = slots[b.src2 as usize];
            let ch = scaled_channels(b.channels, scale);
            let conv = |src| LayerSpec::conv(b.filter_width, ch, Activation::Relu, src);
            let pool = |op, src| LayerSpec::pool(op, b.pool_width, src);
            let first = match b.branch_type {
                BranchType::ConvConv | BranchType::ConvMaxpool | BranchType::ConvAvgpool | BranchType::ConvNone => {
                    self.push(conv(s1))
                }
                BranchType::MaxpoolNone => self.push(pool(OpKind::MaxPool2d, s1)),
                BranchType::AvgpoolNone => self.push(pool(OpKind::AvgPool2d, s1)),
                BranchType::Sep17x71None => self.push(LayerSpec {
                    op_kind: OpKind::FactorizedConv,
                    filter_width: FACTORIZED_WIDTH,
                    pool_width: 0,
                    channels: ch,
                    activation: Activation::Relu,
                    src1: s1,
                    src2: -1,
                }),
            };
            let second = match b.branch_type {
                BranchType::ConvConv => self.push(conv(s2)),
                BranchType::ConvMaxpool => self.push(pool(OpKind::MaxPool2d, s2)),
                BranchType::ConvAvgpool => self.push(pool(OpKind::AvgPool2d, s2)),
                _ => s2,
            };
            let out = self.push(LayerSpec::merge(OpKind::Add, Activation::None, first, second));
            slots.push(out);
        }
        let mut outputs = branches.iter().enumerate().filter(|(_, b)| b.propagate).map(|(i, _)| slots[i + 1]);
        let first = outputs.next().expect("a valid cell has a propagating branch");
        outputs.fold(first, |acc, next| self.push(LayerSpec::merge(OpKind::Concat, Activation::None, acc, next)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{validate_lowered, Multiplier, Reduction, StackingTemplate};

    fn conv_none(src1: u32, src2: u32, channels: u32) -> BranchSpec {
        BranchSpec {
            branch_type: BranchType::ConvNone,
            filter_width: 3,
            pool_width: 0,
            channels,
            src1,
            src2,
            propagate: true,
        }
    }

    fn template(cells: u32, stages: u32, mult: f64) -> StackingTemplate {
        StackingTemplate {
            cells_per_stage: cells,
            num_stages: stages,
            stage_channel_multiplier: Multiplier(mult),
            reduction: Reduction::AvgPoolStride2,
        }
    }

    #[test]
    fn identity_stage_has_only_branch_layers() {
        let arch = Architecture::Cell { branches: vec![conv_none(0, 0, 16)], stacking: template(1, 1, 2.0) };
        let Architecture::Layers(layers) = expand_stack(&arch, Shape::new(8, 8, 3)).unwrap() else { panic!() };
        assert_eq!(
            layers,
            vec![
                LayerSpec::conv(3, 16, Activation::Relu, -1),
                LayerSpec::merge(OpKind::Add, Activation::None, 0, -1),
            ]
        );
        assert!(!layers.iter().any(|l| l.op_kind == OpKind::AvgPool2d));
    }

    #[test]
    fn second_stage_channels_are_doubled() {
        let mut b1 = conv_none(0, 0, 12);
        b1.propagate = true;
        let b2 = BranchSpec { branch_type: BranchType::ConvConv, ..conv_none(1, 0, 24) };
        let arch = Architecture::Cell { branches: vec![b1, b2], stacking: template(1, 2, 2.0) };
        let Architecture::Layers(layers) = expand_stack(&arch, Shape::new(8, 8, 3)).unwrap() else { panic!() };
        assert!(validate_lowered(&layers).is_ok());
        let reduction = layers.iter().position(|l| l.op_kind == OpKind::AvgPool2d).unwrap();
        let stage1: Vec<u32> = layers[..reduction].iter().filter(|l| l.op_kind.is_conv()).map(|l| l.channels).collect();
        let stage2: Vec<u32> =
            layers[reduction + 1..].iter().filter(|l| l.op_kind.is_conv()).map(|l| l.channels).collect();
        assert_eq!(stage1, vec![12, 24, 24]);
        assert_eq!(stage2, stage1.iter().map(|c| c * 2).collect::<Vec<_>>());
    }

    #[test]
    fn underflow_entering_fourth_stage() {
        let arch = Architecture::Cell { branches: vec![conv_none(0, 0, 8)], stacking: template(1, 4, 1.0) };
        // 8 -> 4 -> 2 -> 1
        match expand_stack(&arch, Shape::new(8, 8, 1)) {
            Err(StackError::ShapeUnderflow { stage: 4, height: 1, width: 1 }) => {}
            other => panic!("{other:?}"),
        }
        let three = Architecture::Cell { branches: vec![conv_none(0, 0, 8)], stacking: template(1, 3, 1.0) };
        assert!(expand_stack(&three, Shape::new(8, 8, 1)).is_ok());
    }

    #[test]
    fn non_propagating_branches_are_not_concatenated() {
        let mut b0 = conv_none(0, 0, 8);
        b0.propagate = false;
        let b1 = conv_none(1, 0, 8);
        let b2 = conv_none(0, 0, 16);
        let arch = Architecture::Cell { branches: vec![b0, b1, b2], stacking: template(1, 1, 1.0) };
        let Architecture::Layers(layers) = expand_stack(&arch, Shape::new(8, 8, 3)).unwrap() else { panic!() };
        let concats: Vec<&LayerSpec> = layers.iter().filter(|l| l.op_kind == OpKind::Concat).collect();
        assert_eq!(concats.len(), 1);
        // branch outputs are the add layers at 1, 3, 5; only 3 and 5 propagate
        assert_eq!((concats[0].src1, concats[0].src2), (3, 5));
    }

    #[test]
    fn expansion_is_deterministic() {
        let limits = crate::arch::RandomLimits::default();
        for seed in 0..20 {
            let arch = crate::arch::random_architecture(seed, crate::arch::Mode::CellNet, &limits);
            let a = expand_stack(&arch, Shape::new(32, 32, 3));
            let b = expand_stack(&arch, Shape::new(32, 32, 3));
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    assert_eq!(a, b);
                    assert!(validate_lowered(a.layers().unwrap()).is_ok());
                }
                (Err(StackError::ShapeUnderflow { stage: s1, .. }), Err(StackError::ShapeUnderflow { stage: s2, .. })) => {
                    assert_eq!(s1, s2)
                }
                other => panic!("{other:?}"),
            }
        }
    }
}
