//! Shape inference for layer nets.
//!
//! Convolutions are same-padded with stride 1; pools use stride equal to the
//! pool width with ceil division. Wherever two operands meet (an `add`, a
//! `concat`, or a skip connection on any other op) and their shapes disagree,
//! an implicit 1×1 [`Adapter`] convolution maps the operand onto the target
//! shape, resampling space by nearest index.
//!
//! Per-op semantics, with `act` the layer activation:
//!
//! | op | output |
//! |----|--------|
//! | conv / dep-sep / factorized / pool | `act(op(src1)) + adapt(src2)` |
//! | add | `act(adapt(src1) + adapt(src2))`, target = min spatial, `src1` channels |
//! | concat | `[adapt(src1), adapt(src2)]` along channels, target = min spatial |
//!
//! `crelu` doubles the channel count of whatever it is applied to.

use crate::arch::{expand_stack, validate_lowered, Architecture, LayerSpec, OpKind, Shape, StackError, ValidationReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Adapter {
    pub cin: usize,
    pub cout: usize,
    pub from: (usize, usize),
    pub to: (usize, usize),
}

impl Adapter {
    pub fn params(&self) -> u64 {
        (self.cin * self.cout + self.cout) as u64
    }

    pub fn flops(&self) -> u64 {
        2 * (self.cin * self.cout * self.to.0 * self.to.1) as u64
    }

    pub fn output(&self) -> Shape {
        Shape::new(self.to.0, self.to.1, self.cout)
    }
}

/// One input of a node: the producing index (`-1` = network input), its raw
/// shape and the adapter applied before use, if any.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Operand {
    pub src: i32,
    pub shape: Shape,
    pub adapter: Option<Adapter>,
}

impl Operand {
    fn new(src: i32, shape: Shape) -> Self {
        Operand { src, shape, adapter: None }
    }

    fn adapted(src: i32, shape: Shape, target: Shape) -> Self {
        let adapter = (shape != target).then_some(Adapter {
            cin: shape.channels,
            cout: target.channels,
            from: (shape.height, shape.width),
            to: (target.height, target.width),
        });
        Operand { src, shape, adapter }
    }

    /// Shape after the adapter.
    pub fn effective(&self) -> Shape {
        self.adapter.map_or(self.shape, |a| a.output())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub layer: LayerSpec,
    pub main: Operand,
    pub second: Option<Operand>,
    /// Shape of the op result before the activation.
    pub pre_activation: Shape,
    pub output: Shape,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    pub input: Shape,
    pub nodes: Vec<Node>,
}

impl Graph {
    pub fn output(&self) -> Shape {
        self.nodes.last().map_or(self.input, |n| n.output)
    }

    pub fn shape_of(&self, src: i32) -> Shape {
        if src < 0 {
            self.input
        } else {
            self.nodes[src as usize].output
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error(transparent)]
    Stack(#[from] StackError),
    #[error("invalid layer net: {0}")]
    Invalid(ValidationReport),
    #[error("empty network")]
    Empty,
}

/// Plans a layer net, or the expansion of a cell net.
pub fn plan(arch: &Architecture, input: Shape) -> Result<Graph, GraphError> {
    match arch {
        Architecture::Layers(layers) => plan_layers(layers, input),
        Architecture::Cell { .. } => match expand_stack(arch, input)? {
            Architecture::Layers(layers) => plan_layers(&layers, input),
            Architecture::Cell { .. } => unreachable!("expansion yields a layer net"),
        },
    }
}

pub fn plan_layers(layers: &[LayerSpec], input: Shape) -> Result<Graph, GraphError> {
    if layers.is_empty() {
        return Err(GraphError::Empty);
    }
    let report = validate_lowered(layers);
    if !report.is_ok() {
        return Err(GraphError::Invalid(report));
    }
    let mut graph = Graph { input, nodes: Vec::with_capacity(layers.len()) };
    for layer in layers {
        let s1 = graph.shape_of(layer.src1);
        let factor = layer.activation.channel_factor();
        let node = match layer.op_kind {
            OpKind::Add => {
                let s2 = graph.shape_of(layer.src2);
                let target = Shape::new(s1.height.min(s2.height), s1.width.min(s2.width), s1.channels);
                Node {
                    layer: layer.clone(),
                    main: Operand::adapted(layer.src1, s1, target),
                    second: Some(Operand::adapted(layer.src2, s2, target)),
                    pre_activation: target,
                    output: Shape::new(target.height, target.width, target.channels * factor),
                }
            }
            OpKind::Concat => {
                let s2 = graph.shape_of(layer.src2);
                let (h, w) = (s1.height.min(s2.height), s1.width.min(s2.width));
                let out = Shape::new(h, w, s1.channels + s2.channels);
                Node {
                    layer: layer.clone(),
                    main: Operand::adapted(layer.src1, s1, Shape::new(h, w, s1.channels)),
                    second: Some(Operand::adapted(layer.src2, s2, Shape::new(h, w, s2.channels))),
                    pre_activation: out,
                    output: out,
                }
            }
            op => {
                let pre = if op.is_pool() {
                    let p = layer.pool_width as usize;
                    Shape::new(s1.height.div_ceil(p), s1.width.div_ceil(p), s1.channels)
                } else {
                    Shape::new(s1.height, s1.width, layer.channels as usize)
                };
                let out = Shape::new(pre.height, pre.width, pre.channels * factor);
                let second = (layer.src2 >= 0).then(|| Operand::adapted(layer.src2, graph.shape_of(layer.src2), out));
                Node { layer: layer.clone(), main: Operand::new(layer.src1, s1), second, pre_activation: pre, output: out }
            }
        };
        graph.nodes.push(node);
    }
    Ok(graph)
}
