//! Differentiable f64 network built from a planned layer graph.
//!
//! Batches are stored channel-major (`C×N×H×W`), so a convolution is one
//! matrix product over an im2col buffer and channel concatenation is plain
//! buffer concatenation. Convolutions are same-padded, pools are ceil-mode
//! with stride equal to the window, and adapters resample by nearest index
//! before a 1×1 convolution. The classifier head is global average pooling
//! followed by a linear layer and softmax cross-entropy.

use crate::arch::{Activation, Architecture, OpKind, Shape};
use crate::graph::{plan, Adapter, Graph, GraphError};
use crate::seed;
use rand::Rng;
use std::borrow::Cow;

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Tensor { c, n, h, w, data: vec![0.0; c * n * h * w] }
    }

    /// Packs `C×H×W` samples into one batch.
    pub fn from_samples(samples: &[&[f64]], shape: Shape) -> Self {
        let (c, h, w) = (shape.channels, shape.height, shape.width);
        let n = samples.len();
        let mut t = Tensor::zeros(c, n, h, w);
        let hw = h * w;
        for (ni, s) in samples.iter().enumerate() {
            assert_eq!(s.len(), c * hw, "sample does not match {shape}");
            for ci in 0..c {
                t.data[(ci * n + ni) * hw..][..hw].copy_from_slice(&s[ci * hw..][..hw]);
            }
        }
        t
    }

    /// Elements per channel block.
    fn block(&self) -> usize {
        self.n * self.h * self.w
    }

    fn like(&self, c: usize) -> Tensor {
        Tensor::zeros(c, self.n, self.h, self.w)
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = A·B + beta·C` with `A` m×k and `B` k×n; `*_t` marks operands stored
/// transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reachable from the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Valid output range `lo..hi` for a kernel offset `d` with padding `p`.
fn valid_range(len: usize, d: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(d);
    let hi = (len + p).saturating_sub(d).min(len);
    (lo, hi.max(lo))
}

fn im2col(x: &Tensor, kh: usize, kw: usize) -> Cow<'_, [f64]> {
    if kh == 1 && kw == 1 {
        return Cow::Borrowed(&x.data);
    }
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let (h, w, n) = (x.h, x.w, x.n);
    let cols_n = x.block();
    let mut cols = vec![0.0; x.c * kh * kw * cols_n];
    for ci in 0..x.c {
        for dy in 0..kh {
            let (ylo, yhi) = valid_range(h, dy, ph);
            for dx in 0..kw {
                let (xlo, xhi) = valid_range(w, dx, pw);
                let row = (ci * kh + dy) * kw + dx;
                let dst = &mut cols[row * cols_n..][..cols_n];
                for ni in 0..n {
                    for y in ylo..yhi {
                        let sy = y + dy - ph;
                        let s = ((ci * n + ni) * h + sy) * w;
                        let d = (ni * h + y) * w;
                        dst[d + xlo..d + xhi].copy_from_slice(&x.data[s + xlo + dx - pw..s + xhi + dx - pw]);
                    }
                }
            }
        }
    }
    Cow::Owned(cols)
}

fn col2im(cols: &[f64], like: &Tensor, kh: usize, kw: usize) -> Tensor {
    let mut x = like.like(like.c);
    if kh == 1 && kw == 1 {
        let len = x.data.len();
        x.data.copy_from_slice(&cols[..len]);
        return x;
    }
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let (h, w, n) = (x.h, x.w, x.n);
    let cols_n = x.block();
    for ci in 0..x.c {
        for dy in 0..kh {
            let (ylo, yhi) = valid_range(h, dy, ph);
            for dx in 0..kw {
                let (xlo, xhi) = valid_range(w, dx, pw);
                let row = (ci * kh + dy) * kw + dx;
                let src = &cols[row * cols_n..][..cols_n];
                for ni in 0..n {
                    for y in ylo..yhi {
                        let sy = y + dy - ph;
                        let s = ((ci * n + ni) * h + sy) * w;
                        let d = (ni * h + y) * w;
                        for xx in xlo..xhi {
                            x.data[s + xx + dx - pw] += src[d + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Same-padded `kh×kw` convolution; `weight` is `[co, ci, kh, kw]`.
pub fn conv_forward(x: &Tensor, weight: &[f64], bias: &[f64], co: usize, kh: usize, kw: usize) -> Tensor {
    let k = x.c * kh * kw;
    let cols = im2col(x, kh, kw);
    let mut out = x.like(co);
    let nb = out.block();
    for (o, b) in bias.iter().enumerate() {
        out.data[o * nb..][..nb].fill(*b);
    }
    gemm(co, k, nb, weight, false, &cols, false, &mut out.data, 1.0);
    out
}

/// Accumulates weight and bias gradients, returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &Tensor,
    weight: &[f64],
    dout: &Tensor,
    kh: usize,
    kw: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Tensor {
    let co = dout.c;
    let k = x.c * kh * kw;
    let nb = dout.block();
    let cols = im2col(x, kh, kw);
    gemm(co, nb, k, &dout.data, false, &cols, true, dweight, 1.0);
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += dout.data[o * nb..][..nb].iter().sum::<f64>();
    }
    let mut dcols = vec![0.0; k * nb];
    gemm(k, co, nb, weight, true, &dout.data, false, &mut dcols, 0.0);
    col2im(&dcols, x, kh, kw)
}

/// Depthwise same-padded `k×k` convolution without bias; `weight` is `[c, 1, k, k]`.
pub fn depthwise_forward(x: &Tensor, weight: &[f64], k: usize) -> Tensor {
    let p = (k - 1) / 2;
    let (h, w) = (x.h, x.w);
    let mut out = x.like(x.c);
    for ci in 0..x.c {
        for dy in 0..k {
            let (ylo, yhi) = valid_range(h, dy, p);
            for dx in 0..k {
                let (xlo, xhi) = valid_range(w, dx, p);
                let wv = weight[(ci * k + dy) * k + dx];
                for ni in 0..x.n {
                    let base = (ci * x.n + ni) * h;
                    for y in ylo..yhi {
                        let o = (base + y) * w;
                        let s = (base + y + dy - p) * w;
                        for xx in xlo..xhi {
                            out.data[o + xx] += wv * x.data[s + xx + dx - p];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward(x: &Tensor, weight: &[f64], dout: &Tensor, k: usize, dweight: &mut [f64]) -> Tensor {
    let p = (k - 1) / 2;
    let (h, w) = (x.h, x.w);
    let mut dx = x.like(x.c);
    for ci in 0..x.c {
        for dy in 0..k {
            let (ylo, yhi) = valid_range(h, dy, p);
            for dxk in 0..k {
                let (xlo, xhi) = valid_range(w, dxk, p);
                let wi = (ci * k + dy) * k + dxk;
                let mut acc = 0.0;
                for ni in 0..x.n {
                    let base = (ci * x.n + ni) * h;
                    for y in ylo..yhi {
                        let o = (base + y) * w;
                        let s = (base + y + dy - p) * w;
                        for xx in xlo..xhi {
                            let si = s + xx + dxk - p;
                            acc += dout.data[o + xx] * x.data[si];
                            dx.data[si] += weight[wi] * dout.data[o + xx];
                        }
                    }
                }
                dweight[wi] += acc;
            }
        }
    }
    dx
}

/// Ceil-mode pooling with stride equal to the window. Max pooling also
/// returns the flat input index of each maximum.
pub fn pool_forward(x: &Tensor, p: usize, max: bool) -> (Tensor, Vec<usize>) {
    let (ho, wo) = (x.h.div_ceil(p), x.w.div_ceil(p));
    let mut out = Tensor::zeros(x.c, x.n, ho, wo);
    let mut argmax = if max { vec![0; out.data.len()] } else { Vec::new() };
    for cn in 0..x.c * x.n {
        for oy in 0..ho {
            let (y0, y1) = (oy * p, ((oy + 1) * p).min(x.h));
            for ox in 0..wo {
                let (x0, x1) = (ox * p, ((ox + 1) * p).min(x.w));
                let oi = (cn * ho + oy) * wo + ox;
                if max {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let i = (cn * x.h + y) * x.w + xx;
                            if x.data[i] > best.0 {
                                best = (x.data[i], i);
                            }
                        }
                    }
                    out.data[oi] = best.0;
                    argmax[oi] = best.1;
                } else {
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            sum += x.data[(cn * x.h + y) * x.w + xx];
                        }
                    }
                    out.data[oi] = sum / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    (out, argmax)
}

pub fn pool_backward(x: &Tensor, dout: &Tensor, p: usize, argmax: Option<&[usize]>) -> Tensor {
    let mut dx = x.like(x.c);
    if let Some(argmax) = argmax {
        for (g, &i) in dout.data.iter().zip(argmax) {
            dx.data[i] += g;
        }
        return dx;
    }
    let (ho, wo) = (dout.h, dout.w);
    for cn in 0..x.c * x.n {
        for oy in 0..ho {
            let (y0, y1) = (oy * p, ((oy + 1) * p).min(x.h));
            for ox in 0..wo {
                let (x0, x1) = (ox * p, ((ox + 1) * p).min(x.w));
                let g = dout.data[(cn * ho + oy) * wo + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dx.data[(cn * x.h + y) * x.w + xx] += g;
                    }
                }
            }
        }
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn act_scalar(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu | Activation::Crelu => x.max(0.0),
        Activation::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
        Activation::Selu => {
            SELU_LAMBDA
                * if x > 0.0 {
                    x
                } else {
                    SELU_ALPHA * x.exp_m1()
                }
        }
        Activation::Swish => x * sigmoid(x),
        Activation::None => x,
    }
}

fn act_derivative(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu | Activation::Crelu => f64::from(u8::from(x > 0.0)),
        Activation::Elu => {
            if x > 0.0 {
                1.0
            } else {
                x.exp()
            }
        }
        Activation::Selu => {
            SELU_LAMBDA
                * if x > 0.0 {
                    1.0
                } else {
                    SELU_ALPHA * x.exp()
                }
        }
        Activation::Swish => {
            let s = sigmoid(x);
            s + x * s * (1.0 - s)
        }
        Activation::None => 1.0,
    }
}

/// `crelu` emits `[relu(x), relu(-x)]` along channels.
pub fn activation_forward(pre: &Tensor, a: Activation) -> Tensor {
    match a {
        Activation::None => pre.clone(),
        Activation::Crelu => {
            let mut out = pre.like(pre.c * 2);
            let len = pre.data.len();
            for (i, &x) in pre.data.iter().enumerate() {
                out.data[i] = x.max(0.0);
                out.data[len + i] = (-x).max(0.0);
            }
            out
        }
        _ => Tensor { data: pre.data.iter().map(|&x| act_scalar(a, x)).collect(), ..*pre },
    }
}

pub fn activation_backward(pre: &Tensor, dout: &Tensor, a: Activation) -> Tensor {
    match a {
        Activation::None => dout.clone(),
        Activation::Crelu => {
            let len = pre.data.len();
            let data = pre
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    if x > 0.0 {
                        dout.data[i]
                    } else if x < 0.0 {
                        -dout.data[len + i]
                    } else {
                        0.0
                    }
                })
                .collect();
            Tensor { data, ..*pre }
        }
        _ => Tensor {
            data: pre.data.iter().zip(&dout.data).map(|(&x, &g)| g * act_derivative(a, x)).collect(),
            ..*pre
        },
    }
}

/// Nearest-index spatial resampling to `to = (h, w)`.
pub fn gather_forward(x: &Tensor, to: (usize, usize)) -> Tensor {
    if (x.h, x.w) == to {
        return x.clone();
    }
    let mut out = Tensor::zeros(x.c, x.n, to.0, to.1);
    for cn in 0..x.c * x.n {
        for y in 0..to.0 {
            let sy = y * x.h / to.0;
            for xx in 0..to.1 {
                out.data[(cn * to.0 + y) * to.1 + xx] = x.data[(cn * x.h + sy) * x.w + xx * x.w / to.1];
            }
        }
    }
    out
}

pub fn gather_backward(dout: &Tensor, like: &Tensor) -> Tensor {
    if (dout.h, dout.w) == (like.h, like.w) {
        return dout.clone();
    }
    let mut dx = like.like(like.c);
    for cn in 0..like.c * like.n {
        for y in 0..dout.h {
            let sy = y * like.h / dout.h;
            for xx in 0..dout.w {
                dx.data[(cn * like.h + sy) * like.w + xx * like.w / dout.w] += dout.data[(cn * dout.h + y) * dout.w + xx];
            }
        }
    }
    dx
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor { c: a.c + b.c, data, ..*a }
}

/// One trainable tensor of a [`Network`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    /// Owning lowered layer; `None` for the classifier head.
    pub node: Option<usize>,
    pub role: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Axes aligned on their centers when splicing (kernel height and width).
    pub fn centered_axes(&self) -> Vec<bool> {
        (0..self.shape.len()).map(|i| self.shape.len() == 4 && i >= 2).collect()
    }
}

/// Fresh initialization: weights `U(±sqrt(6/fan_in))`, biases zero.
pub fn fresh_value(spec: &ParamSpec, rng: &mut impl Rng) -> Vec<f64> {
    if spec.is_bias {
        return vec![0.0; spec.len()];
    }
    let bound = (6.0 / spec.fan_in as f64).sqrt();
    (0..spec.len()).map(|_| rng.random_range(-bound..bound)).collect()
}

pub type Weights = Vec<Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Affine {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kernel {
    Conv(Affine),
    DepSep { depthwise: usize, pointwise: Affine },
    Factorized { a: Affine, b: Affine },
    Pool { max: bool },
    Merge,
}

#[derive(Clone, Debug)]
struct Slots {
    kernel: Kernel,
    main_adapter: Option<(Adapter, Affine)>,
    second_adapter: Option<(Adapter, Affine)>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub graph: Graph,
    pub classes: usize,
    pub params: Vec<ParamSpec>,
    slots: Vec<Slots>,
    head: Affine,
}

#[derive(Debug)]
struct NodeTrace {
    main_gathered: Option<Tensor>,
    second_gathered: Option<Tensor>,
    mid: Option<Tensor>,
    argmax: Vec<usize>,
    pre: Tensor,
    out: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl BatchStats {
    pub fn merge(self, o: BatchStats) -> BatchStats {
        BatchStats { loss_sum: self.loss_sum + o.loss_sum, correct: self.correct + o.correct, count: self.count + o.count }
    }
}

impl Network {
    pub fn new(arch: &Architecture, input: Shape, classes: usize) -> Result<Network, GraphError> {
        let graph = plan(arch, input)?;
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(graph.nodes.len());
        for (i, node) in graph.nodes.iter().enumerate() {
            let l = &node.layer;
            let (ci, co, k) = (node.main.shape.channels, node.pre_activation.channels, l.filter_width as usize);
            let kernel = match l.op_kind {
                OpKind::Conv2d => Kernel::Conv(push_affine(&mut params, i, "", [co, ci, k, k])),
                OpKind::DepSepConv2d => {
                    let depthwise = push_param(&mut params, i, "depthwise.weight", vec![ci, 1, k, k], k * k, false);
                    Kernel::DepSep { depthwise, pointwise: push_affine(&mut params, i, "pointwise", [co, ci, 1, 1]) }
                }
                OpKind::FactorizedConv => Kernel::Factorized {
                    a: push_affine(&mut params, i, "stage_a", [co, ci, 1, k]),
                    b: push_affine(&mut params, i, "stage_b", [co, co, k, 1]),
                },
                OpKind::MaxPool2d => Kernel::Pool { max: true },
                OpKind::AvgPool2d => Kernel::Pool { max: false },
                OpKind::Add | OpKind::Concat => Kernel::Merge,
            };
            let mut adapter = |prefix: &str, a: Option<Adapter>| {
                a.map(|a| (a, push_affine(&mut params, i, prefix, [a.cout, a.cin, 1, 1])))
            };
            let main_adapter = adapter("adapter_main", node.main.adapter);
            let second_adapter = adapter("adapter_second", node.second.as_ref().and_then(|s| s.adapter));
            slots.push(Slots { kernel, main_adapter, second_adapter });
        }
        let feat = graph.output().channels;
        params.push(ParamSpec { node: None, role: "head.weight".into(), shape: vec![classes, feat], fan_in: feat, is_bias: false });
        params.push(ParamSpec { node: None, role: "head.bias".into(), shape: vec![classes], fan_in: feat, is_bias: true });
        let head = Affine { w: params.len() - 2, b: params.len() - 1 };
        Ok(Network { graph, classes, params, slots, head })
    }

    /// Trainable scalars excluding the classifier head.
    pub fn backbone_scalars(&self) -> u64 {
        self.params.iter().filter(|p| p.node.is_some()).map(|p| p.len() as u64).sum()
    }

    pub fn total_scalars(&self) -> u64 {
        self.params.iter().map(|p| p.len() as u64).sum()
    }

    pub fn zeros(&self) -> Weights {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// Fresh weights; each tensor draws from its own stream keyed by layer
    /// and role, so it does not depend on the rest of the network.
    pub fn fresh_weights(&self, init_seed: u64) -> Weights {
        self.params.iter().map(|p| fresh_value(p, &mut self.param_rng(init_seed, p))).collect()
    }

    pub fn param_rng(&self, init_seed: u64, p: &ParamSpec) -> rand_chacha::ChaCha8Rng {
        let node = p.node.map_or(0, |n| n as u64 + 1);
        seed::stream(init_seed, &format!("init.{}", p.role), &[node])
    }

    fn forward_trace(&self, w: &Weights, x: &Tensor) -> Vec<NodeTrace> {
        let mut traces: Vec<NodeTrace> = Vec::with_capacity(self.slots.len());
        for (node, slot) in self.graph.nodes.iter().zip(&self.slots) {
            let l = &node.layer;
            let value = |src: i32| if src < 0 { x } else { &traces[src as usize].out };
            let adapt = |t: &Tensor, a: &Option<(Adapter, Affine)>| -> (Tensor, Option<Tensor>) {
                match a {
                    Some((ad, aff)) => {
                        let g = gather_forward(t, ad.to);
                        (conv_forward(&g, &w[aff.w], &w[aff.b], ad.cout, 1, 1), Some(g))
                    }
                    None => (t.clone(), None),
                }
            };
            let x1 = value(l.src1);
            let mut trace = NodeTrace {
                main_gathered: None,
                second_gathered: None,
                mid: None,
                argmax: Vec::new(),
                pre: Tensor::zeros(0, 0, 0, 0),
                out: Tensor::zeros(0, 0, 0, 0),
            };
            match slot.kernel {
                Kernel::Merge => {
                    let (a, ga) = adapt(x1, &slot.main_adapter);
                    let (b, gb) = adapt(value(l.src2), &slot.second_adapter);
                    trace.main_gathered = ga;
                    trace.second_gathered = gb;
                    if l.op_kind == OpKind::Concat {
                        trace.out = concat(&a, &b);
                    } else {
                        let mut pre = a;
                        pre.add_assign(&b);
                        trace.out = activation_forward(&pre, l.activation);
                        trace.pre = pre;
                    }
                }
                kernel => {
                    let pre = match kernel {
                        Kernel::Conv(a) => {
                            let k = l.filter_width as usize;
                            conv_forward(x1, &w[a.w], &w[a.b], node.pre_activation.channels, k, k)
                        }
                        Kernel::DepSep { depthwise, pointwise } => {
                            let mid = depthwise_forward(x1, &w[depthwise], l.filter_width as usize);
                            let pre = conv_forward(&mid, &w[pointwise.w], &w[pointwise.b], node.pre_activation.channels, 1, 1);
                            trace.mid = Some(mid);
                            pre
                        }
                        Kernel::Factorized { a, b } => {
                            let (k, co) = (l.filter_width as usize, node.pre_activation.channels);
                            let mid = conv_forward(x1, &w[a.w], &w[a.b], co, 1, k);
                            let pre = conv_forward(&mid, &w[b.w], &w[b.b], co, k, 1);
                            trace.mid = Some(mid);
                            pre
                        }
                        Kernel::Pool { max } => {
                            let (pre, argmax) = pool_forward(x1, l.pool_width as usize, max);
                            trace.argmax = argmax;
                            pre
                        }
                        Kernel::Merge => unreachable!(),
                    };
                    let mut out = activation_forward(&pre, l.activation);
                    if l.src2 >= 0 {
                        let (s, g) = adapt(value(l.src2), &slot.second_adapter);
                        out.add_assign(&s);
                        trace.second_gathered = g;
                    }
                    trace.pre = pre;
                    trace.out = out;
                }
            }
            traces.push(trace);
        }
        traces
    }

    /// Per-sample logits `[n][classes]` from the final feature map.
    fn head_forward(&self, w: &Weights, feat: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (c, n, hw) = (feat.c, feat.n, feat.h * feat.w);
        let mut pooled = vec![0.0; n * c];
        for ci in 0..c {
            for ni in 0..n {
                pooled[ni * c + ci] = feat.data[(ci * n + ni) * hw..][..hw].iter().sum::<f64>() / hw as f64;
            }
        }
        let k = self.classes;
        let mut logits = vec![0.0; n * k];
        for ni in 0..n {
            logits[ni * k..][..k].copy_from_slice(&w[self.head.b]);
        }
        gemm(n, c, k, &pooled, false, &w[self.head.w], true, &mut logits, 1.0);
        (pooled, logits)
    }

    fn softmax_stats(&self, logits: &[f64], labels: &[usize]) -> (BatchStats, Vec<f64>) {
        let k = self.classes;
        let mut probs = vec![0.0; logits.len()];
        let mut stats = BatchStats { count: labels.len(), ..Default::default() };
        for (ni, &y) in labels.iter().enumerate() {
            let row = &logits[ni * k..][..k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[ni * k + j] = (row[j] - m).exp() / z;
            }
            stats.loss_sum += z.ln() + m - row[y];
            let argmax = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            stats.correct += usize::from(argmax == y);
        }
        (stats, probs)
    }

    pub fn evaluate(&self, w: &Weights, x: &Tensor, labels: &[usize]) -> BatchStats {
        let traces = self.forward_trace(w, x);
        let feat = traces.last().map_or(x, |t| &t.out);
        let (_, logits) = self.head_forward(w, feat);
        self.softmax_stats(&logits, labels).0
    }

    /// Summed cross-entropy over the batch and its gradient, accumulated into `grad`.
    pub fn loss_grad(&self, w: &Weights, x: &Tensor, labels: &[usize], grad: &mut Weights) -> BatchStats {
        let traces = self.forward_trace(w, x);
        let feat = traces.last().map_or(x, |t| &t.out);
        let (pooled, logits) = self.head_forward(w, feat);
        let (stats, mut dlogits) = self.softmax_stats(&logits, labels);
        let k = self.classes;
        for (ni, &y) in labels.iter().enumerate() {
            dlogits[ni * k + y] -= 1.0;
        }
        let (c, n, hw) = (feat.c, feat.n, feat.h * feat.w);
        gemm(k, n, c, &dlogits, true, &pooled, false, &mut grad[self.head.w], 1.0);
        for ni in 0..n {
            for j in 0..k {
                grad[self.head.b][j] += dlogits[ni * k + j];
            }
        }
        let mut dpooled = vec![0.0; n * c];
        gemm(n, k, c, &dlogits, false, &w[self.head.w], false, &mut dpooled, 0.0);
        let mut dfeat = feat.like(c);
        for ci in 0..c {
            for ni in 0..n {
                dfeat.data[(ci * n + ni) * hw..][..hw].fill(dpooled[ni * c + ci] / hw as f64);
            }
        }
        self.backward(w, x, &traces, dfeat, grad);
        stats
    }

    fn backward(&self, w: &Weights, x: &Tensor, traces: &[NodeTrace], dlast: Tensor, grad: &mut Weights) {
        let n = traces.len();
        let mut douts: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        douts[n - 1] = Some(dlast);
        let accumulate = |douts: &mut Vec<Option<Tensor>>, src: i32, d: Tensor| {
            if src < 0 {
                return;
            }
            match &mut douts[src as usize] {
                Some(t) => t.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        let adapter_back = |grad: &mut Weights, d: Tensor, a: &Option<(Adapter, Affine)>, gathered: &Option<Tensor>, src: &Tensor| {
            match (a, gathered) {
                (Some((_, aff)), Some(g)) => {
                    let (gw, gb) = two_mut(grad, aff.w, aff.b);
                    let dg = conv_backward(g, &w[aff.w], &d, 1, 1, gw, gb);
                    gather_backward(&dg, src)
                }
                _ => d,
            }
        };
        for i in (0..n).rev() {
            let Some(dout) = douts[i].take() else { continue };
            let node = &self.graph.nodes[i];
            let l = &node.layer;
            let slot = &self.slots[i];
            let tr = &traces[i];
            let value = |src: i32| if src < 0 { x } else { &traces[src as usize].out };
            let x1 = value(l.src1);
            match slot.kernel {
                Kernel::Merge => {
                    let (da, db) = if l.op_kind == OpKind::Concat {
                        let split = node.main.effective().channels * dout.block();
                        let ca = node.main.effective().channels;
                        (
                            Tensor { c: ca, data: dout.data[..split].to_vec(), ..dout },
                            Tensor { c: dout.c - ca, data: dout.data[split..].to_vec(), ..dout },
                        )
                    } else {
                        let d = activation_backward(&tr.pre, &dout, l.activation);
                        (d.clone(), d)
                    };
                    let da = adapter_back(grad, da, &slot.main_adapter, &tr.main_gathered, x1);
                    accumulate(&mut douts, l.src1, da);
                    let x2 = value(l.src2);
                    let db = adapter_back(grad, db, &slot.second_adapter, &tr.second_gathered, x2);
                    accumulate(&mut douts, l.src2, db);
                }
                kernel => {
                    if l.src2 >= 0 {
                        let x2 = value(l.src2);
                        let ds = adapter_back(grad, dout.clone(), &slot.second_adapter, &tr.second_gathered, x2);
                        accumulate(&mut douts, l.src2, ds);
                    }
                    let dpre = activation_backward(&tr.pre, &dout, l.activation);
                    let dx = match kernel {
                        Kernel::Conv(a) => {
                            let k = l.filter_width as usize;
                            let (gw, gb) = two_mut(grad, a.w, a.b);
                            conv_backward(x1, &w[a.w], &dpre, k, k, gw, gb)
                        }
                        Kernel::DepSep { depthwise, pointwise } => {
                            let mid = tr.mid.as_ref().expect("dep-sep trace");
                            let (gw, gb) = two_mut(grad, pointwise.w, pointwise.b);
                            let dmid = conv_backward(mid, &w[pointwise.w], &dpre, 1, 1, gw, gb);
                            depthwise_backward(x1, &w[depthwise], &dmid, l.filter_width as usize, &mut grad[depthwise])
                        }
                        Kernel::Factorized { a, b } => {
                            let k = l.filter_width as usize;
                            let mid = tr.mid.as_ref().expect("factorized trace");
                            let (gw, gb) = two_mut(grad, b.w, b.b);
                            let dmid = conv_backward(mid, &w[b.w], &dpre, k, 1, gw, gb);
                            let (gw, gb) = two_mut(grad, a.w, a.b);
                            conv_backward(x1, &w[a.w], &dmid, 1, k, gw, gb)
                        }
                        Kernel::Pool { max } => {
                            pool_backward(x1, &dpre, l.pool_width as usize, max.then_some(tr.argmax.as_slice()))
                        }
                        Kernel::Merge => unreachable!(),
                    };
                    accumulate(&mut douts, l.src1, dx);
                }
            }
        }
    }
}

fn push_param(params: &mut Vec<ParamSpec>, node: usize, role: &str, shape: Vec<usize>, fan_in: usize, is_bias: bool) -> usize {
    params.push(ParamSpec { node: Some(node), role: role.to_string(), shape, fan_in, is_bias });
    params.len() - 1
}

/// Weight `[co, ci, kh, kw]` plus bias `[co]`.
fn push_affine(params: &mut Vec<ParamSpec>, node: usize, prefix: &str, shape: [usize; 4]) -> Affine {
    let sep = if prefix.is_empty() { "" } else { "." };
    let fan_in = shape[1] * shape[2] * shape[3];
    let w = push_param(params, node, &format!("{prefix}{sep}weight"), shape.to_vec(), fan_in, false);
    let b = push_param(params, node, &format!("{prefix}{sep}bias"), vec![shape[0]], fan_in, true);
    Affine { w, b }
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::LayerSpec;
    use crate::resources::estimate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: Shape, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Vec<f64>> = (0..n).map(|_| (0..shape.elements()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        (Tensor::from_samples(&refs, shape), (0..n).map(|i| i % 3).collect())
    }

    /// Checks every parameter component (or a strided subset) against central differences.
    fn grad_check(layers: Vec<LayerSpec>, input: Shape) {
        let arch = Architecture::Layers(layers);
        let net = Network::new(&arch, input, 3).unwrap();
        let mut w = net.fresh_weights(11);
        // non-zero biases so their gradients flow through every path
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (p, v) in net.params.iter().zip(w.iter_mut()) {
            if p.is_bias {
                v.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
            }
        }
        let (x, y) = random_input(input, 3, 9);
        let mut g = net.zeros();
        net.loss_grad(&w, &x, &y, &mut g);
        let h = 1e-5;
        let mut checked = 0;
        for pi in 0..w.len() {
            let stride = (w[pi].len() / 40).max(1);
            for j in (0..w[pi].len()).step_by(stride) {
                let orig = w[pi][j];
                w[pi][j] = orig + h;
                let up = net.evaluate(&w, &x, &y).loss_sum;
                w[pi][j] = orig - h;
                let down = net.evaluate(&w, &x, &y).loss_sum;
                w[pi][j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = g[pi][j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-3, "{} [{j}]: fd {fd} vs analytic {an}", net.params[pi].role);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn gradient_conv_each_activation() {
        for act in Activation::ALL {
            grad_check(vec![LayerSpec::conv(3, 4, act, -1), LayerSpec::conv(1, 3, act, 0)], Shape::new(5, 5, 2));
        }
    }

    #[test]
    fn gradient_dep_sep() {
        grad_check(vec![LayerSpec::dep_sep(5, 4, Activation::Elu, -1)], Shape::new(6, 5, 3));
    }

    #[test]
    fn gradient_factorized() {
        let f = LayerSpec { op_kind: OpKind::FactorizedConv, ..LayerSpec::conv(7, 3, Activation::Swish, -1) };
        grad_check(vec![f], Shape::new(8, 8, 2));
    }

    #[test]
    fn gradient_pools_with_ceil_edges() {
        for op in [OpKind::MaxPool2d, OpKind::AvgPool2d] {
            grad_check(
                vec![LayerSpec::conv(3, 3, Activation::Selu, -1), LayerSpec::pool(op, 2, 0), LayerSpec::pool(op, 3, 1)],
                Shape::new(7, 5, 2),
            );
        }
    }

    #[test]
    fn gradient_add_concat_and_adapted_skips() {
        grad_check(
            vec![
                LayerSpec::conv(3, 4, Activation::Relu, -1),
                LayerSpec::pool(OpKind::MaxPool2d, 2, 0),
                LayerSpec::conv(3, 5, Activation::Crelu, 1).with_skip(0),
                LayerSpec::merge(OpKind::Add, Activation::Swish, 2, 0),
                LayerSpec::merge(OpKind::Concat, Activation::None, 3, 1),
                LayerSpec::dep_sep(3, 3, Activation::None, 4).with_skip(-1),
            ],
            Shape::new(6, 6, 2),
        );
    }

    #[test]
    fn backbone_matches_estimator() {
        let layers = vec![
            LayerSpec::conv(3, 8, Activation::Crelu, -1),
            LayerSpec::pool(OpKind::AvgPool2d, 2, 0),
            LayerSpec::dep_sep(5, 12, Activation::Relu, 1).with_skip(0),
            LayerSpec::merge(OpKind::Add, Activation::None, 2, 0),
        ];
        let arch = Architecture::Layers(layers);
        let input = Shape::new(16, 16, 3);
        let net = Network::new(&arch, input, 4).unwrap();
        assert_eq!(net.backbone_scalars(), estimate(&arch, input).unwrap().params);
        assert_eq!(net.total_scalars() - net.backbone_scalars(), (12 * 4 + 4) as u64);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (x, _) = random_input(Shape::new(4, 5, 2), 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = (0..3 * 2 * 3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = [0.1, -0.2, 0.3];
        let out = conv_forward(&x, &w, &b, 3, 3, 3);
        for o in 0..3 {
            for n in 0..2 {
                for y in 0..4usize {
                    for xx in 0..5usize {
                        let mut acc = b[o];
                        for c in 0..2 {
                            for dy in 0..3usize {
                                for dx in 0..3usize {
                                    let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                                    if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                        acc += w[((o * 2 + c) * 3 + dy) * 3 + dx] * x.data[((c * 2 + n) * 4 + sy as usize) * 5 + sx as usize];
                                    }
                                }
                            }
                        }
                        assert!((out.data[((o * 2 + n) * 4 + y) * 5 + xx] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
