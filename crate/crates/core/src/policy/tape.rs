//! A small reverse-mode autodiff tape over `f64` vectors.
//!
//! Nodes hold vectors; parameters are read straight from a [`ParamSet`] and
//! their gradients are accumulated into a flat buffer with the same layout.

use super::params::{ParamId, ParamSet};

pub type NodeId = usize;

enum Op {
    Row { param: ParamId, row: usize },
    /// `w · x + b` with `w` stored row-major as `[out, in]`.
    Affine { w: ParamId, b: ParamId, x: NodeId },
    Concat(NodeId, NodeId),
    Slice { x: NodeId, start: usize },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Mul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sum(Vec<NodeId>),
    Scale(NodeId, f64),
    /// Log-probability of `choice` under the masked softmax of `logits`;
    /// `aux` keeps the probabilities.
    LogProb { logits: NodeId, choice: usize },
    /// Entropy of the masked softmax; `aux` keeps the probabilities.
    Entropy { logits: NodeId },
    Const,
}

struct Node {
    op: Op,
    value: Vec<f64>,
    aux: Vec<f64>,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

/// Softmax restricted to `mask`; masked slots get probability exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits.iter().zip(mask).filter(|(_, &m)| m).map(|(&z, _)| z).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().zip(mask).map(|(&z, &m)| if m { (z - max).exp() } else { 0.0 }).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape { params, nodes: Vec::with_capacity(256) }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value, aux: Vec::new() });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn row(&mut self, param: ParamId, row: usize) -> NodeId {
        let cols = self.params.spec(param).cols();
        let value = self.params.tensor(param)[row * cols..(row + 1) * cols].to_vec();
        self.push(Op::Row { param, row }, value)
    }

    pub fn affine(&mut self, w: ParamId, b: ParamId, x: NodeId) -> NodeId {
        let wt = self.params.tensor(w);
        let cols = self.params.spec(w).cols();
        let xv = &self.nodes[x].value;
        debug_assert_eq!(cols, xv.len());
        let value = self
            .params
            .tensor(b)
            .iter()
            .zip(wt.chunks_exact(cols))
            .map(|(&bias, row)| bias + row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        self.push(Op::Affine { w, b, x }, value)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut value = self.nodes[a].value.clone();
        value.extend_from_slice(&self.nodes[b].value);
        self.push(Op::Concat(a, b), value)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.nodes[x].value[start..start + len].to_vec();
        self.push(Op::Slice { x, start }, value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.iter().map(|&v| sigmoid(v)).collect();
        self.push(Op::Sigmoid(x), value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x * y).collect();
        self.push(Op::Mul(a, b), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x + y).collect();
        self.push(Op::Add(a, b), value)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let value = self.nodes[x].value.iter().map(|v| v * k).collect();
        self.push(Op::Scale(x, k), value)
    }

    /// Element-wise sum of equally sized nodes.
    pub fn sum(&mut self, items: Vec<NodeId>) -> NodeId {
        let mut value = self.nodes[items[0]].value.clone();
        for &i in &items[1..] {
            value.iter_mut().zip(&self.nodes[i].value).for_each(|(a, b)| *a += b);
        }
        self.push(Op::Sum(items), value)
    }

    pub fn logprob(&mut self, logits: NodeId, mask: &[bool], choice: usize) -> NodeId {
        let p = masked_softmax(&self.nodes[logits].value, mask);
        debug_assert!(p[choice] > 0.0);
        let id = self.push(Op::LogProb { logits, choice }, vec![p[choice].ln()]);
        self.nodes[id].aux = p;
        id
    }

    pub fn entropy(&mut self, logits: NodeId, mask: &[bool]) -> NodeId {
        let p = masked_softmax(&self.nodes[logits].value, mask);
        let h = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        let id = self.push(Op::Entropy { logits }, vec![h]);
        self.nodes[id].aux = p;
        id
    }

    /// Probabilities stored by a `logprob` or `entropy` node.
    pub fn probabilities(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].aux
    }

    /// Back-propagates `weight · d(output)` into `grad`, which has the layout
    /// of the parameter set. `output` must be a scalar node.
    pub fn backward(&self, output: NodeId, weight: f64, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        let mut g: Vec<Option<Vec<f64>>> = (0..=output).map(|_| None).collect();
        g[output] = Some(vec![weight]);
        fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
            slot.get_or_insert_with(|| vec![0.0; len])
        }
        for id in (0..=output).rev() {
            let Some(dy) = g[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Const => {}
                Op::Row { param, row } => {
                    let spec = self.params.spec(*param);
                    let start = spec.offset + row * spec.cols();
                    grad[start..start + dy.len()].iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
                }
                Op::Affine { w, b, x } => {
                    let ws = self.params.spec(*w);
                    let cols = ws.cols();
                    let wt = self.params.tensor(*w);
                    let xv = &self.nodes[*x].value;
                    let bs = self.params.spec(*b);
                    for (o, &d) in dy.iter().enumerate() {
                        grad[bs.offset + o] += d;
                        if d != 0.0 {
                            let base = ws.offset + o * cols;
                            grad[base..base + cols].iter_mut().zip(xv).for_each(|(gw, xi)| *gw += d * xi);
                        }
                    }
                    let dx = acc(&mut g[*x], cols);
                    for (o, &d) in dy.iter().enumerate() {
                        if d != 0.0 {
                            dx.iter_mut().zip(&wt[o * cols..(o + 1) * cols]).for_each(|(a, wv)| *a += d * wv);
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let la = self.nodes[*a].value.len();
                    let lb = self.nodes[*b].value.len();
                    acc(&mut g[*a], la).iter_mut().zip(&dy[..la]).for_each(|(x, d)| *x += d);
                    acc(&mut g[*b], lb).iter_mut().zip(&dy[la..]).for_each(|(x, d)| *x += d);
                }
                Op::Slice { x, start } => {
                    let lx = self.nodes[*x].value.len();
                    acc(&mut g[*x], lx)[*start..*start + dy.len()].iter_mut().zip(&dy).for_each(|(a, d)| *a += d);
                }
                Op::Sigmoid(x) => {
                    let lx = dy.len();
                    let y = &node.value;
                    acc(&mut g[*x], lx).iter_mut().zip(dy.iter().zip(y)).for_each(|(a, (d, s))| *a += d * s * (1.0 - s));
                }
                Op::Tanh(x) => {
                    let lx = dy.len();
                    let y = &node.value;
                    acc(&mut g[*x], lx).iter_mut().zip(dy.iter().zip(y)).for_each(|(a, (d, t))| *a += d * (1.0 - t * t));
                }
                Op::Mul(a, b) => {
                    let n = dy.len();
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da: Vec<f64> = dy.iter().zip(vb).map(|(d, y)| d * y).collect();
                    let db: Vec<f64> = dy.iter().zip(va).map(|(d, x)| d * x).collect();
                    acc(&mut g[*a], n).iter_mut().zip(&da).for_each(|(x, d)| *x += d);
                    acc(&mut g[*b], n).iter_mut().zip(&db).for_each(|(x, d)| *x += d);
                }
                Op::Add(a, b) => {
                    let n = dy.len();
                    acc(&mut g[*a], n).iter_mut().zip(&dy).for_each(|(x, d)| *x += d);
                    acc(&mut g[*b], n).iter_mut().zip(&dy).for_each(|(x, d)| *x += d);
                }
                Op::Scale(x, k) => {
                    let n = dy.len();
                    acc(&mut g[*x], n).iter_mut().zip(&dy).for_each(|(a, d)| *a += d * k);
                }
                Op::Sum(items) => {
                    let n = dy.len();
                    for &i in items {
                        acc(&mut g[i], n).iter_mut().zip(&dy).for_each(|(x, d)| *x += d);
                    }
                }
                Op::LogProb { logits, choice } => {
                    let p = &node.aux;
                    let d = dy[0];
                    let dz = acc(&mut g[*logits], p.len());
                    for (i, (z, &pi)) in dz.iter_mut().zip(p).enumerate() {
                        let indicator = if i == *choice { 1.0 } else { 0.0 };
                        if pi > 0.0 || i == *choice {
                            *z += d * (indicator - pi);
                        }
                    }
                }
                Op::Entropy { logits } => {
                    let p = &node.aux;
                    let h = node.value[0];
                    let d = dy[0];
                    let dz = acc(&mut g[*logits], p.len());
                    for (z, &pi) in dz.iter_mut().zip(p) {
                        if pi > 0.0 {
                            *z -= d * pi * (pi.ln() + h);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn finite_difference(params: &mut ParamSet, f: impl Fn(&ParamSet) -> f64, i: usize, h: f64) -> f64 {
        let orig = params.data[i];
        params.data[i] = orig + h;
        let up = f(params);
        params.data[i] = orig - h;
        let down = f(params);
        params.data[i] = orig;
        (up - down) / (2.0 * h)
    }

    #[test]
    fn masked_softmax_zeroes_masked_slots() {
        let p = masked_softmax(&[1.0, 50.0, 2.0, 0.5], &[true, false, true, true]);
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut params = ParamSet::new([
            ("emb".to_string(), vec![3, 4]),
            ("w".to_string(), vec![5, 8]),
            ("b".to_string(), vec![5]),
        ]);
        params.fill_uniform(&mut rand_chacha::ChaCha8Rng::seed_from_u64(9), 0.8);
        let mask = [true, true, false, true, true];
        let f = |p: &ParamSet| -> (f64, Vec<f64>) {
            let mut t = Tape::new(p);
            let e = p.id("emb").unwrap();
            let a = t.row(e, 0);
            let b = t.row(e, 2);
            let ab = t.concat(a, b);
            let z = t.affine(p.id("w").unwrap(), p.id("b").unwrap(), ab);
            let s = t.sigmoid(z);
            let th = t.tanh(z);
            let m = t.mul(s, th);
            let k = t.scale(m, 1.7);
            let sl = t.slice(ab, 2, 5);
            let mix = t.add(k, sl);
            let summed = t.sum(vec![mix, z, m]);
            let lp = t.logprob(summed, &mask, 3);
            let ent = t.entropy(summed, &mask);
            let total = t.sum(vec![lp, ent]);
            let mut grad = vec![0.0; p.len()];
            t.backward(total, 1.0, &mut grad);
            (t.value(total)[0], grad)
        };
        let (_, grad) = f(&params);
        for i in 0..params.len() {
            let fd = finite_difference(&mut params, |p| f(p).0, i, 1e-5);
            let scale = grad[i].abs().max(fd.abs()).max(1e-6);
            assert!((grad[i] - fd).abs() / scale < 1e-6, "component {i}: {} vs {fd}", grad[i]);
        }
        // row 1 of the table is never read
        let start = params.spec(params.id("emb").unwrap()).offset + 4;
        assert!(grad[start..start + 4].iter().all(|&g| g == 0.0));
    }
}
