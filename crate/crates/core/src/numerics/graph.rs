//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; `backward` walks it in reverse. Only nodes reachable
//! from a leaf created with `requires_grad` carry adjoints.

use super::ops::{self, LayerNormCache};
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Tanh(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        cache: LayerNormCache,
    },
    SoftmaxRows(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    GatherRows {
        table: NodeId,
        rows: Vec<usize>,
    },
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MeanSquared {
        pred: NodeId,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `node`; exactly zero when the
    /// node has no path to the loss.
    pub fn get(&self, node: NodeId) -> Tensor {
        match &self.grads[node.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }

    pub fn take(&mut self, node: NodeId) -> Tensor {
        self.grads[node.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[node.0]))
    }

    pub fn has_path(&self, node: NodeId) -> bool {
        self.grads[node.0].is_some()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<NodeId> {
        let value = value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul_bt(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulBt(a, b), ng, "matmul_bt")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng, "add")
    }

    /// Adds vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(b);
        let c = xv.last_dim();
        if bv.shape() != [c] {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(out, Op::AddRow(x, b), ng, "add_row")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(x).map(|a| a * s);
        let ng = self.needs(x);
        self.push(v, Op::Scale(x, s), ng, "scale")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::gelu(self.value(x))?;
        let ng = self.needs(x);
        self.push(v, Op::Gelu(x), ng, "gelu")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(f64::tanh);
        let ng = self.needs(x);
        self.push(v, Op::Tanh(x), ng, "tanh")
    }

    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (v, cache) =
            ops::layernorm_forward(self.value(x), self.value(gain), self.value(bias), eps)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            ng,
            "layernorm",
        )
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::softmax_rows(self.value(x))?;
        let ng = self.needs(x);
        self.push(v, Op::SoftmaxRows(x), ng, "softmax_rows")
    }

    /// Multi-head scaled dot-product attention over `[seq×H]` inputs.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (s, h) = ops::mat_dims(qv, "attention")?;
        let (sk, hk) = ops::mat_dims(kv, "attention")?;
        if qv.shape() != vv.shape() || (s, h) != (sk, hk) {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {h} not divisible by {heads} heads"
            )));
        }
        let (out, probs) = attention_forward(qv.data(), kv.data(), vv.data(), s, h, heads);
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let t = Tensor::new(vec![s, h], out)?;
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
            "attention",
        )
    }

    /// Inverted dropout; a no-op node is not recorded when inactive.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: Option<&mut RngStream>) -> Result<NodeId> {
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::OutOfRange(format!("dropout rate {rate}")));
        }
        let mask = ops::dropout_scale_mask(self.value(x).len(), rate, rng);
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.needs(x);
        self.push(t, Op::Dropout { x, mask }, ng, "dropout")
    }

    /// Selects rows of a matrix (embedding lookup, token selection).
    pub fn gather_rows(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (r, c) = ops::mat_dims(tv, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", tv.shape(), &[0]));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::TokenOutOfRange { id: i, vocab: r });
            }
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![rows.len(), c], data)?;
        let ng = self.needs(table);
        self.push(
            t,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            ng,
            "gather_rows",
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(v, Op::Sum(x), ng, "sum")
    }

    /// Mean softmax cross-entropy of `logits[n×C]` against class targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (n, c) = ops::mat_dims(lv, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::OutOfRange(format!("target {t} for {c} classes")));
            }
            let row = &mut probs[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            ops::softmax_in_place(row);
        }
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
            "cross_entropy",
        )
    }

    pub fn mean_squared(&mut self, pred: NodeId, targets: &[f64]) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.len() != targets.len() {
            return Err(Error::shape("mean_squared", pv.shape(), &[targets.len()]));
        }
        let loss = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / targets.len() as f64;
        let ng = self.needs(pred);
        self.push(
            Tensor::scalar(loss),
            Op::MeanSquared {
                pred,
                targets: targets.to_vec(),
            },
            ng,
            "mean_squared",
        )
    }

    /// Propagates adjoints from the scalar `loss` back to every node that
    /// depends on a gradient-requiring leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.needs(loss) {
            grads[loss.0] = Some(Tensor::ones(lv.shape()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let out = Gradients { grads, shapes };
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) -> Result<()> {
        if !self.needs(id) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, ops::matmul_bt(g, bv)?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, ops::matmul_at(av, g)?)?;
                }
            }
            Op::MatMulBt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, ops::matmul(g, bv)?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, ops::matmul_at(g, av)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.needs(*b) {
                    let c = g.last_dim();
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![c], db)?)?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s))?;
            }
            Op::Gelu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| gv * ops::gelu_grad_scalar(xv))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Tanh(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let h = node.value.last_dim();
                let (dx, dg, db) = ops::layernorm_backward(gd, self.value(*gain).data(), cache, h);
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), dx)?)?;
                self.accumulate(grads, *gain, Tensor::new(vec![h], dg)?)?;
                self.accumulate(grads, *bias, Tensor::new(vec![h], db)?)?;
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.last_dim();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / c {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), dx)?)?;
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (s, h) = node.value.matrix_dims().expect("matrix");
                let (dq, dk, dv) = attention_backward(
                    gd,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    s,
                    h,
                    *heads,
                );
                self.accumulate(grads, *q, Tensor::new(vec![s, h], dq)?)?;
                self.accumulate(grads, *k, Tensor::new(vec![s, h], dk)?)?;
                self.accumulate(grads, *v, Tensor::new(vec![s, h], dv)?)?;
            }
            Op::Dropout { x, mask } => {
                let d = gd.iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?)?;
            }
            Op::GatherRows { table, rows } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let c = tv.last_dim();
                    let mut dt = Tensor::zeros(tv.shape());
                    let dd = dt.data_mut();
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            dd[r * c + j] += gd[i * c + j];
                        }
                    }
                    self.accumulate(grads, *table, dt)?;
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), s))?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let (n, c) = lv.matrix_dims().expect("matrix");
                let scale = gd[0] / n as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= 1.0;
                }
                for x in &mut d {
                    *x *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?)?;
            }
            Op::MeanSquared { pred, targets } => {
                let pv = self.value(*pred);
                let scale = 2.0 * gd[0] / targets.len() as f64;
                let d = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                self.accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), d)?)?;
            }
        }
        Ok(())
    }
}

/// Returns the concatenated head outputs and the attention probabilities,
/// laid out as `[heads][seq][seq]`.
fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: usize,
    h: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; s * h];
    let mut probs = vec![0.0; heads * s * s];
    for head in 0..heads {
        let off = head * d;
        let p = &mut probs[head * s * s..(head + 1) * s * s];
        for i in 0..s {
            let qi = &q[i * h + off..i * h + off + d];
            let row = &mut p[i * s..(i + 1) * s];
            for j in 0..s {
                let kj = &k[j * h + off..j * h + off + d];
                row[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            ops::softmax_in_place(row);
            let oi = &mut out[i * h + off..i * h + off + d];
            for j in 0..s {
                let w = row[j];
                let vj = &v[j * h + off..j * h + off + d];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o += w * vv;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    s: usize,
    h: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; s * h];
    let mut dk = vec![0.0; s * h];
    let mut dv = vec![0.0; s * h];
    let mut dp = vec![0.0; s];
    for head in 0..heads {
        let off = head * d;
        let p = &probs[head * s * s..(head + 1) * s * s];
        for i in 0..s {
            let gi = &g[i * h + off..i * h + off + d];
            let pi = &p[i * s..(i + 1) * s];
            for j in 0..s {
                let vj = &v[j * h + off..j * h + off + d];
                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                let dvj = &mut dv[j * h + off..j * h + off + d];
                for (dvv, &gg) in dvj.iter_mut().zip(gi) {
                    *dvv += pi[j] * gg;
                }
            }
            let dot: f64 = pi.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..s {
                let ds = pi[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..d {
                    dq[i * h + off + t] += ds * k[j * h + off + t];
                    dk[j * h + off + t] += ds * q[i * h + off + t];
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, -2.0, 3.0]), true).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gradient_is_x() {
        let mut g = Graph::new();
        let xs = [0.5, -1.5, 2.0, 4.0];
        let x = g.leaf(Tensor::vector(&xs), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).data(), &xs);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]), true).unwrap();
        let y = g.leaf(Tensor::vector(&[3.0, 4.0]), true).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(!grads.has_path(y));
        assert_eq!(grads.get(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_key_attention_returns_value() {
        let mut g = Graph::new();
        let q = g.leaf(Tensor::from_rows(&[&[0.3, -0.2, 1.0, 0.5]]), false).unwrap();
        let k = g.leaf(Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]), false).unwrap();
        let v = g.leaf(Tensor::from_rows(&[&[7.0, 8.0, 9.0, 10.0]]), false).unwrap();
        let a = g.attention(q, k, v, 2).unwrap();
        assert_eq!(g.value(a).data(), &[7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1e300]), false).unwrap();
        let y = g.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite(_))));
    }
}
