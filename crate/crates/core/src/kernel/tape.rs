//! Reverse-mode gradient tape.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward rule. `backward` walks the nodes in exact reverse order
//! of recording. A node requires a gradient iff one of its inputs does, so a
//! frozen subgraph costs nothing on the way back.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ops::{gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, log_sum_exp, softmax_row};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// `a · bᵀ`
    MatMulNt {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<T>,
    },
    Softmax {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Dot {
        x: NodeId,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner recording of one forward pass.
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`GradTape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `id`; zero when `id` did not
    /// participate in the loss.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.grads[id.0].take()
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        match self.value(id).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("{what} must be 2-D, got {s:?}"))),
        }
    }

    /// Records an input; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (n, k2) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner dimensions differ: {m}x{k} · ({n}x{k2})ᵀ"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Adds a length-`c` bias to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.len() != c {
            return Err(Error::Dimension(format!(
                "bias of length {} for rows of width {c}",
                vb.len()
            )));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (y, &b) in row.iter_mut().zip(vb.data()) {
                *y += b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims2(table, "embedding table")?;
        if ids.is_empty() {
            return Err(Error::Dimension("embedding lookup of zero ids".into()));
        }
        let tab = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("id {id} outside table of {v} rows")));
            }
            data.extend_from_slice(&tab[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let c = vx.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Dimension(format!(
                "layer-norm affine parameters must have length {c}"
            )));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = T::of(c as f64);
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + T::of(eps)).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Gelu { x }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `q`, `k`, `v` are `[T×d]`; head `h` owns columns `h·d/heads..(h+1)·d/heads`.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (t, d) = self.dims2(q, "attention query")?;
        if self.value(k).shape() != [t, d] || self.value(v).shape() != [t, d] {
            return Err(Error::Dimension("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); t * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p_row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let mut s = T::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        s += a * b;
                    }
                    p_row[j] = s * scale;
                }
                softmax_row(&mut p_row[..=i]);
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let pij = p_row[j];
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (oo, &vv) in o.iter_mut().zip(vj) {
                        *oo += pij * vv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![t, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::CausalAttention { q, k, v, heads, probs }, rg))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone().with_grad(false);
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_row(row);
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x }, rg)
    }

    /// Mean next-token cross-entropy; a scalar node.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (t, v) = self.dims2(logits, "logits")?;
        if targets.len() != t {
            return Err(Error::Dimension(format!(
                "{} targets for {t} logit rows",
                targets.len()
            )));
        }
        let lv = self.value(logits);
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(Error::Index(format!("target {target} outside vocabulary of {v}")));
            }
            let row = lv.row(r);
            total += log_sum_exp(row) - row[target].as_f64();
            softmax_row(&mut probs[r * v..(r + 1) * v]);
        }
        let out = Tensor::scalar(T::of(total / t as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ weights ⊙ x` as a scalar; used to project arbitrary outputs to a loss.
    pub fn dot(&mut self, x: NodeId, weights: Vec<T>) -> Result<NodeId> {
        let vx = self.value(x);
        if weights.len() != vx.len() {
            return Err(Error::Dimension(format!(
                "dot weights of length {} for tensor of {}",
                weights.len(),
                vx.len()
            )));
        }
        let s = vx.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum::<T>();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, rg))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(node, &g, &mut grads);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_op(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); self.nodes[id.0].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                acc(*a, &mut |da| gemm_nt(g, val(*b).data(), da, m, n, k));
                acc(*b, &mut |db| gemm_tn(val(*a).data(), g, db, m, k, n));
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                acc(*a, &mut |da| gemm_nn(g, val(*b).data(), da, m, n, k));
                acc(*b, &mut |db| gemm_tn(g, val(*a).data(), db, m, n, k));
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    acc(id, &mut |d| {
                        for (x, &y) in d.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |d| {
                    for (a, &b) in d.iter_mut().zip(g) {
                        *a += b;
                    }
                });
                let c = val(*bias).len();
                acc(*bias, &mut |d| {
                    for row in g.chunks(c) {
                        for (a, &b) in d.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).cols();
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, &b) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *a += b;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = val(*gamma).len();
                let gam = val(*gamma).data();
                acc(*gamma, &mut |d| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            d[j] += gr[j];
                        }
                    }
                });
                let n = T::of(c as f64);
                acc(*x, &mut |d| {
                    for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        let dr = &mut d[r * c..(r + 1) * c];
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            dr[j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for ((a, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        *a += gi * gelu_grad(xi);
                    }
                });
            }
            Op::Relu { x } => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for ((a, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *a += gi;
                        }
                    }
                });
            }
            Op::CausalAttention { q, k, v, heads, probs } => {
                let (t, d) = (val(*q).rows(), val(*q).cols());
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![T::zero(); t * d];
                let mut dk = vec![T::zero(); t * d];
                let mut dv = vec![T::zero(); t * d];
                let mut dp = vec![T::zero(); t];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..t {
                        let p_row = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                        let gi = &g[i * d + off..i * d + off + dh];
                        let mut dot_pd = T::zero();
                        for j in 0..=i {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            let mut s = T::zero();
                            for (&a, &b) in gi.iter().zip(vj) {
                                s += a * b;
                            }
                            dp[j] = s;
                            dot_pd += p_row[j] * s;
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (a, &b) in dvj.iter_mut().zip(gi) {
                                *a += p_row[j] * b;
                            }
                        }
                        let qi = &qd[i * d + off..i * d + off + dh];
                        for j in 0..=i {
                            let ds = p_row[j] * (dp[j] - dot_pd) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let kj = &kd[j * d + off..j * d + off + dh];
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * kj[c];
                                dk[j * d + off + c] += ds * qi[c];
                            }
                        }
                    }
                }
                for (id, src) in [(*q, dq), (*k, dk), (*v, dv)] {
                    acc(id, &mut |d| {
                        for (a, &b) in d.iter_mut().zip(&src) {
                            *a += b;
                        }
                    });
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = val(*logits).cols();
                let scale = g[0] / T::of(targets.len() as f64);
                acc(*logits, &mut |d| {
                    for (r, &target) in targets.iter().enumerate() {
                        let pr = &probs[r * v..(r + 1) * v];
                        let dr = &mut d[r * v..(r + 1) * v];
                        for j in 0..v {
                            dr[j] += scale * pr[j];
                        }
                        dr[target] -= scale;
                    }
                });
            }
            Op::Dot { x, weights } => {
                acc(*x, &mut |d| {
                    for (a, &w) in d.iter_mut().zip(weights) {
                        *a += g[0] * w;
                    }
                });
            }
        }
    }
}
