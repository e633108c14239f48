//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; node inputs always precede
//! the node, so a single reverse sweep over the node list is a valid
//! topological traversal. Gradients are accumulated once: a second call to
//! [`Tape::backward`] fails with [`Error::BackwardTwice`].
//!
//! Besides the generic arithmetic kernels the tape carries a few fused,
//! per-channel kernels (`channel_mean`, `channel_sub`, `bn_affine`) so batch
//! normalization can be expressed without general broadcasting.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Scalar(BinaryOp, Var, f64),
    MaxScalar(Var, f64),
    Sqrt(Var),
    Square(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    ChannelMean(Var),
    ChannelSub(Var, Var),
    BnAffine { z: Var, mu: Var, sigma: Var, gamma: Var, beta: Var },
    SpatialMean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Entropy { logits: Var, probs: Vec<f64> },
    NegSqDist { features: Var, centroids: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph plus the gradients produced by `backward`.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Geometry of a per-channel tensor: (batch, channels, spatial positions per channel).
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::Contract(alloc::format!(
            "per-channel op needs rank-2 (N,C) or rank-4 (N,C,H,W) input, got {:?}",
            shape
        ))),
    }
}

fn softmax_rows(logits: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut probs = vec![0.0; rows * cols];
    let mut lse = vec![0.0; rows];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (p, &l) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *p = libm::exp(l - max);
            total += *p;
        }
        for p in &mut probs[r * cols..(r + 1) * cols] {
            *p /= total;
        }
        lse[r] = max + libm::log(total);
    }
    (probs, lse)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are only produced for leaves created with
    /// `requires_grad` and for nodes depending on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into `v` by [`Tape::backward`], if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericDomain("operation produced a non-finite value".into()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(ta.shape() == tb.shape(), "shape mismatch {:?} vs {:?}", ta.shape(), tb.shape());
        if kind == BinaryOp::Div && tb.data().contains(&0.0) {
            return Err(Error::NumericDomain("division by a zero entry".into()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => x / y,
            })
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn scalar(&mut self, kind: BinaryOp, a: Var, s: f64) -> Result<Var> {
        if !s.is_finite() || (kind == BinaryOp::Div && s == 0.0) {
            return Err(Error::NumericDomain(alloc::format!("invalid scalar operand {}", s)));
        }
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| match kind {
                BinaryOp::Add => x + s,
                BinaryOp::Sub => x - s,
                BinaryOp::Mul => x * s,
                BinaryOp::Div => x / s,
            })
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, Op::Scalar(kind, a, s), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// Entrywise `max(a, s)`. The gradient passes only where `a > s`.
    pub fn max_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > s { x } else { s }).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, Op::MaxScalar(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.max_scalar(a, 0.0)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|&x| x < 0.0) {
            return Err(Error::NumericDomain("sqrt of a negative entry".into()));
        }
        let data = ta.data().iter().map(|&x| libm::sqrt(x)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * x).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, Op::Square(a), &[a])
    }

    /// `(N×D)·(D×K) -> N×K`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        ensure!(ta.rank() == 2 && tw.rank() == 2, "matmul needs rank-2 operands");
        let (n, d) = (ta.shape()[0], ta.shape()[1]);
        let (d2, k) = (tw.shape()[0], tw.shape()[1]);
        ensure!(d == d2, "matmul inner extents differ: {} vs {}", d, d2);
        let (x, y) = (ta.data(), tw.data());
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &mut out[i * k..(i + 1) * k];
            for p in 0..d {
                let xv = x[i * d + p];
                for (o, &yv) in row.iter_mut().zip(&y[p * k..(p + 1) * k]) {
                    *o += xv * yv;
                }
            }
        }
        self.push(Tensor::from_parts(vec![n, k], out), Op::MatMul(a, w), &[a, w])
    }

    /// Adds a length-K bias to every row of an N×K matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        ensure!(ta.rank() == 2, "add_bias needs a rank-2 input");
        let k = ta.shape()[1];
        ensure!(tb.numel() == k, "bias length {} does not match {} columns", tb.numel(), k);
        let b = tb.data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x + b[i % k]).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, Op::AddBias(a, bias), &[a, bias])
    }

    /// Valid (unpadded), stride-1 cross-correlation.
    /// `x: (N,Cin,H,W)`, `kernels: (Cout,Cin,kh,kw)` -> `(N,Cout,H-kh+1,W-kw+1)`.
    pub fn conv2d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernels));
        ensure!(tx.rank() == 4 && tk.rank() == 4, "conv2d needs rank-4 input and kernels");
        let [n, cin, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let [cout, kcin, kh, kw] = [tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]];
        ensure!(cin == kcin, "conv2d channel mismatch: input {} vs kernel {}", cin, kcin);
        ensure!(kh <= h && kw <= w, "kernel {}x{} larger than input {}x{}", kh, kw, h, w);
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let (xd, kd) = (tx.data(), tk.data());
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for o in 0..cout {
                let dst = &mut out[(b * cout + o) * oh * ow..(b * cout + o + 1) * oh * ow];
                for c in 0..cin {
                    let src = &xd[(b * cin + c) * h * w..(b * cin + c + 1) * h * w];
                    let ker = &kd[(o * cin + c) * kh * kw..(o * cin + c + 1) * kh * kw];
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = 0.0;
                            for a in 0..kh {
                                let srow = &src[(i + a) * w + j..(i + a) * w + j + kw];
                                for (&sv, &kv) in srow.iter().zip(&ker[a * kw..(a + 1) * kw]) {
                                    acc += sv * kv;
                                }
                            }
                            dst[i * ow + j] += acc;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![n, cout, oh, ow], out);
        self.push(out, Op::Conv2d(x, kernels), &[x, kernels])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let total: f64 = t.data().iter().sum();
        let mean = total / t.numel() as f64;
        self.push(Tensor::scalar(mean), Op::Mean(a), &[a])
    }

    /// Per-channel mean over batch and spatial positions: `(N,C[,H,W]) -> [C]`.
    pub fn channel_mean(&mut self, z: Var) -> Result<Var> {
        let tz = self.value(z);
        let (n, c, s) = channel_layout(tz.shape())?;
        let zd = tz.data();
        let mut out = vec![0.0; c];
        for b in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                *o += zd[(b * c + ch) * s..(b * c + ch + 1) * s].iter().sum::<f64>();
            }
        }
        let count = (n * s) as f64;
        for o in &mut out {
            *o /= count;
        }
        self.push(Tensor::from_vec(out), Op::ChannelMean(z), &[z])
    }

    /// `z - m` with `m` (length C) broadcast over batch and spatial axes.
    pub fn channel_sub(&mut self, z: Var, m: Var) -> Result<Var> {
        let (tz, tm) = (self.value(z), self.value(m));
        let (n, c, s) = channel_layout(tz.shape())?;
        ensure!(tm.numel() == c, "channel vector length {} does not match {} channels", tm.numel(), c);
        let (zd, md) = (tz.data(), tm.data());
        let mut out = zd.to_vec();
        for b in 0..n {
            for ch in 0..c {
                for v in &mut out[(b * c + ch) * s..(b * c + ch + 1) * s] {
                    *v -= md[ch];
                }
            }
        }
        let out = Tensor::from_parts(tz.shape().to_vec(), out);
        self.push(out, Op::ChannelSub(z, m), &[z, m])
    }

    /// `((z - mu) / sigma) * gamma + beta`, per channel.
    pub fn bn_affine(&mut self, z: Var, mu: Var, sigma: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tz = self.value(z);
        let (n, c, s) = channel_layout(tz.shape())?;
        for (name, v) in [("mu", mu), ("sigma", sigma), ("gamma", gamma), ("beta", beta)] {
            let len = self.value(v).numel();
            ensure!(len == c, "{} has length {}, expected {} channels", name, len, c);
        }
        let sd = self.value(sigma).data();
        if sd.contains(&0.0) {
            return Err(Error::NumericDomain("zero sigma entry in BN normalization".into()));
        }
        let (zd, md, gd, bd) = (tz.data(), self.value(mu).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; zd.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * s..(b * c + ch + 1) * s;
                for (o, &x) in out[range.clone()].iter_mut().zip(&zd[range]) {
                    *o = ((x - md[ch]) / sd[ch]) * gd[ch] + bd[ch];
                }
            }
        }
        let out = Tensor::from_parts(tz.shape().to_vec(), out);
        self.push(out, Op::BnAffine { z, mu, sigma, gamma, beta }, &[z, mu, sigma, gamma, beta])
    }

    /// Global average pooling: `(N,C,H,W) -> (N,C)`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        ensure!(tx.rank() == 4, "spatial_mean needs a rank-4 input");
        let (n, c, s) = channel_layout(tx.shape())?;
        let xd = tx.data();
        let out = (0..n * c).map(|i| xd[i * s..(i + 1) * s].iter().sum::<f64>() / s as f64).collect();
        self.push(Tensor::from_parts(vec![n, c], out), Op::SpatialMean(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        ensure!(tl.rank() == 2, "cross_entropy needs N×K logits");
        let (n, k) = (tl.shape()[0], tl.shape()[1]);
        ensure!(labels.len() == n, "{} labels for {} rows", labels.len(), n);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Contract(alloc::format!("label {} out of range for {} classes", bad, k)));
        }
        let (probs, lse) = softmax_rows(tl.data(), n, k);
        let ld = tl.data();
        let total: f64 = (0..n).map(|i| lse[i] - ld[i * k + labels[i]]).sum();
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(Tensor::scalar(total / n as f64), op, &[logits])
    }

    /// Mean prediction entropy, computed as `logsumexp - Σ p·logit` per row.
    pub fn entropy(&mut self, logits: Var) -> Result<Var> {
        let tl = self.value(logits);
        ensure!(tl.rank() == 2, "entropy needs N×K logits");
        let (n, k) = (tl.shape()[0], tl.shape()[1]);
        let (probs, lse) = softmax_rows(tl.data(), n, k);
        let ld = tl.data();
        let mut total = 0.0;
        for i in 0..n {
            let expected: f64 = (0..k).map(|j| probs[i * k + j] * ld[i * k + j]).sum();
            total += lse[i] - expected;
        }
        self.push(Tensor::scalar(total / n as f64), Op::Entropy { logits, probs }, &[logits])
    }

    /// `out[i,k] = -‖features_i - centroids_k‖²`.
    pub fn neg_sq_dist(&mut self, features: Var, centroids: Var) -> Result<Var> {
        let (tf, tc) = (self.value(features), self.value(centroids));
        ensure!(tf.rank() == 2 && tc.rank() == 2, "neg_sq_dist needs rank-2 operands");
        let (n, d) = (tf.shape()[0], tf.shape()[1]);
        let (k, d2) = (tc.shape()[0], tc.shape()[1]);
        ensure!(d == d2, "feature width {} does not match centroid width {}", d, d2);
        let (fd, cd) = (tf.data(), tc.data());
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                let dist: f64 =
                    fd[i * d..(i + 1) * d].iter().zip(&cd[j * d..(j + 1) * d]).map(|(&a, &b)| (a - b) * (a - b)).sum();
                out[i * k + j] = -dist;
            }
        }
        let out = Tensor::from_parts(vec![n, k], out);
        self.push(out, Op::NegSqDist { features, centroids }, &[features, centroids])
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let tl = self.value(loss);
        ensure!(tl.numel() == 1, "backward needs a scalar loss, got shape {:?}", tl.shape());
        ensure!(self.requires_grad(loss), "loss does not depend on any gradient-enabled leaf");
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        // Only gradient-enabled nodes keep their gradient.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(slot);
            }
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (x, y) = (val(*a), val(*b));
                match kind {
                    BinaryOp::Add => {
                        acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                        acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                    }
                    BinaryOp::Sub => {
                        acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                        acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g));
                    }
                    BinaryOp::Mul => {
                        acc(*a, &mut |s| {
                            for i in 0..s.len() {
                                s[i] += g[i] * y[i];
                            }
                        });
                        acc(*b, &mut |s| {
                            for i in 0..s.len() {
                                s[i] += g[i] * x[i];
                            }
                        });
                    }
                    BinaryOp::Div => {
                        acc(*a, &mut |s| {
                            for i in 0..s.len() {
                                s[i] += g[i] / y[i];
                            }
                        });
                        acc(*b, &mut |s| {
                            for i in 0..s.len() {
                                s[i] -= g[i] * x[i] / (y[i] * y[i]);
                            }
                        });
                    }
                }
            }
            Op::Scalar(kind, a, c) => {
                let c = *c;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += match kind {
                            BinaryOp::Add | BinaryOp::Sub => g[i],
                            BinaryOp::Mul => g[i] * c,
                            BinaryOp::Div => g[i] / c,
                        };
                    }
                });
            }
            Op::MaxScalar(a, c) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if x[i] > *c {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = nodes[idx].value.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / (2.0 * y[i]);
                    }
                });
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * x[i] * g[i];
                    }
                });
            }
            Op::MatMul(a, w) => {
                let (ta, tw) = (&nodes[a.0].value, &nodes[w.0].value);
                let (n, d, k) = (ta.shape()[0], ta.shape()[1], tw.shape()[1]);
                let (x, y) = (ta.data(), tw.data());
                acc(*a, &mut |s| {
                    for i in 0..n {
                        for p in 0..d {
                            let mut t = 0.0;
                            for j in 0..k {
                                t += g[i * k + j] * y[p * k + j];
                            }
                            s[i * d + p] += t;
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for i in 0..n {
                        for p in 0..d {
                            let xv = x[i * d + p];
                            for j in 0..k {
                                s[p * k + j] += xv * g[i * k + j];
                            }
                        }
                    }
                });
            }
            Op::AddBias(a, b) => {
                let k = nodes[a.0].value.shape()[1];
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % k] += gv;
                    }
                });
            }
            Op::Conv2d(x, kernels) => {
                let (tx, tk) = (&nodes[x.0].value, &nodes[kernels.0].value);
                let [n, cin, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
                let [cout, _, kh, kw] = [tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]];
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let (xd, kd) = (tx.data(), tk.data());
                acc(*x, &mut |s| {
                    for b in 0..n {
                        for o in 0..cout {
                            let go = &g[(b * cout + o) * oh * ow..(b * cout + o + 1) * oh * ow];
                            for c in 0..cin {
                                let ker = &kd[(o * cin + c) * kh * kw..(o * cin + c + 1) * kh * kw];
                                let dst = &mut s[(b * cin + c) * h * w..(b * cin + c + 1) * h * w];
                                for i in 0..oh {
                                    for j in 0..ow {
                                        let gv = go[i * ow + j];
                                        for a in 0..kh {
                                            for e in 0..kw {
                                                dst[(i + a) * w + j + e] += gv * ker[a * kw + e];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*kernels, &mut |s| {
                    for b in 0..n {
                        for o in 0..cout {
                            let go = &g[(b * cout + o) * oh * ow..(b * cout + o + 1) * oh * ow];
                            for c in 0..cin {
                                let src = &xd[(b * cin + c) * h * w..(b * cin + c + 1) * h * w];
                                let dst = &mut s[(o * cin + c) * kh * kw..(o * cin + c + 1) * kh * kw];
                                for a in 0..kh {
                                    for e in 0..kw {
                                        let mut t = 0.0;
                                        for i in 0..oh {
                                            for j in 0..ow {
                                                t += go[i * ow + j] * src[(i + a) * w + j + e];
                                            }
                                        }
                                        dst[a * kw + e] += t;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            }
            Op::Sum(a) => {
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(a) => {
                let count = nodes[a.0].value.numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / count));
            }
            Op::ChannelMean(z) => {
                let (n, c, sp) = channel_layout(nodes[z.0].value.shape()).expect("validated");
                let count = (n * sp) as f64;
                acc(*z, &mut |s| {
                    for b in 0..n {
                        for ch in 0..c {
                            for v in &mut s[(b * c + ch) * sp..(b * c + ch + 1) * sp] {
                                *v += g[ch] / count;
                            }
                        }
                    }
                });
            }
            Op::ChannelSub(z, m) => {
                let (n, c, sp) = channel_layout(nodes[z.0].value.shape()).expect("validated");
                acc(*z, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*m, &mut |s| {
                    for b in 0..n {
                        for (ch, sv) in s.iter_mut().enumerate().take(c) {
                            *sv -= g[(b * c + ch) * sp..(b * c + ch + 1) * sp].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::BnAffine { z, mu, sigma, gamma, beta } => {
                let (n, c, sp) = channel_layout(nodes[z.0].value.shape()).expect("validated");
                let (zd, md, sd, gd) = (val(*z), val(*mu), val(*sigma), val(*gamma));
                // Per-channel reductions shared by the statistic and affine gradients.
                let mut sum_g = vec![0.0; c];
                let mut sum_g_centered = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let range = (b * c + ch) * sp..(b * c + ch + 1) * sp;
                        for (&gv, &x) in g[range.clone()].iter().zip(&zd[range]) {
                            sum_g[ch] += gv;
                            sum_g_centered[ch] += gv * (x - md[ch]);
                        }
                    }
                }
                acc(*z, &mut |s| {
                    for b in 0..n {
                        for ch in 0..c {
                            let scale = gd[ch] / sd[ch];
                            let range = (b * c + ch) * sp..(b * c + ch + 1) * sp;
                            for (sv, &gv) in s[range.clone()].iter_mut().zip(&g[range]) {
                                *sv += gv * scale;
                            }
                        }
                    }
                });
                acc(*mu, &mut |s| {
                    for ch in 0..c {
                        s[ch] -= sum_g[ch] * gd[ch] / sd[ch];
                    }
                });
                acc(*sigma, &mut |s| {
                    for ch in 0..c {
                        s[ch] -= sum_g_centered[ch] * gd[ch] / (sd[ch] * sd[ch]);
                    }
                });
                acc(*gamma, &mut |s| {
                    for ch in 0..c {
                        s[ch] += sum_g_centered[ch] / sd[ch];
                    }
                });
                acc(*beta, &mut |s| {
                    for ch in 0..c {
                        s[ch] += sum_g[ch];
                    }
                });
            }
            Op::SpatialMean(x) => {
                let (n, c, sp) = channel_layout(nodes[x.0].value.shape()).expect("validated");
                acc(*x, &mut |s| {
                    for i in 0..n * c {
                        for v in &mut s[i * sp..(i + 1) * sp] {
                            *v += g[i] / sp as f64;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &mut |s| {
                    for i in 0..n {
                        for j in 0..k {
                            let target = if j == labels[i] { 1.0 } else { 0.0 };
                            s[i * k + j] += scale * (probs[i * k + j] - target);
                        }
                    }
                });
            }
            Op::Entropy { logits, probs } => {
                let tl = &nodes[logits.0].value;
                let (n, k) = (tl.shape()[0], tl.shape()[1]);
                let ld = tl.data();
                let scale = g[0] / n as f64;
                acc(*logits, &mut |s| {
                    for i in 0..n {
                        let row = i * k..(i + 1) * k;
                        let expected: f64 = probs[row.clone()].iter().zip(&ld[row]).map(|(p, l)| p * l).sum();
                        for j in 0..k {
                            let p = probs[i * k + j];
                            s[i * k + j] -= scale * p * (ld[i * k + j] - expected);
                        }
                    }
                });
            }
            Op::NegSqDist { features, centroids } => {
                let (tf, tc) = (&nodes[features.0].value, &nodes[centroids.0].value);
                let (n, d, k) = (tf.shape()[0], tf.shape()[1], tc.shape()[0]);
                let (fd, cd) = (tf.data(), tc.data());
                acc(*features, &mut |s| {
                    for i in 0..n {
                        for j in 0..k {
                            let gv = g[i * k + j];
                            for p in 0..d {
                                s[i * d + p] -= 2.0 * gv * (fd[i * d + p] - cd[j * d + p]);
                            }
                        }
                    }
                });
                acc(*centroids, &mut |s| {
                    for i in 0..n {
                        for j in 0..k {
                            let gv = g[i * k + j];
                            for p in 0..d {
                                s[j * d + p] += 2.0 * gv * (fd[i * d + p] - cd[j * d + p]);
                            }
                        }
                    }
                });
            }
        }
    }
}
