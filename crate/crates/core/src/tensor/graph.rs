//! Computation graph and reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so creation order is already a
//! topological order and the backward pass is a single reverse sweep. Op
//! records are only stored when an input requires gradients; pure inference
//! just appends value leaves.

use super::kernels;
use super::{BnLayerStats, BnMode, Scalar, Tensor, TensorError, BN_EPS, BN_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op<S> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Neg {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    Exp {
        a: NodeId,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<u32>,
    },
    BatchNorm2d {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<S>,
        inv_std: Vec<S>,
        batch_stats: bool,
    },
    LogSoftmax {
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
}

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Gradients of a scalar loss with respect to every grad-tracked node.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        let requires_grad = value.requires_grad();
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        // Without grad-tracked inputs the op record is dropped: the node
        // participates as a plain value.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        id
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── forward ops ─────────────────────────────────────────────────

    /// 2-d matrix product \[m,k\] x \[k,n\].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("lhs {ash:?} vs rhs {bsh:?}"),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_accum(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(t, self.needs_grad(&[a, b]), Op::MatMul { a, b }))
    }

    /// Elementwise add with right-aligned broadcasting (used for biases).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.broadcast_binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    /// Elementwise multiply with right-aligned broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.broadcast_binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn broadcast_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<NodeId, TensorError> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        let out_shape = kernels::broadcast_shape(ash, bsh).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: name,
                detail: format!("cannot broadcast {ash:?} with {bsh:?}"),
            }
        })?;
        let mut out = vec![S::zero(); out_shape.iter().product()];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            if ash == bsh {
                for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
                    *o = f(x, y);
                }
            } else {
                kernels::for_each_broadcast(&out_shape, ash, bsh, |oi, ai, bi| {
                    out[oi] = f(ad[ai], bd[bi]);
                });
            }
        }
        let t = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(t, self.needs_grad(&[a, b]), op))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let out: Vec<S> = self.value(a).data().iter().map(|&x| -x).collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), out).expect("neg shape");
        self.push(t, self.needs_grad(&[a]), Op::Neg { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let zero = S::zero();
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > zero { x } else { zero })
            .collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), out).expect("relu shape");
        self.push(t, self.needs_grad(&[a]), Op::Relu { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out: Vec<S> = self.value(a).data().iter().map(|&x| x.exp()).collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), out).expect("exp shape");
        self.push(t, self.needs_grad(&[a]), Op::Exp { a })
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// Input \[N,Cin,H,W\], weight \[Cout,Cin,3,3\]; bias is a separate `add`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId) -> Result<NodeId, TensorError> {
        let ish = self.value(input).shape().to_vec();
        let wsh = self.value(weight).shape().to_vec();
        if ish.len() != 4 || wsh.len() != 4 || wsh[2] != 3 || wsh[3] != 3 || ish[1] != wsh[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {ish:?} vs weight {wsh:?} (expect [N,C,H,W] and [K,C,3,3])"),
            });
        }
        let (n, cin, h, w) = (ish[0], ish[1], ish[2], ish[3]);
        let cout = wsh[0];
        let mut out = vec![S::zero(); n * cout * h * w];
        kernels::conv2d_3x3(
            self.value(input).data(),
            self.value(weight).data(),
            &mut out,
            n,
            cin,
            cout,
            h,
            w,
        );
        let t = Tensor::from_vec(vec![n, cout, h, w], out)?;
        Ok(self.push(t, self.needs_grad(&[input, weight]), Op::Conv2d { input, weight }))
    }

    /// 2x2 max pooling, stride 2. Requires even spatial dimensions.
    pub fn maxpool2d(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let ish = self.value(input).shape().to_vec();
        if ish.len() != 4 || ish[2] % 2 != 0 || ish[3] % 2 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool2d",
                detail: format!("need [N,C,H,W] with even H and W, got {ish:?}"),
            });
        }
        let (n, c, h, w) = (ish[0], ish[1], ish[2], ish[3]);
        let (oh, ow) = (h / 2, w / 2);
        let data = self.value(input).data();
        let mut out = vec![S::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let ibase = plane * h * w;
            let obase = plane * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = ibase + (2 * oy) * w + 2 * ox;
                    // fixed visit order: top-left, top-right, bottom-left, bottom-right;
                    // strict > keeps the first (lowest-index) maximum
                    let mut best = i00;
                    for &cand in &[i00 + 1, i00 + w, i00 + w + 1] {
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    out[obase + oy * ow + ox] = data[best];
                    argmax[obase + oy * ow + ox] = best as u32;
                }
            }
        }
        let t = Tensor::from_vec(vec![n, c, oh, ow], out)?;
        Ok(self.push(t, self.needs_grad(&[input]), Op::MaxPool2d { input, argmax }))
    }

    /// Batch normalization over \[N,C,H,W\] with per-channel affine params.
    ///
    /// `Train` and `Adapt` normalize with current-batch statistics; `Train`
    /// additionally folds them into `stats` with momentum 0.1 (unbiased
    /// variance). `Eval` normalizes with `stats`.
    pub fn batchnorm2d(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        stats: &mut BnLayerStats<S>,
    ) -> Result<NodeId, TensorError> {
        let ish = self.value(input).shape().to_vec();
        if ish.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm2d",
                detail: format!("need [N,C,H,W], got {ish:?}"),
            });
        }
        let (n, c, h, w) = (ish[0], ish[1], ish[2], ish[3]);
        if self.value(gamma).numel() != c
            || self.value(beta).numel() != c
            || stats.mean.len() != c
        {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm2d",
                detail: format!(
                    "channels {c} vs gamma {} / beta {} / stats {}",
                    self.value(gamma).numel(),
                    self.value(beta).numel(),
                    stats.mean.len()
                ),
            });
        }
        let m = n * h * w; // elements per channel
        let plane = h * w;
        let data = self.value(input).data();

        let (mean, var) = match mode {
            BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
            BnMode::Train | BnMode::Adapt => {
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                let inv_m = S::from_f64(1.0 / m as f64);
                for ch in 0..c {
                    let mut acc = S::zero();
                    for img in 0..n {
                        let base = (img * c + ch) * plane;
                        for &v in &data[base..base + plane] {
                            acc = acc + v;
                        }
                    }
                    mean[ch] = acc * inv_m;
                    let mut vac = S::zero();
                    for img in 0..n {
                        let base = (img * c + ch) * plane;
                        for &v in &data[base..base + plane] {
                            let d = v - mean[ch];
                            vac = vac + d * d;
                        }
                    }
                    var[ch] = vac * inv_m;
                }
                if mode == BnMode::Train {
                    let momentum = S::from_f64(BN_MOMENTUM);
                    let keep = S::from_f64(1.0 - BN_MOMENTUM);
                    // unbiased variance goes into the running estimate
                    let unbias = if m > 1 {
                        S::from_f64(m as f64 / (m - 1) as f64)
                    } else {
                        S::one()
                    };
                    for ch in 0..c {
                        stats.mean[ch] = keep * stats.mean[ch] + momentum * mean[ch];
                        stats.var[ch] = keep * stats.var[ch] + momentum * var[ch] * unbias;
                    }
                }
                (mean, var)
            }
        };

        let eps = S::from_f64(BN_EPS);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = vec![S::zero(); data.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in base..base + plane {
                    out[i] = g * ((data[i] - mu) * is) + b;
                }
            }
        }
        let t = Tensor::from_vec(ish, out)?;
        let batch_stats = mode != BnMode::Eval;
        Ok(self.push(
            t,
            self.needs_grad(&[input, gamma, beta]),
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Row-wise log-softmax over the last dimension of a \[n,C\] tensor.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let ash = self.value(a).shape().to_vec();
        if ash.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "log_softmax",
                detail: format!("need [n,C], got {ash:?}"),
            });
        }
        let (n, c) = (ash[0], ash[1]);
        let data = self.value(a).data();
        let mut out = vec![S::zero(); data.len()];
        for r in 0..n {
            let row = &data[r * c..(r + 1) * c];
            let mut mx = row[0];
            for &v in &row[1..] {
                if v > mx {
                    mx = v;
                }
            }
            let mut acc = S::zero();
            for &v in row {
                acc = acc + (v - mx).exp();
            }
            let lse = mx + acc.ln();
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let t = Tensor::from_vec(ash, out)?;
        Ok(self.push(t, self.needs_grad(&[a]), Op::LogSoftmax { a }))
    }

    /// Full reduction to a scalar, fixed left-to-right order.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = S::zero();
        for &v in self.value(a).data() {
            acc = acc + v;
        }
        self.push(Tensor::scalar(acc), self.needs_grad(&[a]), Op::Sum { a })
    }

    /// Full mean to a scalar, fixed left-to-right order.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let numel = self.value(a).numel();
        let mut acc = S::zero();
        for &v in self.value(a).data() {
            acc = acc + v;
        }
        let out = acc * S::from_f64(1.0 / numel as f64);
        self.push(Tensor::scalar(out), self.needs_grad(&[a]), Op::Mean { a })
    }

    /// Shape change over the same buffer (flatten between conv and fc).
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, self.needs_grad(&[a]), Op::Reshape { a }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns d(loss)/d(node) for every
    /// node on a grad-tracked path; gradients accumulate as sums over all
    /// paths.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>, TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss { numel: lv.numel() });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(go) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &go, &mut grads)?;
            grads[idx] = Some(go);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<S>>], id: NodeId, update: impl FnOnce(&mut [S])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(id).shape().to_vec()));
        }
        update(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(
        &self,
        idx: usize,
        go: &Tensor<S>,
        grads: &mut Vec<Option<Tensor<S>>>,
    ) -> Result<(), TensorError> {
        let g = go.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let ash = self.value(*a).shape();
                let (m, k) = (ash[0], ash[1]);
                let n = self.value(*b).shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, |da| {
                    kernels::matmul_grad_lhs(g, bv, da, m, k, n);
                });
                self.accum(grads, *b, |db| {
                    kernels::matmul_grad_rhs(g, av, db, m, k, n);
                });
            }
            Op::Add { a, b } => {
                for &(id, _other) in &[(*a, *b), (*b, *a)] {
                    let ish = self.value(id).shape().to_vec();
                    let osh = go.shape().to_vec();
                    self.accum(grads, id, |d| {
                        if ish == osh {
                            for (dv, &gv) in d.iter_mut().zip(g) {
                                *dv = *dv + gv;
                            }
                        } else {
                            kernels::for_each_broadcast(&osh, &ish, &ish, |oi, ii, _| {
                                d[ii] = d[ii] + g[oi];
                            });
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let osh = go.shape().to_vec();
                for &(id, other) in &[(*a, *b), (*b, *a)] {
                    let ish = self.value(id).shape().to_vec();
                    let tsh = self.value(other).shape().to_vec();
                    let tv = self.value(other).data();
                    self.accum(grads, id, |d| {
                        if ish == osh && tsh == osh {
                            for ((dv, &gv), &ov) in d.iter_mut().zip(g).zip(tv) {
                                *dv = *dv + gv * ov;
                            }
                        } else {
                            kernels::for_each_broadcast(&osh, &ish, &tsh, |oi, ii, ti| {
                                d[ii] = d[ii] + g[oi] * tv[ti];
                            });
                        }
                    });
                }
            }
            Op::Neg { a } => {
                self.accum(grads, *a, |d| {
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv = *dv - gv;
                    }
                });
            }
            Op::Relu { a } => {
                let av = self.value(*a).data();
                let zero = S::zero();
                self.accum(grads, *a, |d| {
                    for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(av) {
                        if xv > zero {
                            *dv = *dv + gv;
                        }
                    }
                });
            }
            Op::Exp { a } => {
                let ov = self.nodes[idx].value.data();
                self.accum(grads, *a, |d| {
                    for ((dv, &gv), &yv) in d.iter_mut().zip(g).zip(ov) {
                        *dv = *dv + gv * yv;
                    }
                });
            }
            Op::Conv2d { input, weight } => {
                let ish = self.value(*input).shape();
                let (n, cin, h, w) = (ish[0], ish[1], ish[2], ish[3]);
                let cout = self.value(*weight).shape()[0];
                let (iv, wv) = (self.value(*input).data(), self.value(*weight).data());
                self.accum(grads, *input, |d| {
                    kernels::conv2d_3x3_grad_input(g, wv, d, n, cin, cout, h, w);
                });
                self.accum(grads, *weight, |d| {
                    kernels::conv2d_3x3_grad_weight(g, iv, d, n, cin, cout, h, w);
                });
            }
            Op::MaxPool2d { input, argmax } => {
                self.accum(grads, *input, |d| {
                    for (oi, &src) in argmax.iter().enumerate() {
                        d[src as usize] = d[src as usize] + g[oi];
                    }
                });
            }
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let ish = self.value(*input).shape();
                let (n, c, h, w) = (ish[0], ish[1], ish[2], ish[3]);
                let plane = h * w;
                let m = n * plane;
                let xv = self.value(*input).data();
                let gv = self.value(*gamma).data();

                // per-channel sums: s1 = sum dY, s2 = sum dY * x_hat
                let mut s1 = vec![S::zero(); c];
                let mut s2 = vec![S::zero(); c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * plane;
                        let (mu, is) = (mean[ch], inv_std[ch]);
                        let mut a1 = s1[ch];
                        let mut a2 = s2[ch];
                        for i in base..base + plane {
                            let xh = (xv[i] - mu) * is;
                            a1 = a1 + g[i];
                            a2 = a2 + g[i] * xh;
                        }
                        s1[ch] = a1;
                        s2[ch] = a2;
                    }
                }
                self.accum(grads, *beta, |d| {
                    for (dv, &v) in d.iter_mut().zip(&s1) {
                        *dv = *dv + v;
                    }
                });
                self.accum(grads, *gamma, |d| {
                    for (dv, &v) in d.iter_mut().zip(&s2) {
                        *dv = *dv + v;
                    }
                });
                let inv_m = S::from_f64(1.0 / m as f64);
                let use_batch = *batch_stats;
                self.accum(grads, *input, |d| {
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * plane;
                            let (mu, is, ga) = (mean[ch], inv_std[ch], gv[ch]);
                            let scale = ga * is;
                            if use_batch {
                                let m1 = s1[ch] * inv_m;
                                let m2 = s2[ch] * inv_m;
                                for i in base..base + plane {
                                    let xh = (xv[i] - mu) * is;
                                    d[i] = d[i] + scale * (g[i] - m1 - xh * m2);
                                }
                            } else {
                                for i in base..base + plane {
                                    d[i] = d[i] + scale * g[i];
                                }
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let ov = self.nodes[idx].value.data();
                let sh = self.nodes[idx].value.shape();
                let (n, c) = (sh[0], sh[1]);
                self.accum(grads, *a, |d| {
                    for r in 0..n {
                        let lo = r * c;
                        let mut rowsum = S::zero();
                        for &gvv in &g[lo..lo + c] {
                            rowsum = rowsum + gvv;
                        }
                        for i in lo..lo + c {
                            d[i] = d[i] + g[i] - ov[i].exp() * rowsum;
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let gs = g[0];
                self.accum(grads, *a, |d| {
                    for dv in d.iter_mut() {
                        *dv = *dv + gs;
                    }
                });
            }
            Op::Mean { a } => {
                let numel = self.value(*a).numel();
                let gs = g[0] * S::from_f64(1.0 / numel as f64);
                self.accum(grads, *a, |d| {
                    for dv in d.iter_mut() {
                        *dv = *dv + gs;
                    }
                });
            }
            Op::Reshape { a } => {
                self.accum(grads, *a, |d| {
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv = *dv + gv;
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        g.leaf(Tensor::from_vec(shape, data).unwrap().with_grad())
    }

    #[test]
    fn log_softmax_symmetric_pair() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = g.log_softmax(z).unwrap();
        let ln2 = std::f64::consts::LN_2;
        for &v in g.value(y).data() {
            assert!((v + ln2).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv2d_all_ones_kernel_counts_neighbors() {
        // 1x1x3x3 ones image, single 3x3 ones kernel, zero padding:
        // each output counts the in-frame taps. Hand-expanded sliding window:
        //   corners 4, edges 6, center 9.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let w = g.leaf(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w).unwrap();
        let expect = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(g.value(y).data(), &expect);
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(vec![1, 2, 3, 3], 1.0));
        let w = g.leaf(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let err = g.conv2d(x, w).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "conv2d", .. }));
    }

    #[test]
    fn backward_sum_of_squares() {
        // loss = sum(x^2) at x = [1, 2] -> grad [2, 4]
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_mean_spreads_evenly() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let loss = g.mean(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { numel: 2 })
        ));
    }

    #[test]
    fn maxpool_forwards_max_and_routes_grad() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, vec![1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]);
        let y = g.maxpool2d(x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn exp_of_log_softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::from_vec(vec![2, 3], vec![0.3, -1.2, 2.0, 10.0, 10.0, 9.5]).unwrap());
        let ls = g.log_softmax(z).unwrap();
        let p = g.exp(ls);
        let data = g.value(p).data();
        for r in 0..2 {
            let s: f64 = data[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let run = || {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(
                Tensor::from_vec(vec![2, 2], vec![0.1, -0.7, 0.33, 1.9]).unwrap(),
            );
            let w = g.leaf(Tensor::from_vec(vec![2, 2], vec![1.5, 0.2, -0.4, 0.9]).unwrap());
            let y = g.matmul(x, w).unwrap();
            let ls = g.log_softmax(y).unwrap();
            g.value(ls).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn inference_does_not_record_ops() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(vec![2], 1.0)); // no grad
        let y = g.relu(x);
        assert!(!g.requires_grad(y));
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
    }
}
