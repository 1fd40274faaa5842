//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Graph`] records every operation of one forward pass as a node whose
//! inputs always precede it on the tape, so walking the tape backwards is a
//! topological order that visits each node exactly once. The graph is built
//! fresh for every training step and dropped after `backward`.
//!
//! Gradients accumulate: `backward` adds into existing gradient buffers, and
//! parameter gradients are carried over to [`Parameter`] accumulators via
//! [`crate::nn::Network::accumulate_grads`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::param::{ParamId, Parameter};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Constant input; no backward.
    Leaf,
    /// Leaf seeded from a [`Parameter`]; its gradient is looked up through
    /// the graph's id-to-node table after backward.
    Param,
    /// `y = x @ w` for `x: [n, k]`, `w: [k, m]`.
    MatMul { x: Var, w: Var },
    /// `y = x + b` with `b` broadcast over rows.
    AddBias { x: Var, b: Var },
    Relu { x: Var },
    /// Row-wise softmax; backward uses the saved output.
    Softmax { x: Var },
    /// Identity forward, `-scale` times the gradient backward.
    GradReverse { x: Var, scale: f64 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    /// Mean of the selected rows of a matrix.
    SelectMean { x: Var, rows: Vec<usize> },
    /// Sum of squared entries, yielding a scalar.
    SumSquares { x: Var },
    /// Mean (optionally weighted) softmax cross-entropy over rows.
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        weights: Option<Vec<f64>>,
        probs: Tensor,
    },
    /// Mean (optionally weighted) binary cross-entropy on logits.
    SigmoidBce {
        scores: Var,
        targets: Vec<bool>,
        weights: Option<Vec<f64>>,
    },
    /// Batch normalization over the batch dimension (training statistics).
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    /// Batch normalization with fixed (running) statistics.
    BnEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Output of a training-mode batch normalization node: the normalized value
/// plus the batch statistics recorded for the running-statistics update.
pub struct BnTrainResult {
    pub out: Var,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Tape of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter leaf, copying its current value. Registering the
    /// same parameter twice returns the existing node.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.push(p.value().clone(), Op::Param);
        self.params.insert(p.id(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of the leaf registered for parameter `id`, if it was both
    /// registered and reached by backward.
    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.grad(v))
    }

    /// Smallest magnitude among all ReLU inputs on the tape. Finite-difference
    /// checks use this to reject instances whose perturbations would cross
    /// the ReLU kink.
    pub fn min_abs_relu_input(&self) -> f64 {
        let mut min = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for &v in self.nodes[x.0].value.values() {
                    min = min.min(v.abs());
                }
            }
        }
        min
    }

    // ── Differentiable operations ───────────────────────────────────────

    /// `y = x @ w`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, k) = self.value(x).dims2("matmul")?;
        let (k2, m) = self.value(w).dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                left: self.value(x).shape().to_vec(),
                right: self.value(w).shape().to_vec(),
            });
        }
        let xv = self.value(x).values();
        let wv = self.value(w).values();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let xi = xv[i * k + p];
                if xi == 0.0 {
                    continue;
                }
                for j in 0..m {
                    out[i * m + j] += xi * wv[p * m + j];
                }
            }
        }
        let value = Tensor::new(&[n, m], out)?;
        Ok(self.push(value, Op::MatMul { x, w }))
    }

    /// `y = x + b`, with the bias vector broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2("add_bias")?;
        if self.value(b).numel() != m {
            return Err(Error::ShapeMismatch {
                context: "add_bias",
                left: self.value(x).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let bv = self.value(b).values().to_vec();
        let mut out = self.value(x).values().to_vec();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += bv[j];
            }
        }
        let value = Tensor::new(&[n, m], out)?;
        Ok(self.push(value, Op::AddBias { x, b }))
    }

    /// Dense layer `y = x W + b`.
    pub fn affine_transform(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).values().to_vec();
        for v in &mut out {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let value = Tensor::new(&shape, out).expect("same shape");
        self.push(value, Op::Relu { x })
    }

    /// Row-wise softmax, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims2("softmax")?;
        let value = self.value(x).softmax_rows();
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `-scale` in the backward pass.
    pub fn grad_reverse(&mut self, x: Var, scale: f64) -> Var {
        assert!(scale >= 0.0, "gradient reversal scale must be nonnegative");
        let value = self.value(x).clone();
        self.push(value, Op::GradReverse { x, scale })
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let shape = self.value(a).shape().to_vec();
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Elementwise difference of two same-shaped tensors.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let shape = self.value(a).shape().to_vec();
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f64> = self.value(x).values().iter().map(|v| v * factor).collect();
        let value = Tensor::new(&shape, out).expect("same shape");
        self.push(value, Op::Scale { x, factor })
    }

    /// Mean of the selected rows of a matrix, as a vector.
    pub fn select_mean(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.value(x).dims2("select_mean")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::InvalidConfig(alloc::format!(
                "select_mean rows must be nonempty and < {n}"
            )));
        }
        let xv = self.value(x).values();
        let mut out = vec![0.0; m];
        for &r in rows {
            for j in 0..m {
                out[j] += xv[r * m + j];
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for v in &mut out {
            *v *= inv;
        }
        let value = Tensor::new(&[m], out)?;
        Ok(self.push(
            value,
            Op::SelectMean {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Sum of squared entries, as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).values().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x })
    }

    /// Mean softmax cross-entropy of `logits` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.softmax_xent_impl(logits, labels, None)
    }

    /// Weighted variant: the per-example losses are scaled by `weights`
    /// before averaging over the batch.
    pub fn softmax_cross_entropy_weighted(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        self.softmax_xent_impl(logits, labels, Some(weights.to_vec()))
    }

    fn softmax_xent_impl(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: Option<Vec<f64>>,
    ) -> Result<Var> {
        let (n, c) = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != n || weights.as_ref().is_some_and(|w| w.len() != n) {
            return Err(Error::ShapeMismatch {
                context: "softmax_cross_entropy",
                left: vec![n],
                right: vec![labels.len()],
            });
        }
        for &y in labels {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
        }
        let probs = self.value(logits).softmax_rows();
        let zv = self.value(logits).values();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &zv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|&z| math::exp(z - max)).sum::<f64>());
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            total += w * (lse - row[y]);
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                weights,
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy on logits, in the overflow-free formulation
    /// `max(s, 0) - s*t + ln(1 + exp(-|s|))`.
    pub fn sigmoid_bce(&mut self, scores: Var, targets: &[bool]) -> Result<Var> {
        self.sigmoid_bce_impl(scores, targets, None)
    }

    /// Weighted variant of [`Graph::sigmoid_bce`].
    pub fn sigmoid_bce_weighted(
        &mut self,
        scores: Var,
        targets: &[bool],
        weights: &[f64],
    ) -> Result<Var> {
        self.sigmoid_bce_impl(scores, targets, Some(weights.to_vec()))
    }

    fn sigmoid_bce_impl(
        &mut self,
        scores: Var,
        targets: &[bool],
        weights: Option<Vec<f64>>,
    ) -> Result<Var> {
        let n = self.value(scores).numel();
        if targets.len() != n || weights.as_ref().is_some_and(|w| w.len() != n) {
            return Err(Error::ShapeMismatch {
                context: "sigmoid_bce",
                left: vec![n],
                right: vec![targets.len()],
            });
        }
        let sv = self.value(scores).values();
        let mut total = 0.0;
        for i in 0..n {
            let s = sv[i];
            let t = if targets[i] { 1.0 } else { 0.0 };
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            total += w * (s.max(0.0) - s * t + math::ln_1p(math::exp(-s.abs())));
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            Op::SigmoidBce {
                scores,
                targets: targets.to_vec(),
                weights,
            },
        ))
    }

    /// Batch normalization in training mode: whitens per channel with batch
    /// statistics (biased variance, divisor N) and applies the affine
    /// transform. Gradient flows through the batch mean and variance.
    pub fn bn_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<BnTrainResult> {
        let (n, c) = self.value(x).dims2("bn_train")?;
        if n < 2 {
            return Err(Error::BatchTooSmall { n });
        }
        self.check_channels("bn_train", gamma, c)?;
        self.check_channels("bn_train", beta, c)?;
        let xv = self.value(x).values();

        let mut mean = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                mean[j] += xv[i * c + j];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                let d = xv[i * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / math::sqrt(v + eps)).collect();

        let mut xhat = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                xhat[i * c + j] = (xv[i * c + j] - mean[j]) * inv_std[j];
            }
        }
        let gv = self.value(gamma).values().to_vec();
        let bv = self.value(beta).values().to_vec();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = gv[j] * xhat[i * c + j] + bv[j];
            }
        }
        let xhat = Tensor::new(&[n, c], xhat)?;
        let value = Tensor::new(&[n, c], out)?;
        let out_var = self.push(
            value,
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok(BnTrainResult {
            out: out_var,
            batch_mean: mean,
            batch_var: var,
        })
    }

    /// Batch normalization in evaluation mode: whitens with the supplied
    /// (running) statistics. Per-example, independent of batch composition.
    pub fn bn_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c) = self.value(x).dims2("bn_eval")?;
        self.check_channels("bn_eval", gamma, c)?;
        self.check_channels("bn_eval", beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch {
                context: "bn_eval",
                left: vec![c],
                right: vec![running_mean.len(), running_var.len()],
            });
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|&v| 1.0 / math::sqrt(v + eps))
            .collect();
        let xv = self.value(x).values();
        let mut xhat = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                xhat[i * c + j] = (xv[i * c + j] - running_mean[j]) * inv_std[j];
            }
        }
        let gv = self.value(gamma).values().to_vec();
        let bv = self.value(beta).values().to_vec();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = gv[j] * xhat[i * c + j] + bv[j];
            }
        }
        let xhat = Tensor::new(&[n, c], xhat)?;
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(
            value,
            Op::BnEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn check_same_shape(&self, context: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                context,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_channels(&self, context: &'static str, v: Var, c: usize) -> Result<()> {
        if self.value(v).numel() != c {
            return Err(Error::ShapeMismatch {
                context,
                left: vec![c],
                right: self.value(v).shape().to_vec(),
            });
        }
        Ok(())
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Propagates gradients from a scalar loss to every reachable node.
    ///
    /// The tape is walked once in reverse construction order, which is a
    /// topological order by construction. Each call computes the pass's
    /// gradients in a scratch buffer and then adds them into the persistent
    /// per-node accumulators, so repeated calls without a reset accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut scratch: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            // All contributions to scratch[id] come from later nodes, which
            // have already been visited, so the slot is final here.
            let Some(gout) = scratch[id].take() else {
                continue;
            };
            let g = gout.values();
            let nodes = &self.nodes;
            match &nodes[id].op {
                Op::Leaf | Op::Param => {}
                Op::MatMul { x, w } => {
                    let (n, k) = nodes[x.0].value.dims2("matmul").expect("checked");
                    let m = nodes[w.0].value.shape()[1];
                    let xv = nodes[x.0].value.values();
                    let wv = nodes[w.0].value.values();
                    {
                        let dx = scratch_buf(&mut scratch, nodes, *x);
                        for i in 0..n {
                            for j in 0..m {
                                let gij = g[i * m + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    dx[i * k + p] += gij * wv[p * m + j];
                                }
                            }
                        }
                    }
                    {
                        let dw = scratch_buf(&mut scratch, nodes, *w);
                        for i in 0..n {
                            for p in 0..k {
                                let xi = xv[i * k + p];
                                if xi == 0.0 {
                                    continue;
                                }
                                for j in 0..m {
                                    dw[p * m + j] += xi * g[i * m + j];
                                }
                            }
                        }
                    }
                }
                Op::AddBias { x, b } => {
                    let (n, m) = nodes[id].value.dims2("add_bias").expect("checked");
                    {
                        let dx = scratch_buf(&mut scratch, nodes, *x);
                        for (d, gi) in dx.iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                    {
                        let db = scratch_buf(&mut scratch, nodes, *b);
                        for i in 0..n {
                            for j in 0..m {
                                db[j] += g[i * m + j];
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = nodes[x.0].value.values();
                    let dx = scratch_buf(&mut scratch, nodes, *x);
                    for (i, &v) in xv.iter().enumerate() {
                        if v > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
                Op::Softmax { x } => {
                    let (n, c) = nodes[id].value.dims2("softmax").expect("checked");
                    let y = nodes[id].value.values();
                    let dx = scratch_buf(&mut scratch, nodes, *x);
                    for i in 0..n {
                        let row = &y[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = row.iter().zip(grow).map(|(yj, gj)| yj * gj).sum();
                        for j in 0..c {
                            dx[i * c + j] += row[j] * (grow[j] - dot);
                        }
                    }
                }
                Op::GradReverse { x, scale } => {
                    let dx = scratch_buf(&mut scratch, nodes, *x);
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d -= scale * gi;
                    }
                }
                Op::Add { a, b } => {
                    for (d, gi) in scratch_buf(&mut scratch, nodes, *a).iter_mut().zip(g) {
                        *d += gi;
                    }
                    for (d, gi) in scratch_buf(&mut scratch, nodes, *b).iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                Op::Sub { a, b } => {
                    for (d, gi) in scratch_buf(&mut scratch, nodes, *a).iter_mut().zip(g) {
                        *d += gi;
                    }
                    for (d, gi) in scratch_buf(&mut scratch, nodes, *b).iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
                Op::Scale { x, factor } => {
                    let dx = scratch_buf(&mut scratch, nodes, *x);
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += factor * gi;
                    }
                }
                Op::SelectMean { x, rows } => {
                    let m = nodes[id].value.numel();
                    let inv = 1.0 / rows.len() as f64;
                    let dx = scratch_buf(&mut scratch, nodes, *x);
                    for &r in rows {
                        for j in 0..m {
                            dx[r * m + j] += g[j] * inv;
                        }
                    }
                }
                Op::SumSquares { x } => {
                    let xv = nodes[x.0].value.values();
                    let dx = scratch_buf(&mut scratch, nodes, *x);
                    for (d, xi) in dx.iter_mut().zip(xv) {
                        *d += 2.0 * xi * g[0];
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    weights,
                    probs,
                } => {
                    let (n, c) = probs.dims2("softmax_xent").expect("checked");
                    let pv = probs.values();
                    let dz = scratch_buf(&mut scratch, nodes, *logits);
                    let base = g[0] / n as f64;
                    for (i, &y) in labels.iter().enumerate() {
                        let w = weights.as_ref().map_or(1.0, |w| w[i]);
                        for j in 0..c {
                            let indicator = if j == y { 1.0 } else { 0.0 };
                            dz[i * c + j] += base * w * (pv[i * c + j] - indicator);
                        }
                    }
                }
                Op::SigmoidBce {
                    scores,
                    targets,
                    weights,
                } => {
                    let n = targets.len();
                    let sv = nodes[scores.0].value.values();
                    let base = g[0] / n as f64;
                    let contributions: Vec<f64> = (0..n)
                        .map(|i| {
                            let t = if targets[i] { 1.0 } else { 0.0 };
                            let w = weights.as_ref().map_or(1.0, |w| w[i]);
                            base * w * (sigmoid(sv[i]) - t)
                        })
                        .collect();
                    let ds = scratch_buf(&mut scratch, nodes, *scores);
                    for (d, c) in ds.iter_mut().zip(&contributions) {
                        *d += c;
                    }
                }
                Op::BnTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, c) = xhat.dims2("bn_train").expect("checked");
                    let xh = xhat.values();
                    let gv = nodes[gamma.0].value.values();

                    // Per-channel reductions of the incoming gradient.
                    let mut sum_g = vec![0.0; c];
                    let mut sum_g_xhat = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            sum_g[j] += g[i * c + j];
                            sum_g_xhat[j] += g[i * c + j] * xh[i * c + j];
                        }
                    }
                    {
                        let dgamma = scratch_buf(&mut scratch, nodes, *gamma);
                        for j in 0..c {
                            dgamma[j] += sum_g_xhat[j];
                        }
                    }
                    {
                        let dbeta = scratch_buf(&mut scratch, nodes, *beta);
                        for j in 0..c {
                            dbeta[j] += sum_g[j];
                        }
                    }
                    {
                        // Full backward through the batch mean and variance:
                        // dx = gamma*inv_std/N * (N*g - sum(g) - xhat*sum(g*xhat))
                        let dx = scratch_buf(&mut scratch, nodes, *x);
                        let nf = n as f64;
                        for i in 0..n {
                            for j in 0..c {
                                let idx = i * c + j;
                                dx[idx] += gv[j] * inv_std[j] / nf
                                    * (nf * g[idx] - sum_g[j] - xh[idx] * sum_g_xhat[j]);
                            }
                        }
                    }
                }
                Op::BnEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, c) = xhat.dims2("bn_eval").expect("checked");
                    let xh = xhat.values();
                    let gv = nodes[gamma.0].value.values();
                    {
                        let dgamma = scratch_buf(&mut scratch, nodes, *gamma);
                        for i in 0..n {
                            for j in 0..c {
                                dgamma[j] += g[i * c + j] * xh[i * c + j];
                            }
                        }
                    }
                    {
                        let dbeta = scratch_buf(&mut scratch, nodes, *beta);
                        for i in 0..n {
                            for j in 0..c {
                                dbeta[j] += g[i * c + j];
                            }
                        }
                    }
                    {
                        let dx = scratch_buf(&mut scratch, nodes, *x);
                        for i in 0..n {
                            for j in 0..c {
                                dx[i * c + j] += g[i * c + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            // Fold this pass's gradient into the persistent accumulator.
            match &mut self.nodes[id].grad {
                Some(acc) => {
                    for (a, b) in acc.values_mut().iter_mut().zip(gout.values()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(gout),
            }
        }
        Ok(())
    }
}

fn scratch_buf<'a>(scratch: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'a mut [f64] {
    let slot = &mut scratch[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[v.0].value.shape()));
    }
    slot.as_mut().expect("just set").values_mut()
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + math::exp(-s))
    } else {
        let e = math::exp(s);
        e / (1.0 + e)
    }
}
