//! Adam optimizer with bias correction.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::param::{ParamId, Parameter};

/// Per-parameter first/second moment accumulators.
#[derive(Clone, Debug)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adaptive moment estimation. One instance owns the state for every
/// trainable parameter it has seen; the step counter is shared.
#[derive(Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    moments: BTreeMap<ParamId, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam::with(0.9, 0.999, 1e-8)
    }

    pub fn with(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once per optimizer step before
    /// the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
        self.beta1_pow *= self.beta1;
        self.beta2_pow *= self.beta2;
    }

    /// Bias-corrected moment update of one parameter, applied in place.
    /// Non-trainable parameters are left untouched.
    pub fn update(&mut self, p: &mut Parameter, lr: f64) {
        if !p.trainable() {
            return;
        }
        debug_assert!(self.step > 0, "begin_step before update");
        let n = p.value().numel();
        let entry = self.moments.entry(p.id()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let grad = p.grad().values().to_vec();
        let m_corr = 1.0 / (1.0 - self.beta1_pow);
        let v_corr = 1.0 / (1.0 - self.beta2_pow);
        let values = p.value_mut().values_mut();
        for i in 0..n {
            let g = grad[i];
            entry.m[i] = self.beta1 * entry.m[i] + (1.0 - self.beta1) * g;
            entry.v[i] = self.beta2 * entry.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = entry.m[i] * m_corr;
            let v_hat = entry.v[i] * v_corr;
            values[i] -= lr * m_hat / (math::sqrt(v_hat) + self.eps);
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Moments)> {
        self.moments.iter().map(|(&id, m)| (id, m))
    }

    /// Rebuilds optimizer state from a checkpoint.
    pub fn restore(
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        beta1_pow: f64,
        beta2_pow: f64,
        moments: BTreeMap<ParamId, Moments>,
    ) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step,
            beta1_pow,
            beta2_pow,
            moments,
        }
    }

    pub fn beta_pows(&self) -> (f64, f64) {
        (self.beta1_pow, self.beta2_pow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamAlloc;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_fresh_parameter_unchanged() {
        let mut alloc = ParamAlloc::new();
        let mut p = Parameter::new(&mut alloc, Tensor::vector(&[1.5, -2.0]), true);
        let mut adam = Adam::new();
        adam.begin_step();
        adam.update(&mut p, 1e-3);
        assert_eq!(p.value().values(), &[1.5, -2.0]);
    }

    #[test]
    fn non_trainable_parameters_receive_no_update() {
        let mut alloc = ParamAlloc::new();
        let mut p = Parameter::new(&mut alloc, Tensor::vector(&[1.0]), false);
        p.accumulate_grad(&Tensor::vector(&[5.0]));
        let mut adam = Adam::new();
        adam.begin_step();
        adam.update(&mut p, 1e-1);
        assert_eq!(p.value().values(), &[1.0]);
    }

    #[test]
    fn single_step_matches_literal_formula() {
        // Literal-formula oracle for one scalar parameter, one step.
        let (beta1, beta2, eps, lr, g, x0): (f64, f64, f64, f64, f64, f64) =
            (0.9, 0.999, 1e-8, 1e-2, 0.3, 2.0);
        let m = (1.0 - beta1) * g;
        let v = (1.0 - beta2) * g * g;
        let m_hat = m / (1.0 - beta1);
        let v_hat = v / (1.0 - beta2);
        let expected = x0 - lr * m_hat / (v_hat.sqrt() + eps);

        let mut alloc = ParamAlloc::new();
        let mut p = Parameter::new(&mut alloc, Tensor::vector(&[x0]), true);
        p.accumulate_grad(&Tensor::vector(&[g]));
        let mut adam = Adam::new();
        adam.begin_step();
        adam.update(&mut p, lr);
        assert!((p.value().values()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_step_approaches_lr_sign() {
        // Long-run oracle: with a constant gradient the bias-corrected update
        // magnitude tends to lr * sign(g).
        let mut alloc = ParamAlloc::new();
        let mut p = Parameter::new(&mut alloc, Tensor::vector(&[0.0]), true);
        let mut adam = Adam::new();
        let lr = 1e-3;
        let g = -0.42;
        let mut prev = 0.0;
        let mut step_size = 0.0;
        for _ in 0..5000 {
            p.zero_grad();
            p.accumulate_grad(&Tensor::vector(&[g]));
            adam.begin_step();
            adam.update(&mut p, lr);
            let cur = p.value().values()[0];
            step_size = cur - prev;
            prev = cur;
        }
        // Gradient negative, so the parameter climbs by about lr per step.
        assert!((step_size - lr).abs() < 1e-6);
    }
}
