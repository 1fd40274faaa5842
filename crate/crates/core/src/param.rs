//! Trainable parameters with stable identities.

use crate::tensor::Tensor;

/// Identity of a parameter within one model. Stable across training steps;
/// the optimizer keys its per-parameter state on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u32);

impl ParamId {
    pub fn index(self) -> u32 {
        self.0
    }
}

/// Hands out unique parameter ids for the lifetime of one model.
#[derive(Debug, Default)]
pub struct ParamAlloc {
    next: u32,
}

impl ParamAlloc {
    pub fn new() -> Self {
        ParamAlloc { next: 0 }
    }

    pub fn next_id(&mut self) -> ParamId {
        let id = ParamId(self.next);
        self.next += 1;
        id
    }
}

/// A tensor that participates in optimization, together with its gradient
/// accumulator. Non-trainable parameters keep a gradient buffer but receive
/// no optimizer updates.
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn new(alloc: &mut ParamAlloc, value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            id: alloc.next_id(),
            value,
            grad,
            trainable,
        }
    }

    /// Copy of this parameter's values under a fresh identity.
    pub fn duplicate(&self, alloc: &mut ParamAlloc) -> Self {
        Parameter::new(alloc, self.value.clone(), self.trainable)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    /// Adds `delta` into the gradient buffer (gradients accumulate until
    /// explicitly zeroed).
    pub fn accumulate_grad(&mut self, delta: &Tensor) {
        debug_assert_eq!(self.grad.shape(), delta.shape());
        for (g, d) in self.grad.values_mut().iter_mut().zip(delta.values()) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.values_mut().fill(0.0);
    }
}
