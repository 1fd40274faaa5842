//! Unsupervised domain adaptation with domain-specific batch normalization,
//! built on a minimal f64 reverse-mode autodiff core.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`graph`]: dense row-major tensors and a per-step tape of
//!   differentiable operations (dense layers, activations, losses, batch norm).
//! - [`norm`]: batch normalization state, domain-specific multi-branch layers,
//!   and BN-to-DSBN network conversion.
//! - [`nn`]: plain MLP networks assembled from the above.
//! - [`loss`]: adaptation objectives (semantic matching, domain adversarial,
//!   class-weighted variants, multi-source aggregation).
//! - [`schedule`] / [`optim`]: adaptation-factor and learning-rate schedules,
//!   Adam.
//! - [`data`]: synthetic domain-shift datasets, per-domain batching, and the
//!   transductive evaluation protocol.
//! - [`pipeline`]: the two-stage training procedure with scheduled
//!   pseudo-label refinement and iterative repetition.
//!
//! The crate is `no_std`-compatible (with `alloc`); file formats, config
//! parsing, and the CLI live in the companion `dsbn-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod domain;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
mod math;
pub mod nn;
pub mod norm;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod schedule;
pub mod tensor;

pub use domain::DomainId;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use param::{ParamAlloc, ParamId, Parameter};
pub use tensor::Tensor;

/// Seeded generator used for every random draw in the crate.
pub type RunRng = rand_chacha::ChaCha8Rng;

/// Derives a decorrelated child seed from a base seed and a purpose tag.
///
/// All randomness in a run funnels through one base seed; independent
/// consumers (init, per-epoch shuffles, dataset domains) get their own
/// streams through distinct tags.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(base ^ splitmix(tag))
}
