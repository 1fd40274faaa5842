//! Error type shared across the crate.

use alloc::string::String;
use alloc::vec::Vec;

use crate::domain::DomainId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Two operands whose shapes must agree do not.
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An operation that needs a matrix received something else.
    #[error("{context} expects a 2-d tensor, got shape {shape:?}")]
    NotTwoDimensional {
        context: &'static str,
        shape: Vec<usize>,
    },

    /// Batch statistics need at least two examples.
    #[error("batch of {n} example(s) is too small for batch statistics")]
    BatchTooSmall { n: usize },

    /// A class label outside `[0, classes)`.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// `backward` was called on a non-scalar value.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// A domain-specific layer has no branch for the requested domain.
    #[error("no branch for domain {domain} in this layer")]
    UnknownDomain { domain: DomainId },

    /// Attempt to register a branch for a domain that already has one.
    #[error("domain {domain} already has a branch")]
    DuplicateDomain { domain: DomainId },

    /// A network with domain-specific layers was run without a domain tag.
    #[error("network has domain-specific layers but no domain was given")]
    DomainRequired,

    /// Class-prior weight queried for a class with zero count.
    #[error("class {class} has zero count in the prior; its weight is undefined")]
    DegeneratePrior { class: usize },

    /// Invalid configuration detected before or during a run.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Training aborted after repeated non-finite losses.
    #[error("training diverged: non-finite loss since step {step}")]
    Diverged { step: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
