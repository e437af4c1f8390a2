//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, fitting and file handling.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition (mismatched joint
    /// state tag, non-unit axis direction, inconsistent dimensions, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index was outside its valid range.
    #[error("{what} {index} out of range (< {bound} required)")]
    Range {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// The joint function produced a zero-norm raw direction for a joint.
    /// Callers may catch this and perturb the shape parameters.
    #[error("joint function produced a degenerate (zero-norm) direction for joint {joint}")]
    DegenerateDirection { joint: usize },

    /// Not enough training data for the requested factorization rank.
    #[error("insufficient data: need at least {needed} instances, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    /// Every restart of the optimizer failed.
    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file. `offset` is the byte offset of the failure
    /// when it is known.
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// File declares a format version newer than this build understands.
    #[error("unsupported format_version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },

    /// Structurally valid JSON that violates a file schema invariant.
    #[error("invalid file content: {0}")]
    Schema(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }
}
