//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CastError {
    /// Shape or dimension mismatch between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Index out of range for a gather/scatter target.
    #[error("index out of range: {0}")]
    Index(String),

    /// A primitive produced or received a non-finite value.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid structural configuration (kappa, N_c, heads, temperatures).
    #[error("invalid config: {0}")]
    Config(String),

    /// Gradient check could not find a stable base point.
    #[error("unstable cluster assignment: {0}")]
    UnstableAssignment(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed weight/tensor file.
    #[error("bad tensor file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CastError>;
