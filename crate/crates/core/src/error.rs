//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with inconsistent dimensions.
    #[error("{op}: dimension mismatch ({left} vs {right})")]
    DimMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Linear-normalized aggregation with |sum of raw scores| below 1e-12.
    #[error("degenerate normalization: |sum of raw scores| = {sum:e}")]
    DegenerateNormalization { sum: f64 },

    /// QAUC over a prediction set in which no query group has both classes.
    #[error("no query group contains both a positive and a negative sample")]
    NoValidGroup,

    #[error("model contains no memory layer")]
    NoMemoryLayer,

    /// Training aborted on a non-finite loss; carries a batch diagnostic.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    /// A backward pass was handed a tape that does not match its inputs.
    #[error("tape mismatch: {0}")]
    TapeMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
