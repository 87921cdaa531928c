//! Crate-wide error type.
//!
//! Numeric preconditions are enforced eagerly: every operation that can be
//! handed a degenerate input (empty negative set, non-positive temperature,
//! zero centered Gram, ...) reports a dedicated variant instead of silently
//! producing NaNs.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An anchor whose denominator contains no negative keys: the
    /// negatives-only loss is undefined for it.
    #[error("anchor {anchor_slot} has no negative keys in its denominator")]
    PositiveOnlyBatch { anchor_slot: usize },

    /// The reweighting factor requires eps < 1 - 1/C; otherwise its
    /// denominator is non-positive and the factor is meaningless.
    #[error(
        "reweighting factor undefined: eps = {eps:.6} >= 1 - 1/C = {limit:.6} \
         (denominator non-positive)"
    )]
    DenominatorNonpositive { eps: f64, limit: f64 },

    /// CKA needs both centered Gram matrices to have positive Frobenius norm.
    #[error("CKA undefined: centered Gram matrix {which} has zero Frobenius norm")]
    CkaUndefined { which: &'static str },

    /// RSA needs both dissimilarity vectors to be non-constant.
    #[error("RSA undefined: dissimilarity vector {which} is constant")]
    RsaUndefined { which: &'static str },

    /// The linear probe ran into a non-finite loss (learning rate too large
    /// or degenerate embeddings).
    #[error("linear probe diverged at epoch {epoch}: loss = {loss}")]
    DivergedProbe { epoch: usize, loss: f64 },

    /// A class label required by a classifier is absent from the train split.
    #[error("class {label} has no training examples")]
    MissingClass { label: usize },

    /// Two inputs that must share a shape do not.
    #[error("shape mismatch: {context} (left {left:?}, right {right:?})")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Catch-all precondition failure with a human-readable explanation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Checkpoint or dataset deserialization found malformed content.
    #[error("malformed file: {0}")]
    MalformedFile(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
