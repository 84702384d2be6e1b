//! Error type shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or shape mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// A nest structure violates the GEV generation-function conditions.
    #[error("nest structure error: {0}")]
    Structure(String),

    /// Invalid parameter value (counts, scales, tolerances).
    #[error("parameter error: {0}")]
    Param(String),

    /// Configuration problem detected before any numerical work.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset schema violation (missing column, bad header).
    #[error("schema error: {0}")]
    Schema(String),

    /// Unparseable or invalid data cell.
    #[error("data error: {0}")]
    Data(String),

    /// Choice set with no perceivable alternative (all BC weights zero).
    #[error("degenerate choice set: {0}")]
    DegenerateChoiceSet(String),

    /// Index outside the valid range.
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    /// Requested verification is outside the supported numerical regime.
    #[error("unsupported check: {0}")]
    UnsupportedCheck(String),

    /// Training produced a non-finite objective.
    #[error("divergence at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    /// Rejection sampling could not satisfy a filter predicate.
    #[error("filter infeasible: mode {mode}, threshold {threshold}: {message}")]
    FilterInfeasible {
        mode: String,
        threshold: f64,
        message: String,
    },

    /// Other numerical failure (singular matrix, non-finite value).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
}
