use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Cholesky factorization of the correlation matrix failed.
    #[error("correlation matrix is not positive semi-definite (pivot {pivot} = {value:e})")]
    NotPositiveSemiDefinite { pivot: usize, value: f64 },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },

    /// Batch normalization in train mode needs at least two rows.
    #[error("batch of {rows} rows is too small for batch normalization in train mode")]
    BatchTooSmall { rows: usize },

    #[error("exercise date {date} out of range 0..={max}")]
    DateOutOfRange { date: usize, max: usize },

    /// The stopping rule exercises at time 0, so there is no position to hedge.
    #[error("policy exercises immediately (payoff {payoff} >= continuation {continuation}); nothing to hedge")]
    NothingToHedge { payoff: f64, continuation: f64 },

    #[error("stopping-rule enumeration needs 2^{bits} rules, above the limit 2^{limit}")]
    TooLarge { bits: usize, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParams {
            field,
            reason: reason.into(),
        }
    }
}
