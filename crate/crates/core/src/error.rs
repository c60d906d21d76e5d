use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix `{0}` is singular or badly conditioned")]
    Singular(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("condition {name} violated: {detail}")]
    ConditionViolated { name: String, detail: String },

    #[error("chain diverged at step {step} (sup norm {sup_norm:.3e} exceeds {threshold:.3e})")]
    Diverged {
        step: u64,
        sup_norm: f64,
        threshold: f64,
    },

    #[error("oracle infeasible: {0}")]
    OracleInfeasible(String),

    #[error("series too short: {0}")]
    TooShort(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
