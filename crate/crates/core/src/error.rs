use thiserror::Error;

/// Errors raised while building or evaluating supply functions, orders and AMM curves.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected} tokens, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("a token universe needs at least two tokens, got {0}")]
    TooFewTokens(usize),
    #[error("price coordinate {index} is not strictly positive and finite: {value}")]
    NonPositivePrice { index: usize, value: f64 },
    #[error("price coordinate {index} is negative or not finite: {value}")]
    InvalidBoundaryPrice { index: usize, value: f64 },
    #[error("value form is undefined at the origin")]
    Origin,
    #[error("supply function returned a non-finite value at token {token}")]
    NonFinite { token: usize },
    #[error("token embedding is not injective: token {0} appears twice")]
    NotInjective(usize),
    #[error("token index {index} out of range for {n} tokens")]
    TokenOutOfRange { index: usize, n: usize },
    #[error("supply function is not supported at the requested tokens: token {token} takes value {value}")]
    NotSupported { token: usize, value: f64 },
    #[error("invalid order: {0}")]
    InvalidOrder(String),
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("invalid AMM: {0}")]
    InvalidAmm(String),
    #[error("domain error: {0}")]
    Domain(String),
}

pub type ModelResult<T> = Result<T, ModelError>;
