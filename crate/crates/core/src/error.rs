use thiserror::Error;

/// Errors produced by the estimation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("kernel {kernel} is not differentiable at u = {u}")]
    NotDifferentiable { kernel: &'static str, u: f64 },

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("operation requires the {expected} variant, model is {actual}")]
    WrongVariant {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("singular weighted design: {0}")]
    Singular(String),

    #[error("meanshift initialization at (x = {x}, y = {y}) has zero kernel mass")]
    DivergedInit { x: f64, y: f64 },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("{dropped} of {total} bootstrap replicates dropped (limit 10%)")]
    TooManyDropped { dropped: usize, total: usize },
}

impl ModalError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ModalError::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, ModalError>;
