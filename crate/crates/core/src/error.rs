//! Error type shared across the workspace.
//!
//! Variants split into two rough families: environment problems (bad config,
//! missing files, malformed checkpoints) and numeric problems (shape
//! mismatches, non-finite values). The CLI maps the first family to exit
//! code 2 and the second to exit code 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UdgError {
    /// Two operand shapes that the primitive cannot combine, even with
    /// broadcasting.
    #[error("{primitive}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        primitive: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Wrong rank or arity for a primitive.
    #[error("{primitive}: {message}")]
    InvalidShape { primitive: String, message: String },

    #[error("unknown primitive name `{0}`")]
    UnknownPrimitive(String),

    /// An operation produced NaN or infinity, or a loss diverged.
    #[error("{context}: non-finite value produced")]
    NonFinite { context: String },

    /// `backward` was asked for the gradient of a parameter the loss does not
    /// depend on, and the caller did not opt into zero-filling.
    #[error("parameter {index} does not influence the loss (pass allow_unused to receive zeros)")]
    UnusedParam { index: usize },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data format error: {0}")]
    DataFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl UdgError {
    /// True for errors that indicate a numeric failure inside an otherwise
    /// well-formed run, as opposed to bad input from the user.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            UdgError::ShapeMismatch { .. }
                | UdgError::InvalidShape { .. }
                | UdgError::NonFinite { .. }
                | UdgError::UnusedParam { .. }
                | UdgError::InvalidValue(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, UdgError>;
