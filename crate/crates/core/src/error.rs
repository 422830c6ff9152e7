//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown token {token:?} in text {text:?}")]
    UnknownToken { token: String, text: String },

    #[error("model is frozen; parameter update rejected")]
    FrozenModel,

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// Process exit code for the CLI: 2 config/validation, 3 missing
    /// dependency, 4 numeric failure, 1 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::UnknownToken { .. } => 2,
            Error::MissingDependency(_) => 3,
            Error::NonFinite(_) => 4,
            _ => 1,
        }
    }
}
