//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UclError {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller violated an operation contract (bad labels, empty batch, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A label template is missing a required placeholder.
    #[error("template error: {0}")]
    Template(String),

    /// Token id outside the vocabulary.
    #[error("vocabulary error: token id {id} >= vocab size {vocab_size}")]
    Vocab { id: usize, vocab_size: usize },

    /// Malformed checkpoint or report file; `offset` is the byte position at
    /// which decoding failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Training produced a non-finite value and aborted.
    #[error("numerical abort at step {step}: {msg}")]
    Numeric { step: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, UclError>;

impl UclError {
    pub fn shape(msg: impl Into<String>) -> Self {
        UclError::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        UclError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        UclError::Config(msg.into())
    }

    /// Process exit code for the CLI: numerical aborts are distinguished from
    /// ordinary contract/config failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            UclError::Numeric { .. } => 2,
            _ => 1,
        }
    }
}
