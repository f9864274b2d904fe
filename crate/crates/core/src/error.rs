//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the pipeline. The CLI maps these onto exit codes
/// (config errors → 2, data errors → 3, numeric divergence → 4).
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input row; carries the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    /// Input log contained no interactions.
    #[error("interaction log is empty")]
    EmptyLog,

    /// Invalid configuration value or cross-field inconsistency.
    #[error("config error: {0}")]
    Config(String),

    /// Data violates an operation precondition (e.g. degenerate sampling).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor operation applied to incompatible shapes.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Training loss became non-finite.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    /// Missing or unreadable artifact on disk.
    #[error("artifact error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
