//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by grid construction, distribution math, trie
/// manipulation and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A grid, world or experiment description is internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input value is outside its documented domain.
    #[error("input error: {0}")]
    Input(String),

    /// A bin or vocabulary index is out of range.
    #[error("index out of range: {0}")]
    Bounds(String),

    /// Two distributions that must share a grid do not.
    #[error("grid mismatch between distributions")]
    GridMismatch,

    /// A meta-action references a node that is missing or finished.
    #[error("invalid meta-action: {0}")]
    Action(String),

    /// An episode log or trie is in a state the operation cannot accept.
    #[error("state error: {0}")]
    State(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
