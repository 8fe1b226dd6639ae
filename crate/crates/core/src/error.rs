//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The graph (or another structured input) violates a structural
    /// invariant: cycles, dangling tensor references, bad shapes.
    #[error("structural error: {0}")]
    Structural(String),

    /// A document failed schema validation before any planning ran.
    #[error("schema error: {0}")]
    Schema(String),

    /// An operation was invoked with arguments outside its contract.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Planning could not produce a result (search limits, empty spaces).
    #[error("planning error: {0}")]
    Planning(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
