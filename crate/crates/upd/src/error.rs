//! Crate-wide error type.
//!
//! Every failure class the binary maps to an exit code gets its own variant;
//! library code never panics on malformed user input.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, UpdError>;

#[derive(Debug, Error)]
pub enum UpdError {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {context}: parameter {name}")]
    NonFinite { context: &'static str, name: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed data in {path}: {detail}")]
    MalformedData { path: String, detail: String },

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl UpdError {
    /// Shorthand for contract violations raised all over the workspace.
    pub fn contract(msg: impl Into<String>) -> Self {
        UpdError::Contract(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        UpdError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for UpdError {
    fn from(e: serde_json::Error) -> Self {
        UpdError::Serialization(e.to_string())
    }
}
