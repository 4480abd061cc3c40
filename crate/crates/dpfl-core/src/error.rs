//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by dataset ingestion, configuration validation, and the
/// simulation/certification pipeline.
#[derive(Debug, Error)]
pub enum DpflError {
    /// Malformed binary input; names the offending field.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    /// A configuration value violates its documented precondition.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called with arguments outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Vector/matrix dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A trigger pattern refers to feature indices outside the input range.
    #[error("pattern error: {0}")]
    Pattern(String),

    /// An argument lies outside the mathematical domain of a formula.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DpflError {
    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        DpflError::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DpflError>;
