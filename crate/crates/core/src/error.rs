use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum GlamError {
    /// Shape or precondition violation in a numeric operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration (non-divisible dims, bad ranges, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A forward/backward pass produced a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Parse failure in an on-disk format; offset is in bytes where known.
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    /// Manifest schema violation; messages carry the line number and field.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Checkpoint format or registry mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Missing prerequisite artifact (e.g. stage-1 checkpoint for stage 3).
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GlamError> = std::result::Result<T, E>;

impl GlamError {
    pub fn shape(msg: impl Into<String>) -> Self {
        GlamError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        GlamError::Config(msg.into())
    }

    pub fn parse(offset: usize, reason: impl Into<String>) -> Self {
        GlamError::Parse {
            offset,
            reason: reason.into(),
        }
    }

    pub fn manifest(msg: impl Into<String>) -> Self {
        GlamError::Manifest(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        GlamError::Checkpoint(msg.into())
    }

    pub fn prerequisite(msg: impl Into<String>) -> Self {
        GlamError::Prerequisite(msg.into())
    }
}
