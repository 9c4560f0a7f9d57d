use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("version mismatch in {path}: found {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("checksum mismatch in {path}")]
    ChecksumMismatch { path: PathBuf },

    #[error("non-finite loss at epoch {epoch}, run aborted")]
    NonFiniteLoss { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable process exit code per failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ShapeMismatch(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::VersionMismatch { .. } => 4,
            Error::ChecksumMismatch { .. } => 5,
            Error::Format { .. } => 6,
            Error::NonFiniteLoss { .. } | Error::NonFinite(_) => 7,
            Error::Io(_) | Error::Json(_) => 10,
        }
    }
}
