use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("schema mismatch in {path}: expected `{expected}`, found `{found}`")]
    SchemaMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("non-positive sample {0} (log-normal statistics need positive values)")]
    NonPositiveSample(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
