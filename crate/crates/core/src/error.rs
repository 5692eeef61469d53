//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("corpus directory not found: {0}")]
    MissingDirectory(PathBuf),

    #[error("no samples found in {0}")]
    EmptyCorpus(PathBuf),

    #[error("cannot decode image {path}: {reason}")]
    UndecodableImage { path: PathBuf, reason: String },

    #[error("duplicate sample (writer {writer_id}, index {sample_index})")]
    DuplicateSample { writer_id: u32, sample_index: u32 },

    #[error("invalid manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("pair generation: {0}")]
    Pairing(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("representation collapse: {0}")]
    Collapse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {reason}")]
    Stage { stage: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
