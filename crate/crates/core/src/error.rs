use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("non-finite values after {stage}")]
    Numerical { stage: String },

    #[error("no complete image pairs found under {}", .0.display())]
    EmptyDataset(PathBuf),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}: {detail}", path.display())]
    Decode { path: PathBuf, detail: String },

    #[error(transparent)]
    RemoteMask(#[from] RemoteMaskError),

    #[error("incompatible checkpoint: {}", .0.join("; "))]
    Checkpoint(Vec<String>),

    #[error("denoiser failed at step t={step}: {source}")]
    ChainStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at step {step}: loss is {value}")]
    Divergence { step: u64, value: f64 },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(vec![msg.into()])
    }
}

/// Failures of the remote segmentation client.
#[derive(Debug, Error)]
pub enum RemoteMaskError {
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },

    #[error("HTTP status {status} after {attempts} attempts")]
    Status { status: u16, attempts: u32 },

    #[error("transport failure after {attempts} attempts: {detail}")]
    Transport { attempts: u32, detail: String },

    #[error("mask size mismatch: {0}")]
    Dimension(String),

    #[error("cannot decode mask response: {0}")]
    Decode(String),
}
