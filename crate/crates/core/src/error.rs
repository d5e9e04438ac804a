use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("pose out of city extent: {0}")]
    OutOfExtent(String),

    #[error("training diverged at step {step} (mse = {mse})")]
    Divergence { step: usize, mse: f64 },

    #[error("missing forward intermediates: {0}")]
    MissingTrace(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("network error (retryable): {0}")]
    Network(String),

    #[error("server rejected request with status {status:#04x}")]
    Rejected { status: u8 },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(offset: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            reason: reason.into(),
        }
    }

    /// Network failures may be retried on a fresh connection; everything else is final.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Network(_))
    }
}
