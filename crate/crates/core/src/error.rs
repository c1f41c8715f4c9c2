use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The two images are identical, so the PSNR (and the loss) is unbounded.
    #[error("infinite PSNR: images are identical")]
    InfinitePsnr,

    #[error("numeric failure at iteration {iteration} (step {step:e}): {message}")]
    Numeric {
        iteration: usize,
        step: f64,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt model: {0}")]
    CorruptModel(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
