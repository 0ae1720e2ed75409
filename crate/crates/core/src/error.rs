use std::path::PathBuf;
use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("{what}: dims ({dims:?}) not divisible by scale ({scale:?})")]
    Indivisible {
        what: &'static str,
        dims: (usize, usize, usize),
        scale: (usize, usize, usize),
    },

    #[error("histogram at pixel ({row},{col}) is not normalized: sum = {sum}")]
    NotNormalized { row: usize, col: usize, sum: f64 },

    #[error("depth {depth} at pixel ({row},{col}) is outside [1, {t_bins}]")]
    DepthOutOfRange {
        row: usize,
        col: usize,
        depth: f64,
        t_bins: usize,
    },

    #[error("gradient for parameter '{0}' is not finite")]
    NonFiniteGradient(String),

    #[error("training aborted: {0}")]
    Train(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error ({path}): {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error ({path}): {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
