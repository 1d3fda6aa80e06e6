use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("index {index} out of range 0..{len}")]
    OutOfRange { index: usize, len: usize },
    #[error("checksum mismatch in {path}")]
    Checksum { path: PathBuf },
    #[error("format version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Shape(_) => "shape",
            Error::Data(_)
            | Error::OutOfRange { .. }
            | Error::Checksum { .. }
            | Error::Version { .. }
            | Error::Io { .. } => "data",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
