use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("size mismatch: expected {expected} values, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("DN value {value} at sample offset {offset} exceeds the 10-bit range")]
    DnOutOfRange { offset: usize, value: u16 },

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("empty input: {0}")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
