//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("distribution table field `{field}`: {reason}")]
    Table { field: String, reason: String },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("malformed container {path:?}: {reason}")]
    Format { path: Option<PathBuf>, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("value {value} outside binning range [{lo}, {hi}] on axis `{axis}`")]
    OutOfRange { axis: &'static str, value: f64, lo: f64, hi: f64 },

    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path:?}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("config parse error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: Option<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path, reason: reason.into() }
    }
}
