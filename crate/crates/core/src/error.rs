use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can surface.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("report error: {0}")]
    Report(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Lookup(_) => "lookup",
            Error::Data(_) => "data",
            Error::Divergence(_) => "divergence",
            Error::MissingArtifact { .. } => "missing-artifact",
            Error::Report(_) => "report",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Serde(_) => "serde",
        }
    }
}

macro_rules! serde_error {
    ($($ty:ty),*) => {
        $(impl From<$ty> for Error {
            fn from(e: $ty) -> Self {
                Error::Serde(e.to_string())
            }
        })*
    };
}

serde_error!(
    serde_json::Error,
    toml::de::Error,
    toml::ser::Error,
    csv::Error,
    ndarray_npy::ReadNpzError,
    ndarray_npy::WriteNpzError,
    safetensors::SafeTensorError,
    image::ImageError
);

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
