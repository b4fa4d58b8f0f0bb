use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Incompatible spatial sizes or channel counts.
    #[error("shape error: {0}")]
    Shape(String),

    /// Something the operation needs is missing (files, masks, samples).
    #[error("missing resource: {0}")]
    Resource(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("line extraction failed: {0}")]
    Extraction(String),

    /// A loss term evaluated to NaN or infinity.
    #[error("non-finite `{term}` loss at step {step}")]
    NonFinite { term: String, step: u64 },

    #[error("config fingerprint mismatch (checkpoint {stored}, current {current}): {diff}")]
    FingerprintMismatch {
        stored: String,
        current: String,
        diff: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("duplicate sample ids: {0:?}")]
    DuplicateIds(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Engine(#[from] muralfill_autograd::Error),

    #[error("serialization error: {0}")]
    Serde(String),
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
