use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SavsError {
    #[error("label {label} is outside the mapping domain (0..{domain})")]
    LabelOutOfDomain { label: u32, domain: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("pixel pool is empty but {0} shielded pixels need a value")]
    EmptyPool(usize),

    #[error("non-finite value in {component}")]
    NonFinite { component: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("malformed archive: {0}")]
    Archive(String),

    #[error("{0}")]
    Unavailable(String),

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("image codec error on {}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl SavsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        SavsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        SavsError::Image {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SavsError>;
