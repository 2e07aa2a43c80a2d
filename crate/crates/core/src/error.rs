use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HpnetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HpnetError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("taxonomy parse error at line {line}: {message}")]
    TaxonomyParse { line: usize, message: String },

    #[error("invalid label: {0}")]
    Label(#[from] crate::taxonomy::LabelError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: checkpoint has {found}, expected {expected}")]
    ConfigHash { expected: String, found: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("training aborted at epoch {epoch} ({phase}): {message}")]
    Training {
        epoch: usize,
        phase: String,
        message: String,
    },

    #[error("novelty detection error: {0}")]
    Novelty(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HpnetError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HpnetError::Io {
            path: path.into(),
            source,
        }
    }
}
