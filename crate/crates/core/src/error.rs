use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("unknown vocabulary entry `{0}`")]
    UnknownToken(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("corrupt manifest {}: {reason}", path.display())]
    CorruptManifest { path: PathBuf, reason: String },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("crop of ratio {ratio} is smaller than one pixel on a {height}x{width} frame")]
    CropTooSmall { ratio: f64, height: usize, width: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable snake-case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InvalidScene(_) => "invalid_scene",
            Error::InvalidConfig(_) => "invalid_config",
            Error::NonFinite(_) => "non_finite",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::UnknownToken(_) => "unknown_token",
            Error::MissingFile(_) => "missing_file",
            Error::CorruptManifest { .. } => "corrupt_manifest",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::CropTooSmall { .. } => "crop_too_small",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
