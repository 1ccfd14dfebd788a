use thiserror::Error;

/// Error type for all fallible operations in this crate.
#[derive(Debug, Error)]
pub enum LvoError {
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or array shape mismatch.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// Checkpoint missing, malformed, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A required artifact from an earlier pipeline stage is missing or stale.
    #[error("artifact error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl LvoError {
    /// Shorthand for a [`LvoError::Shape`] built from display values.
    pub fn shape(expected: impl std::fmt::Display, got: impl std::fmt::Display) -> Self {
        LvoError::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, LvoError>;
