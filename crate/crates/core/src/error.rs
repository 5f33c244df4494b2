//! Crate-wide error and result types.

use std::path::PathBuf;
use thiserror::Error;

/// Everything that can go wrong across the pipeline. Variants carry enough
/// context to diagnose a failure from the message alone.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// A caller passed a value outside an operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration file or derived configuration failed validation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A caption contains a word outside the fixed vocabulary.
    #[error("unknown word {word:?} in caption {caption:?}")]
    UnknownWord { word: String, caption: String },

    /// A checkpoint / adapter file is malformed or inconsistent.
    #[error("artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    /// An artifact was produced for a different model configuration.
    #[error("config digest mismatch: artifact carries {expected}, model has {actual}")]
    DigestMismatch { expected: String, actual: String },

    /// Training produced a NaN or infinite loss; aborting beats diverging.
    #[error(
        "non-finite loss at step {step} (micro-batch {micro}, clip {video_id}, timestep {timestep})"
    )]
    NonFiniteLoss {
        step: usize,
        micro: usize,
        video_id: String,
        timestep: usize,
    },

    /// Dataset preparation or scanning failed.
    #[error("dataset: {0}")]
    Dataset(String),

    /// Filesystem failure, annotated with the path involved.
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Image decode/encode failure, annotated with the path involved.
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// JSON (de)serialization failure.
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// TOML parse failure.
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Shorthand for I/O errors tied to a path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for artifact-format errors tied to a path.
    pub fn artifact(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
