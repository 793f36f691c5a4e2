use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants split into two families: validation problems (bad input,
/// configuration or files) and numerical failures (divergence, non-finite
/// losses). [`Error::is_numerical`] tells them apart, which the CLI maps onto
/// its exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: non-finite value")]
    NonFiniteValue { path: PathBuf, line: usize },

    #[error("{path}:{line}: dimension mismatch: expected {expected} values, found {found}")]
    DimensionMismatch {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: unknown label {label} (dataset has {num_classes} classes)")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("cannot split class {class}: {available} samples for {parts} non-empty parts")]
    ClassTooSmall {
        class: usize,
        available: usize,
        parts: usize,
    },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("non-finite loss at attack step {step}")]
    NonFiniteLoss { step: usize },

    #[error("counter class {class} has no gallery samples")]
    EmptyGallery { class: usize },

    #[error("no eligible samples for distance analysis")]
    NoEligibleSamples,

    #[error("misaligned inputs: {0}")]
    Alignment(String),

    #[error("sample {sample_id} is not eligible: {reason}")]
    Ineligible { sample_id: usize, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::NonFiniteLoss { .. })
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
