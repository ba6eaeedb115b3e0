use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duration {0} s outside the allowed range [4, 6] s")]
    DurationOutOfRange(f64),
    #[error("video is already a mouth crop")]
    AlreadyCropped,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("zero-energy signal")]
    ZeroEnergy,
    #[error("variant constraint violated: {0}")]
    VariantConstraint(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input of {len} samples is shorter than the encoder kernel ({kernel})")]
    InputTooShort { len: usize, kernel: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("state error: {0}")]
    State(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("all vectors are identical; projection is undefined")]
    DegenerateVariance,
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("PESQ evaluator unavailable: {0}")]
    PesqUnavailable(String),
    #[error("malformed tensor container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::State(_) | Error::Checkpoint(_) | Error::VariantConstraint(_) => 3,
            Error::Io(_) | Error::Wav(_) | Error::Format(_) => 4,
            _ => 1,
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DurationOutOfRange(_) => "DurationOutOfRange",
            Error::AlreadyCropped => "AlreadyCropped",
            Error::Config(_) => "ConfigError",
            Error::ZeroEnergy => "ZeroEnergyError",
            Error::VariantConstraint(_) => "VariantConstraintError",
            Error::Shape(_) => "ShapeError",
            Error::InputTooShort { .. } => "InputTooShort",
            Error::Label { .. } => "LabelError",
            Error::State(_) => "StateError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::DegenerateVariance => "DegenerateVariance",
            Error::SingleCluster => "SingleClusterError",
            Error::PesqUnavailable(_) => "PesqUnavailable",
            Error::Format(_) => "FormatError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "ConfigError",
            Error::Wav(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
