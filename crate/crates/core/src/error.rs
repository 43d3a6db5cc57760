use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("gradient tape: {0}")]
    Tape(&'static str),

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: record {record}: {message}")]
    Parse {
        path: PathBuf,
        record: usize,
        message: String,
    },

    #[error("divergence is infinite: reference mass at support index {index} where the policy has none")]
    InfiniteDivergence { index: usize },

    #[error("missing prerequisite for stage `{stage}`: {missing} checkpoint not found at {path}")]
    MissingPrerequisite {
        stage: &'static str,
        missing: &'static str,
        path: PathBuf,
    },

    #[error("initial pose penetrates the terrain by {depth:.4} m at the base")]
    InitialPenetration { depth: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for structured reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Tape(_) => "tape",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Parse { .. } => "parse",
            Error::InfiniteDivergence { .. } => "infinite_divergence",
            Error::MissingPrerequisite { .. } => "missing_prerequisite",
            Error::InitialPenetration { .. } => "initial_penetration",
            Error::Config(_) => "config",
            Error::EmptyDataset => "empty_dataset",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            got,
        })
    }
}
