use thiserror::Error;

use crate::autodiff::TensorError;
use crate::knowledge::KbError;
use crate::text::TextError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error("{0}")]
    Data(String),
    #[error("cannot encode an empty sequence")]
    EmptySequence,
    #[error("fact distribution over an empty fact set")]
    EmptyFactSet,
    #[error("source label {0} is not in 1..=4")]
    InvalidSource(usize),
    #[error("every probability is at or below the floor")]
    DegenerateDistribution,
    #[error("invalid temperature schedule: {0}")]
    InvalidSchedule(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidSchedule(_) => 2,
            Error::Tensor(TensorError::NonFiniteValue { .. } | TensorError::NonFiniteGradient { .. }) | Error::NonFiniteLoss => 4,
            _ => 3,
        }
    }
}
