use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("utterance {id} too short: {frames} frames, need {needed}")]
    TooShort { id: usize, frames: usize, needed: usize },
    #[error("infeasible batch: {0}")]
    InfeasibleBatch(String),
    #[error("anchor {0} has no negatives")]
    InfeasibleAnchor(usize),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than numerical failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::InvalidConfig(_) | Error::Parse(_) | Error::InfeasibleBatch(_))
    }
}
