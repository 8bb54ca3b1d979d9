use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("gamma({t}) = 0: denoiser and score multiplier are undefined")]
    DegenerateGamma { t: f64 },

    #[error("non-finite input")]
    NonFinite,

    #[error("non-finite state in sample {sample} at integration step {step}")]
    Diverged { sample: usize, step: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is singular or not positive definite")]
    Singular,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("transport diverged at outer iteration {outer}: {source}")]
    TrainingAborted {
        outer: usize,
        last_checkpoint: Option<String>,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
