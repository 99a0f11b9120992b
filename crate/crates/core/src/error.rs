use crate::model_based::IterationTrace;

/// Errors produced by the solvers, simulators and the experiment runner.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stability violation: {0}")]
    StabilityViolation(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("no stabilizing solution: {0}")]
    NoSolution(String),

    #[error("rank deficient: {what} has numerical rank {rank}, {required} required")]
    RankDeficient {
        what: &'static str,
        rank: usize,
        required: usize,
    },

    /// The iteration blew up. The partial trace is kept for inspection.
    #[error("divergence: {reason}")]
    Divergence {
        reason: String,
        trace: Option<Box<IterationTrace>>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
