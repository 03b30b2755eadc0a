use thiserror::Error;

use crate::solver::PicardReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("Picard iteration diverged on window {window} after {} iterations", report.iterations)]
    Diverged { window: usize, report: Box<PicardReport> },

    #[error("insufficient effective sample size {ess:.1} (need at least {required})")]
    InsufficientWeight { ess: f64, required: usize },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
