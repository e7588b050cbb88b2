use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid marginal: {0}")]
    InvalidMarginal(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("electron count {n} is too small: need at least {min}")]
    TooFewElectrons { n: usize, min: usize },

    #[error("size guard exceeded: {0}")]
    Guard(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("rounding failed: {0}")]
    Rounding(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
