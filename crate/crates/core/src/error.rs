use thiserror::Error;

/// Errors raised by the control stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid robot model: {0}")]
    InvalidModel(String),

    #[error("degenerate contact frame: force magnitude {magnitude:.3e} N is below {threshold} N")]
    DegenerateFrame { magnitude: f64, threshold: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("solver stalled: {0}")]
    SolverStalled(String),

    #[error("failed to parse model document: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
