//! Closed-loop simulation harness for the contact-feedback controller.
//!
//! - [`plant`]: ground-truth arm with penalty half-spaces and scripted pushes.
//! - [`oracle`]: contact feedback with optional estimator-like noise.
//! - [`bench`]: controller timing versus contact count.
//! - [`checks`]: randomized property batteries.
//! - [`config`]: scenario files.
//! - [`scenario`]: the closed loop and its traces.
//! - [`metrics`]: per-phase error and force statistics.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checks;
pub mod config;
pub mod metrics;
pub mod oracle;
pub mod plant;
pub mod scenario;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("simulation diverged at t = {time:.4} s ({reason}); q = {q:?}, v = {v:?}")]
    Diverged { time: f64, reason: String, q: Vec<f64>, v: Vec<f64> },

    #[error("solver stalled on {count} cycles, more than the allowed {allowed}")]
    TooManyStalls { count: usize, allowed: usize },

    #[error(transparent)]
    Control(#[from] contact_mpc::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SimError {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        use contact_mpc::Error as E;
        match self {
            SimError::Config(_) => 2,
            SimError::Diverged { .. } => 3,
            SimError::TooManyStalls { .. } => 4,
            SimError::Csv(_) | SimError::Io(_) => 5,
            SimError::Control(e) => match e {
                E::InvalidArgument(_) | E::InvalidModel(_) | E::Parse(_) => 2,
                E::DegenerateFrame { .. } | E::NumericalFailure(_) => 3,
                E::SolverStalled(_) => 4,
                E::Io(_) => 5,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
