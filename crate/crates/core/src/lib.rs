//! Contact-feedback model predictive control for torque-controlled serial
//! manipulators.
//!
//! Contacts reported by an external estimator (location and force) are turned
//! into one-directional spring models, embedded in a box-constrained
//! feasibility-driven DDP problem, and re-solved every control tick.
//!
//! Module map:
//! - [`rigid_body`]: kinematics, dynamics and analytic dynamics derivatives.
//! - [`contact`]: contact frames, spring parameters and spring forces.
//! - [`costs`]: motion, control, force and state-limit costs.
//! - [`ddp`]: generic Box-FDDP solver.
//! - [`ocp`]: the robot optimal control problem solved by the controller.
//! - [`mpc`]: the receding-horizon controller and phase schedules.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contact;
pub mod costs;
pub mod ddp;
pub mod error;
pub mod mpc;
pub mod ocp;
pub mod rigid_body;
pub mod so3;

pub use error::{Error, Result};
