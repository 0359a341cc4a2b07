//! Receding-horizon control loop and phase schedules.

mod controller;
mod schedule;

pub use controller::{
    anchored_warm_start, reconcile_contacts, reset_warm_start, ActiveContact, Controller, ControllerState,
    FeedbackSnapshot, MpcSettings, Reconciliation, StepOutput,
};
pub use schedule::{Motion, Phase, PhaseSchedule};
