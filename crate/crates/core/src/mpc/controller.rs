//! Receding-horizon controller.

use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::schedule::PhaseSchedule;
use crate::contact::{compute_theta, ContactFeedback, ContactParams, MIN_CONTACT_FORCE};
use crate::ddp::{BoxFddp, SolverSettings, SolverStats, Trajectory};
use crate::ocp::{pack_state, Integrator, OcpProblem};
use crate::rigid_body::{gravity_torques, DerivativeMode, FrameCache, JointState, RobotModel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSettings {
    /// Number of stages T.
    pub horizon: usize,
    /// Stage duration Δt (s).
    pub stage_dt_s: f64,
    /// Stiffness assumed for every contact (N/m).
    pub k_env_n_per_m: f64,
    /// Period at which the controller is stepped (s).
    pub control_period_s: f64,
    /// Snapshots older than this many control periods are not used.
    pub staleness_periods: f64,
    /// A contact not reported for this long is dropped (s).
    pub silence_timeout_s: f64,
    /// A contact predicted to be separated for this long is dropped (s).
    pub separation_timeout_s: f64,
    /// A report further than this from the tracked contact point is a new
    /// contact (m).
    pub location_jump_m: f64,
    /// Recompute spring parameters from every fresh report.
    pub refresh_theta: bool,
    /// Ignore contact reports entirely.
    pub use_contact_feedback: bool,
    /// Shift the previous solution by one stage to warm start; otherwise it is
    /// reused as is.
    pub shift_warm_start: bool,
    pub integrator: Integrator,
    pub derivative_mode: DerivativeMode,
    pub solver: SolverSettings,
}

impl Default for MpcSettings {
    fn default() -> Self {
        Self {
            horizon: 5,
            stage_dt_s: 0.025,
            k_env_n_per_m: 3500.0,
            control_period_s: 0.001,
            staleness_periods: 4.0,
            silence_timeout_s: 0.05,
            separation_timeout_s: 0.05,
            location_jump_m: 0.05,
            refresh_theta: true,
            use_contact_feedback: true,
            shift_warm_start: true,
            integrator: Integrator::default(),
            derivative_mode: DerivativeMode::default(),
            solver: SolverSettings::mpc(),
        }
    }
}

impl MpcSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.stage_dt_s,
            self.k_env_n_per_m,
            self.control_period_s,
            self.staleness_periods,
            self.silence_timeout_s,
            self.separation_timeout_s,
            self.location_jump_m,
        ];
        if self.horizon == 0 || positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("invalid controller settings: {self:?}")));
        }
        self.solver.validate()
    }
}

/// Latest measurements handed to the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSnapshot {
    pub timestamp: f64,
    pub state: JointState,
    pub contacts: Vec<ContactFeedback>,
}

/// A contact tracked by the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveContact {
    pub params: ContactParams,
    /// Most recent report used for this contact.
    pub feedback: ContactFeedback,
    /// Time the predicted deformation first became negative.
    pub separated_since: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControllerState {
    pub warm_start: Option<Trajectory>,
    pub contacts: Vec<ActiveContact>,
    pub phase: usize,
    pub cycle: u64,
    pub last_command: Option<DVector<f64>>,
    pub last_snapshot_time: Option<f64>,
}

/// Outcome of contact bookkeeping for one snapshot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Reconciliation {
    /// The set of tracked contacts changed.
    pub rebuild: bool,
    pub added: Vec<usize>,
    pub removed: Vec<usize>,
    /// Reports that could not become contacts.
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub command: DVector<f64>,
    /// `None` when no solve was attempted.
    pub stats: Option<SolverStats>,
    pub reconciliation: Reconciliation,
    pub phase: usize,
    /// The solver failed and the previous command was repeated.
    pub stalled: bool,
    /// The snapshot was stale and the previous command was repeated.
    pub stale: bool,
    /// Predicted spring force of each tracked contact at the measured state.
    pub predicted_forces: Vec<(usize, Vector3<f64>)>,
}

/// Updates the tracked contacts from a snapshot.
pub fn reconcile_contacts(
    contacts: &mut Vec<ActiveContact>,
    settings: &MpcSettings,
    model: &RobotModel,
    snapshot: &FeedbackSnapshot,
) -> Result<Reconciliation> {
    let mut out = Reconciliation::default();
    let now = snapshot.timestamp;
    let frames = FrameCache::new(model, &snapshot.state.q)?;
    let mut seen_links = Vec::new();

    for fb in &snapshot.contacts {
        if fb.link == 0 || fb.link > model.dof() {
            log::warn!("contact report on invalid link {}", fb.link);
            out.rejected += 1;
            continue;
        }
        if seen_links.contains(&fb.link) {
            log::warn!("second contact report on link {} ignored", fb.link);
            out.rejected += 1;
            continue;
        }
        seen_links.push(fb.link);
        if !(fb.force.norm() > MIN_CONTACT_FORCE) {
            out.rejected += 1;
            continue;
        }
        match contacts.iter().position(|c| c.params.link() == fb.link) {
            Some(i) => {
                let tracked = &mut contacts[i];
                if fb.timestamp <= tracked.feedback.timestamp {
                    continue;
                }
                let anchor = frames.point(&tracked.params.attachment);
                if (fb.position - anchor).norm() > settings.location_jump_m {
                    match compute_theta(fb, model, &snapshot.state.q, settings.k_env_n_per_m) {
                        Ok(params) => {
                            *tracked = ActiveContact { params, feedback: fb.clone(), separated_since: None };
                            out.rebuild = true;
                            out.removed.push(fb.link);
                            out.added.push(fb.link);
                        }
                        Err(e) => {
                            log::warn!("contact on link {} skipped: {e}", fb.link);
                            out.rejected += 1;
                        }
                    }
                } else {
                    if settings.refresh_theta {
                        tracked.params = ContactParams::from_attachment(
                            &fb.force,
                            &anchor,
                            tracked.params.attachment,
                            settings.k_env_n_per_m,
                        )?;
                    }
                    tracked.feedback = fb.clone();
                }
            }
            None => match compute_theta(fb, model, &snapshot.state.q, settings.k_env_n_per_m) {
                Ok(params) => {
                    contacts.push(ActiveContact { params, feedback: fb.clone(), separated_since: None });
                    out.rebuild = true;
                    out.added.push(fb.link);
                }
                Err(e) => {
                    log::warn!("contact on link {} skipped: {e}", fb.link);
                    out.rejected += 1;
                }
            },
        }
    }

    contacts.retain_mut(|c| {
        if c.params.deformation_at(&frames) < 0.0 {
            c.separated_since.get_or_insert(now);
        } else {
            c.separated_since = None;
        }
        let silent = now - c.feedback.timestamp > settings.silence_timeout_s;
        let separated = c.separated_since.is_some_and(|s| now - s >= settings.separation_timeout_s);
        if silent || separated {
            out.rebuild = true;
            out.removed.push(c.params.link());
            false
        } else {
            true
        }
    });
    contacts.sort_by_key(|c| c.params.link());
    Ok(out)
}

/// Warm start after a change of the contact set: every state equals the
/// measured one and every control is gravity compensation.
pub fn reset_warm_start(model: &RobotModel, state: &JointState, horizon: usize) -> Result<Trajectory> {
    let u = gravity_torques(model, &state.q)?;
    let limits = model.limits();
    let u = u.zip_zip_map(&limits.u_min, &limits.u_max, |v, l, h| v.max(l).min(h));
    Ok(Trajectory::constant(&pack_state(state), &u, horizon))
}

/// [`reset_warm_start`] controls with the states rolled out through the
/// problem's contact model, so the solver starts without gaps. Falls back to
/// constant states if the rollout diverges.
pub fn anchored_warm_start(problem: &OcpProblem) -> Result<Trajectory> {
    let reset = reset_warm_start(&problem.model, &problem.initial_state, problem.horizon)?;
    match Trajectory::rollout(problem, reset.us.clone()) {
        Ok(traj) => Ok(traj),
        Err(Error::NumericalFailure(_)) => Ok(reset),
        Err(e) => Err(e),
    }
}

pub struct Controller {
    model: Arc<RobotModel>,
    settings: MpcSettings,
    schedule: PhaseSchedule,
    solver: BoxFddp,
    state: ControllerState,
}

impl Controller {
    pub fn new(model: Arc<RobotModel>, settings: MpcSettings, schedule: PhaseSchedule) -> Result<Self> {
        settings.validate()?;
        for phase in schedule.phases() {
            phase.costs.validate(&model)?;
        }
        let solver = BoxFddp::new(settings.solver.clone())?;
        Ok(Self { model, settings, schedule, solver, state: ControllerState::default() })
    }

    pub fn model(&self) -> &Arc<RobotModel> {
        &self.model
    }

    pub fn settings(&self) -> &MpcSettings {
        &self.settings
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn schedule(&self) -> &PhaseSchedule {
        &self.schedule
    }

    fn hold_command(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.state.last_command {
            Some(u) => Ok(u.clone()),
            None => Ok(reset_warm_start(&self.model, &JointState::at_rest(q.clone()), 1)?.us.remove(0)),
        }
    }

    /// The problem the controller would solve for `snapshot`.
    pub fn build_problem(&self, snapshot: &FeedbackSnapshot) -> Result<OcpProblem> {
        let (_, mut costs) = self.schedule.config_at(snapshot.timestamp);
        costs.control_reference = gravity_torques(&self.model, &snapshot.state.q)?;
        let contacts = self.state.contacts.iter().map(|c| c.params.clone()).collect();
        let mut problem = OcpProblem::new(
            self.model.clone(),
            self.settings.horizon,
            self.settings.stage_dt_s,
            snapshot.state.clone(),
            costs,
            contacts,
        )?;
        problem.integrator = self.settings.integrator;
        problem.derivative_mode = self.settings.derivative_mode;
        Ok(problem)
    }

    /// One control cycle at time `now`.
    pub fn step(&mut self, now: f64, snapshot: &FeedbackSnapshot) -> Result<StepOutput> {
        snapshot.state.check(&self.model)?;
        if let Some(last) = self.state.last_snapshot_time {
            if snapshot.timestamp < last {
                return Err(Error::InvalidArgument(format!(
                    "snapshot time {} precedes previous snapshot {last}",
                    snapshot.timestamp
                )));
            }
        }
        self.state.cycle += 1;
        let phase = self.schedule.index_at(snapshot.timestamp);

        if now - snapshot.timestamp > self.settings.staleness_periods * self.settings.control_period_s {
            let command = self.hold_command(&snapshot.state.q)?;
            return Ok(StepOutput {
                command,
                stats: None,
                reconciliation: Reconciliation::default(),
                phase,
                stalled: false,
                stale: true,
                predicted_forces: Vec::new(),
            });
        }
        self.state.last_snapshot_time = Some(snapshot.timestamp);
        self.state.phase = phase;

        let reconciliation = if self.settings.use_contact_feedback {
            reconcile_contacts(&mut self.state.contacts, &self.settings, &self.model, snapshot)?
        } else {
            Reconciliation::default()
        };
        let problem = self.build_problem(snapshot)?;
        let warm = match (&self.state.warm_start, reconciliation.rebuild) {
            (Some(w), false) => w.clone(),
            _ => anchored_warm_start(&problem)?,
        };

        let frames = FrameCache::new(&self.model, &snapshot.state.q)?;
        let predicted_forces =
            self.state.contacts.iter().map(|c| (c.params.link(), c.params.force_at(&frames))).collect();

        match self.solver.solve(&problem, Some(&warm)) {
            Ok((traj, stats)) => {
                let command = traj.us[0].clone();
                self.state.warm_start = Some(if self.settings.shift_warm_start { traj.shifted() } else { traj });
                self.state.last_command = Some(command.clone());
                Ok(StepOutput {
                    command,
                    stats: Some(stats),
                    reconciliation,
                    phase,
                    stalled: false,
                    stale: false,
                    predicted_forces,
                })
            }
            Err(Error::SolverStalled(msg)) | Err(Error::NumericalFailure(msg)) => {
                log::warn!("solve failed at t = {}: {msg}", snapshot.timestamp);
                self.state.warm_start = None;
                let command = self.hold_command(&snapshot.state.q)?;
                Ok(StepOutput {
                    command,
                    stats: None,
                    reconciliation,
                    phase,
                    stalled: true,
                    stale: false,
                    predicted_forces,
                })
            }
            Err(e) => Err(e),
        }
    }
}
