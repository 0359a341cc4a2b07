//! The contact-aware robot optimal control problem.
//!
//! The state is `x = (q, v)` and the control is the joint torque. Every active
//! contact is a spring whose force follows the configuration, both in the
//! dynamics and in the contact costs.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::contact::{point_loads, ContactParams};
use crate::costs::{running_cost, terminal_cost, ContactForce, CostConfig, CostEval};
use crate::ddp::{ShootingProblem, StageDerivatives};
use crate::rigid_body::{
    forward_dynamics, forward_dynamics_derivatives, DerivativeMode, FrameCache, JointState, RobotModel,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// `v⁺ = v + Δt·a`, then `q⁺ = q + Δt·v⁺`.
    #[default]
    SemiImplicitEuler,
    /// `q⁺ = q + Δt·v`, `v⁺ = v + Δt·a`.
    ExplicitEuler,
}

/// Stacks `(q, v)`.
pub fn pack_state(state: &JointState) -> DVector<f64> {
    DVector::from_iterator(2 * state.dof(), state.q.iter().chain(state.v.iter()).copied())
}

pub fn unpack_state(x: &DVector<f64>) -> JointState {
    let n = x.len() / 2;
    JointState::new(x.rows(0, n).into_owned(), x.rows(n, n).into_owned())
}

#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub model: Arc<RobotModel>,
    pub horizon: usize,
    /// Δt (s).
    pub dt: f64,
    pub initial_state: JointState,
    pub costs: CostConfig,
    pub contacts: Vec<ContactParams>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub integrator: Integrator,
    pub derivative_mode: DerivativeMode,
}

impl OcpProblem {
    /// Problem with the model's torque limits as control bounds.
    pub fn new(
        model: Arc<RobotModel>,
        horizon: usize,
        dt: f64,
        initial_state: JointState,
        costs: CostConfig,
        contacts: Vec<ContactParams>,
    ) -> Result<Self> {
        let limits = model.limits();
        let problem = Self {
            u_min: limits.u_min.clone(),
            u_max: limits.u_max.clone(),
            model,
            horizon,
            dt,
            initial_state,
            costs,
            contacts,
            integrator: Integrator::default(),
            derivative_mode: DerivativeMode::default(),
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.model.dof();
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {}", self.dt)));
        }
        self.initial_state.check(&self.model)?;
        self.costs.validate(&self.model)?;
        if self.u_min.len() != n
            || self.u_max.len() != n
            || self.u_min.iter().zip(self.u_max.iter()).any(|(l, u)| !(l < u))
        {
            return Err(Error::InvalidArgument("control bounds must satisfy u_min < u_max".into()));
        }
        for c in &self.contacts {
            c.attachment.check(&self.model)?;
        }
        Ok(())
    }

    fn contact_forces(&self, frames: &FrameCache) -> Vec<ContactForce> {
        self.contacts.iter().map(|c| ContactForce::from_params(c, frames)).collect()
    }

    fn integrate(&self, state: &JointState, a: &DVector<f64>) -> JointState {
        match self.integrator {
            Integrator::SemiImplicitEuler => {
                let v = &state.v + self.dt * a;
                JointState::new(&state.q + self.dt * &v, v)
            }
            Integrator::ExplicitEuler => JointState::new(&state.q + self.dt * &state.v, &state.v + self.dt * a),
        }
    }
}

/// One discretized step of the contact dynamics.
pub fn rollout_step(problem: &OcpProblem, state: &JointState, u: &DVector<f64>) -> Result<JointState> {
    let frames = FrameCache::new(&problem.model, &state.q)?;
    let loads = point_loads(&problem.contacts, &frames);
    let a = forward_dynamics(&problem.model, state, u, &loads)?;
    let next = problem.integrate(state, &a);
    if !next.is_finite() {
        return Err(Error::NumericalFailure("non-finite state after integration".into()));
    }
    Ok(next)
}

impl ShootingProblem for OcpProblem {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn state_dim(&self) -> usize {
        2 * self.model.dof()
    }

    fn control_dim(&self) -> usize {
        self.model.dof()
    }

    fn initial_state(&self) -> DVector<f64> {
        pack_state(&self.initial_state)
    }

    fn control_lower(&self) -> &DVector<f64> {
        &self.u_min
    }

    fn control_upper(&self) -> &DVector<f64> {
        &self.u_max
    }

    fn step(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let state = unpack_state(x);
        let frames = FrameCache::new(&self.model, &state.q)?;
        let loads = point_loads(&self.contacts, &frames);
        let a = forward_dynamics(&self.model, &state, u, &loads)?;
        let next = self.integrate(&state, &a);
        if !next.is_finite() {
            return Err(Error::NumericalFailure("non-finite state after integration".into()));
        }
        let forces = self.contact_forces(&frames);
        let cost = running_cost(&self.costs, &self.model, &frames, &state, u, &forces).value * self.dt;
        Ok((pack_state(&next), cost))
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.terminal_derivatives(x)?.value)
    }

    fn step_derivatives(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<StageDerivatives> {
        let n = self.model.dof();
        let state = unpack_state(x);
        let frames = FrameCache::new(&self.model, &state.q)?;
        let loads = point_loads(&self.contacts, &frames);
        let d = forward_dynamics_derivatives(&self.model, &state, u, &loads, self.derivative_mode)?;
        let dt = self.dt;
        let eye = DMatrix::<f64>::identity(n, n);
        let mut fx = DMatrix::zeros(2 * n, 2 * n);
        let mut fu = DMatrix::zeros(2 * n, n);
        match self.integrator {
            Integrator::SemiImplicitEuler => {
                let dv_dq = dt * &d.da_dq;
                let dv_dv = &eye + dt * &d.da_dv;
                let dv_du = dt * &d.da_du;
                fx.view_mut((0, 0), (n, n)).copy_from(&(&eye + dt * &dv_dq));
                fx.view_mut((0, n), (n, n)).copy_from(&(dt * &dv_dv));
                fx.view_mut((n, 0), (n, n)).copy_from(&dv_dq);
                fx.view_mut((n, n), (n, n)).copy_from(&dv_dv);
                fu.view_mut((0, 0), (n, n)).copy_from(&(dt * &dv_du));
                fu.view_mut((n, 0), (n, n)).copy_from(&dv_du);
            }
            Integrator::ExplicitEuler => {
                fx.view_mut((0, 0), (n, n)).copy_from(&eye);
                fx.view_mut((0, n), (n, n)).copy_from(&(dt * &eye));
                fx.view_mut((n, 0), (n, n)).copy_from(&(dt * &d.da_dq));
                fx.view_mut((n, n), (n, n)).copy_from(&(&eye + dt * &d.da_dv));
                fu.view_mut((n, 0), (n, n)).copy_from(&(dt * &d.da_du));
            }
        }
        let forces = self.contact_forces(&frames);
        let mut cost = running_cost(&self.costs, &self.model, &frames, &state, u, &forces);
        cost.scale(dt);
        Ok(StageDerivatives { fx, fu, cost })
    }

    fn terminal_derivatives(&self, x: &DVector<f64>) -> Result<CostEval> {
        let state = unpack_state(x);
        let frames = FrameCache::new(&self.model, &state.q)?;
        let forces = self.contact_forces(&frames);
        let mut eval = terminal_cost(&self.costs, &self.model, &frames, &state, &forces);
        eval.lu = DVector::zeros(0);
        eval.luu = DMatrix::zeros(0, 0);
        eval.lux = DMatrix::zeros(0, 2 * self.model.dof());
        Ok(eval)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::{compute_theta, ContactFeedback};
    use crate::ddp::{BoxFddp, SolverSettings};
    use crate::rigid_body::{gravity_torques, BodyPoint};
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Vector3};
    use std::f64::consts::FRAC_PI_2;

    fn pendulum_problem(q: f64, contacts: Vec<ContactParams>) -> OcpProblem {
        let model = Arc::new(RobotModel::pendulum(2.0, 0.5, 1e-4).unwrap());
        let costs = CostConfig::regulation(&model, Vector3::zeros(), Rotation3::identity());
        OcpProblem::new(model, 4, 0.01, JointState::at_rest(DVector::from_element(1, q)), costs, contacts).unwrap()
    }

    #[test]
    fn gravity_compensation_is_an_equilibrium() {
        let model = Arc::new(RobotModel::desk7());
        let q = DVector::from_vec(vec![0.2, 0.7, -0.3, -1.2, 0.4, 0.9, 0.1]);
        let state = JointState::at_rest(q.clone());
        let costs = CostConfig::regulation(&model, Vector3::zeros(), Rotation3::identity());
        let p = OcpProblem::new(model.clone(), 5, 0.025, state.clone(), costs, vec![]).unwrap();
        let next = rollout_step(&p, &state, &gravity_torques(&model, &q).unwrap()).unwrap();
        assert_relative_eq!(next.q, state.q, epsilon = 1e-12);
        assert_relative_eq!(next.v, state.v, epsilon = 1e-12);
    }

    #[test]
    fn pendulum_free_fall_step() {
        // Mass 2 kg at 0.5 m, link inertia 1e-4 about the pivot axis through
        // the mass: M = 2·0.25 + 1e-4. Gravity torque at angle θ from upright
        // is m g l sin θ, accelerating away from upright.
        let theta = 0.3;
        let p = pendulum_problem(theta, vec![]);
        let g = 9.81;
        let a = 2.0 * g * 0.5 * f64::sin(theta) / (2.0 * 0.25 + 1e-4);
        let next = rollout_step(&p, &p.initial_state, &DVector::zeros(1)).unwrap();
        assert_relative_eq!(next.v[0], 0.01 * a, max_relative = 1e-12);
        assert_relative_eq!(next.q[0], theta + 0.01 * 0.01 * a, max_relative = 1e-12);

        let mut explicit = p.clone();
        explicit.integrator = Integrator::ExplicitEuler;
        let next = rollout_step(&explicit, &p.initial_state, &DVector::zeros(1)).unwrap();
        assert_eq!(next.q[0], theta);
    }

    #[test]
    fn spring_holding_horizontal_pendulum_is_static() {
        // Horizontal link: the tip is at (l, 0, 0). A vertical support force
        // m·g at the tip balances gravity.
        let model = RobotModel::pendulum(2.0, 0.5, 1e-4).unwrap();
        let q = DVector::from_element(1, FRAC_PI_2);
        let tip = FrameCache::new(&model, &q).unwrap().point(&BodyPoint::new(1, Vector3::new(0.0, 0.0, 0.5)));
        assert_relative_eq!(tip, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-12);
        let fb = ContactFeedback { position: tip, force: Vector3::new(0.0, 0.0, 2.0 * 9.81), link: 1, timestamp: 0.0 };
        let contact = compute_theta(&fb, &model, &q, 3500.0).unwrap();
        let p = pendulum_problem(FRAC_PI_2, vec![contact]);
        let next = rollout_step(&p, &p.initial_state, &DVector::zeros(1)).unwrap();
        assert!((next.q[0] - FRAC_PI_2).abs() < 1e-12 && next.v[0].abs() < 1e-12);
    }

    fn desk7_problem(contacts: bool) -> OcpProblem {
        let model = Arc::new(RobotModel::desk7());
        let q = DVector::from_vec(vec![0.1, 0.6, -0.2, -1.4, 0.3, 0.8, 0.0]);
        let frames = FrameCache::new(&model, &q).unwrap();
        let (p_ee, r_ee) = frames.end_effector(&model);
        let mut costs = CostConfig::regulation(&model, p_ee + Vector3::new(0.05, -0.03, 0.02), r_ee);
        costs.position_weight = 1e3;
        costs.orientation_weight = 50.0;
        costs.velocity_weight = 1.0;
        costs.control_weight = 1e-3;
        costs.barrier_weight = 10.0;
        costs.force_limit = vec![15.0; 7];
        costs.barrier_links = (1..=7).collect();
        costs.control_reference = gravity_torques(&model, &q).unwrap();
        costs.state_limit_weight = 1e4;
        let mut list = Vec::new();
        if contacts {
            for (link, force) in [(4, Vector3::new(3.0, -6.0, 2.0)), (7, Vector3::new(-10.0, 2.0, 5.0))] {
                let point = BodyPoint::new(link, Vector3::new(0.06, 0.0, 0.05));
                let fb = ContactFeedback { position: frames.point(&point), force, link, timestamp: 0.0 };
                list.push(compute_theta(&fb, &model, &q, 3500.0).unwrap());
            }
        }
        let v = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0, 0.1, -0.1, 0.2]);
        OcpProblem::new(model, 5, 0.025, JointState::new(q, v), costs, list).unwrap()
    }

    #[test]
    fn step_derivatives_match_finite_differences() {
        for integrator in [Integrator::SemiImplicitEuler, Integrator::ExplicitEuler] {
            let mut p = desk7_problem(true);
            p.integrator = integrator;
            let x = pack_state(&p.initial_state);
            let u = p.costs.control_reference.add_scalar(0.5);
            let d = p.step_derivatives(0, &x, &u).unwrap();
            let h = 1e-6;
            let mut fx = DMatrix::zeros(14, 14);
            let mut lx = DVector::zeros(14);
            for j in 0..14 {
                let mut xp = x.clone();
                xp[j] += h;
                let mut xm = x.clone();
                xm[j] -= h;
                let (np, cp) = p.step(0, &xp, &u).unwrap();
                let (nm, cm) = p.step(0, &xm, &u).unwrap();
                fx.set_column(j, &((np - nm) / (2.0 * h)));
                lx[j] = (cp - cm) / (2.0 * h);
            }
            let mut fu = DMatrix::zeros(14, 7);
            for j in 0..7 {
                let mut up = u.clone();
                up[j] += h;
                let mut um = u.clone();
                um[j] -= h;
                fu.set_column(j, &((p.step(0, &x, &up).unwrap().0 - p.step(0, &x, &um).unwrap().0) / (2.0 * h)));
            }
            assert!((&d.fx - &fx).norm() / fx.norm() < 1e-6, "{integrator:?} fx");
            assert!((&d.fu - &fu).norm() / fu.norm() < 1e-6, "{integrator:?} fu");
            assert!((&d.cost.lx - &lx).norm() / lx.norm().max(1.0) < 1e-5, "{integrator:?} lx");
        }
    }

    #[test]
    fn reaching_problem_converges() {
        for contacts in [false, true] {
            let p = desk7_problem(contacts);
            let solver = BoxFddp::new(SolverSettings::default()).unwrap();
            let (traj, stats) = solver.solve(&p, None).unwrap();
            assert!(stats.converged, "contacts {contacts}: {stats:?}");
            assert!(stats.gap_norm < 1e-8);
            for w in stats.feasible_costs.windows(2) {
                assert!(w[1] <= w[0]);
            }
            for u in &traj.us {
                for i in 0..7 {
                    assert!(u[i] >= p.u_min[i] && u[i] <= p.u_max[i]);
                }
            }
            // Defects of the returned trajectory.
            for t in 0..p.horizon {
                let (next, _) = p.step(t, &traj.xs[t], &traj.us[t]).unwrap();
                assert!((next - &traj.xs[t + 1]).amax() < 1e-8);
            }
        }
    }
}
