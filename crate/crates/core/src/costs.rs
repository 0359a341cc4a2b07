//! Stage costs with gradients and Gauss–Newton Hessians.
//!
//! The state is `x = (q, v)`. Contact forces enter through their value and
//! their configuration Jacobian `∂λ/∂q`; they do not depend on `v` or `u`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Rotation3, Vector3};

use crate::contact::ContactParams;
use crate::rigid_body::{FrameCache, JointState, RobotModel};
use crate::so3;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CostConfig {
    /// c_v, on ‖v‖².
    pub velocity_weight: f64,
    /// c_p, on end-effector position error (m²).
    pub position_weight: f64,
    /// c_r, on the squared rotation-vector error (rad²).
    pub orientation_weight: f64,
    /// c_u, on ‖u − u₀‖².
    pub control_weight: f64,
    /// Gain of the force regulation term.
    pub regulation_weight: f64,
    /// Gain of the force barrier.
    pub barrier_weight: f64,
    pub target_position: Vector3<f64>,
    pub target_rotation: Rotation3<f64>,
    /// Desired contact force on regulated links, world frame (N).
    pub target_force: Vector3<f64>,
    /// Diagonal of the force direction selector; entries are 0 or 1.
    pub force_selector: Vector3<f64>,
    /// Force limit per link (N), indexed by link − 1.
    pub force_limit: Vec<f64>,
    /// Activation ratio of the barrier, strictly inside (0, 1).
    pub barrier_scale: f64,
    /// Replace the barrier by a hinge-squared term that is C¹ at activation.
    pub smooth_barrier: bool,
    /// 1-based links whose contact forces are limited.
    pub barrier_links: Vec<usize>,
    /// 1-based links whose contact forces are regulated.
    pub regulation_links: Vec<usize>,
    /// u₀ (N·m).
    pub control_reference: DVector<f64>,
    pub state_limit_weight: f64,
    /// The limit penalty starts this far inside each bound.
    pub state_limit_margin: f64,
}

impl CostConfig {
    /// Pure posture regulation with every other term disabled.
    pub fn regulation(model: &RobotModel, target_position: Vector3<f64>, target_rotation: Rotation3<f64>) -> Self {
        let n = model.dof();
        Self {
            velocity_weight: 0.0,
            position_weight: 0.0,
            orientation_weight: 0.0,
            control_weight: 0.0,
            regulation_weight: 0.0,
            barrier_weight: 0.0,
            target_position,
            target_rotation,
            target_force: Vector3::zeros(),
            force_selector: Vector3::zeros(),
            force_limit: vec![f64::INFINITY; n],
            barrier_scale: 0.9,
            smooth_barrier: false,
            barrier_links: Vec::new(),
            regulation_links: Vec::new(),
            control_reference: DVector::zeros(n),
            state_limit_weight: 0.0,
            state_limit_margin: 0.0,
        }
    }

    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        let n = model.dof();
        let gains = [
            self.velocity_weight,
            self.position_weight,
            self.orientation_weight,
            self.control_weight,
            self.regulation_weight,
            self.barrier_weight,
            self.state_limit_weight,
        ];
        if gains.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::InvalidArgument("cost gains must be finite and non-negative".into()));
        }
        if !(self.barrier_scale > 0.0 && self.barrier_scale < 1.0) {
            return Err(Error::InvalidArgument(format!("barrier scale {} outside (0, 1)", self.barrier_scale)));
        }
        if self.force_selector.iter().any(|s| *s != 0.0 && *s != 1.0) {
            return Err(Error::InvalidArgument("force selector entries must be 0 or 1".into()));
        }
        if self.force_limit.len() != n || self.force_limit.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidArgument(format!("need {n} positive force limits")));
        }
        if self.control_reference.len() != n {
            return Err(Error::InvalidArgument(format!("control reference must have {n} entries")));
        }
        if !(self.state_limit_margin >= 0.0) {
            return Err(Error::InvalidArgument("state limit margin must be non-negative".into()));
        }
        for &link in self.barrier_links.iter().chain(&self.regulation_links) {
            if link == 0 || link > n {
                return Err(Error::InvalidArgument(format!("cost link {link} outside 1..={n}")));
            }
        }
        Ok(())
    }

    fn selector(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.force_selector)
    }
}

/// Cost value with derivatives in `x = (q, v)` and `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEval {
    pub value: f64,
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    pub lux: DMatrix<f64>,
}

impl CostEval {
    pub fn zeros(nx: usize, nu: usize) -> Self {
        Self {
            value: 0.0,
            lx: DVector::zeros(nx),
            lu: DVector::zeros(nu),
            lxx: DMatrix::zeros(nx, nx),
            luu: DMatrix::zeros(nu, nu),
            lux: DMatrix::zeros(nu, nx),
        }
    }

    pub fn add(&mut self, other: &CostEval) {
        self.value += other.value;
        self.lx += &other.lx;
        self.lu += &other.lu;
        self.lxx += &other.lxx;
        self.luu += &other.luu;
        self.lux += &other.lux;
    }

    pub fn scale(&mut self, s: f64) {
        self.value *= s;
        self.lx *= s;
        self.lu *= s;
        self.lxx *= s;
        self.luu *= s;
        self.lux *= s;
    }

    /// Adds `w‖r‖²` for a residual `r(q)` with Jacobian `jac`.
    fn add_q_residual(&mut self, w: f64, r: &Vector3<f64>, jac: &Matrix3xX<f64>) {
        let n = jac.ncols();
        self.value += w * r.norm_squared();
        let mut lq = self.lx.rows_mut(0, n);
        lq += 2.0 * w * jac.transpose() * r;
        let mut lqq = self.lxx.view_mut((0, 0), (n, n));
        lqq += 2.0 * w * jac.transpose() * jac;
    }
}

/// A predicted contact force and its configuration derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactForce {
    /// 1-based link index.
    pub link: usize,
    pub force: Vector3<f64>,
    /// ∂λ/∂q.
    pub jacobian: Matrix3xX<f64>,
}

impl ContactForce {
    pub fn from_params(params: &ContactParams, frames: &FrameCache) -> Self {
        Self { link: params.link(), force: params.force_at(frames), jacobian: params.jacobian_at(frames) }
    }
}

pub fn motion_cost(config: &CostConfig, model: &RobotModel, frames: &FrameCache, state: &JointState) -> CostEval {
    let n = model.dof();
    let mut eval = CostEval::zeros(2 * n, n);
    if config.velocity_weight > 0.0 {
        let c = config.velocity_weight;
        eval.value += c * state.v.norm_squared();
        eval.lx.rows_mut(n, n).copy_from(&(2.0 * c * &state.v));
        for i in n..2 * n {
            eval.lxx[(i, i)] += 2.0 * c;
        }
    }
    let (position, rotation) = frames.end_effector(model);
    if config.position_weight > 0.0 {
        let ee = FrameCache::end_effector_point(model);
        let jac = frames.world_point_jacobian(ee.link, &position);
        eval.add_q_residual(config.position_weight, &(position - config.target_position), &jac);
    }
    if config.orientation_weight > 0.0 {
        let r = so3::box_minus(&rotation, &config.target_rotation);
        let jac =
            -so3::right_jacobian_inverse(&r) * config.target_rotation.matrix().transpose() * frames.angular_jacobian(n);
        eval.add_q_residual(config.orientation_weight, &r, &jac);
    }
    eval
}

pub fn control_cost(config: &CostConfig, u: &DVector<f64>) -> CostEval {
    let n = u.len();
    let mut eval = CostEval::zeros(2 * n, n);
    let c = config.control_weight;
    if c > 0.0 {
        let du = u - &config.control_reference;
        eval.value = c * du.norm_squared();
        eval.lu = 2.0 * c * du;
        eval.luu = DMatrix::from_diagonal_element(n, n, 2.0 * c);
    }
    eval
}

/// Zero unless the contact's link is regulated.
pub fn force_regulation_cost(config: &CostConfig, contact: &ContactForce) -> CostEval {
    let n = contact.jacobian.ncols();
    let mut eval = CostEval::zeros(2 * n, n);
    if config.regulation_weight > 0.0 && config.regulation_links.contains(&contact.link) {
        let a = config.selector();
        let r = a * (contact.force - config.target_force);
        eval.add_q_residual(config.regulation_weight, &r, &(a * &contact.jacobian));
    }
    eval
}

/// Zero unless the contact's link is limited and its force is at or above the
/// activation level `b·λ_max`. The unsmoothed form jumps at activation.
pub fn force_barrier_cost(config: &CostConfig, contact: &ContactForce) -> CostEval {
    let n = contact.jacobian.ncols();
    let mut eval = CostEval::zeros(2 * n, n);
    if config.barrier_weight == 0.0 || !config.barrier_links.contains(&contact.link) {
        return eval;
    }
    let limit = config.force_limit[contact.link - 1];
    let activation = config.barrier_scale * limit;
    let magnitude = contact.force.norm();
    if magnitude < activation {
        return eval;
    }
    let reference = if config.smooth_barrier { activation } else { limit };
    let direction = contact.force / magnitude;
    let r = Vector3::new(0.0, 0.0, magnitude - reference);
    let mut jac = Matrix3xX::zeros(n);
    jac.row_mut(2).copy_from(&(direction.transpose() * &contact.jacobian));
    eval.add_q_residual(config.barrier_weight, &r, &jac);
    eval
}

/// Hinge-squared penalty on joint position and speed limits.
pub fn state_limit_cost(config: &CostConfig, model: &RobotModel, state: &JointState) -> CostEval {
    let n = model.dof();
    let mut eval = CostEval::zeros(2 * n, n);
    let w = config.state_limit_weight;
    if w == 0.0 {
        return eval;
    }
    let limits = model.limits();
    let m = config.state_limit_margin;
    let mut hinge = |i: usize, excess: f64, sign: f64| {
        if excess > 0.0 {
            eval.value += w * excess * excess;
            eval.lx[i] += 2.0 * w * excess * sign;
            eval.lxx[(i, i)] += 2.0 * w;
        }
    };
    for i in 0..n {
        let q = state.q[i];
        hinge(i, q - (limits.q_max[i] - m), 1.0);
        hinge(i, (limits.q_min[i] + m) - q, -1.0);
        let v = state.v[i];
        let v_max = (limits.v_max[i] - m).max(0.0);
        hinge(n + i, v - v_max, 1.0);
        hinge(n + i, -v - v_max, -1.0);
    }
    eval
}

fn contact_costs(config: &CostConfig, contacts: &[ContactForce], eval: &mut CostEval) {
    for contact in contacts {
        eval.add(&force_barrier_cost(config, contact));
        eval.add(&force_regulation_cost(config, contact));
    }
}

/// Motion, contact, state-limit and control terms (not scaled by the step).
pub fn running_cost(
    config: &CostConfig,
    model: &RobotModel,
    frames: &FrameCache,
    state: &JointState,
    u: &DVector<f64>,
    contacts: &[ContactForce],
) -> CostEval {
    let mut eval = terminal_cost(config, model, frames, state, contacts);
    eval.add(&control_cost(config, u));
    eval
}

/// Running cost without the control term.
pub fn terminal_cost(
    config: &CostConfig,
    model: &RobotModel,
    frames: &FrameCache,
    state: &JointState,
    contacts: &[ContactForce],
) -> CostEval {
    let mut eval = motion_cost(config, model, frames, state);
    contact_costs(config, contacts, &mut eval);
    eval.add(&state_limit_cost(config, model, state));
    eval
}

/// Running cost with contact forces predicted by the spring models.
pub fn total_running_cost(
    config: &CostConfig,
    model: &RobotModel,
    state: &JointState,
    u: &DVector<f64>,
    contacts: &[ContactParams],
) -> Result<CostEval> {
    state.check(model)?;
    if u.len() != model.dof() {
        return Err(Error::InvalidArgument(format!("control has {} entries, expected {}", u.len(), model.dof())));
    }
    let frames = FrameCache::new(model, &state.q)?;
    let forces: Vec<_> = contacts.iter().map(|c| ContactForce::from_params(c, &frames)).collect();
    Ok(running_cost(config, model, &frames, state, u, &forces))
}

pub fn total_terminal_cost(
    config: &CostConfig,
    model: &RobotModel,
    state: &JointState,
    contacts: &[ContactParams],
) -> Result<CostEval> {
    state.check(model)?;
    let frames = FrameCache::new(model, &state.q)?;
    let forces: Vec<_> = contacts.iter().map(|c| ContactForce::from_params(c, &frames)).collect();
    Ok(terminal_cost(config, model, &frames, state, &forces))
}
