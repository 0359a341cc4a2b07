//! Mass matrix, bias forces, forward dynamics and their analytic derivatives.
//!
//! All recursions run in the world frame. Link quantities are referred to the
//! link origin (the location of the joint that moves the link).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, Vector3};

use super::kinematics::{BodyPoint, FrameCache};
use super::model::RobotModel;
use crate::{Error, Result};

/// Joint positions and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

impl JointState {
    pub fn new(q: DVector<f64>, v: DVector<f64>) -> Self {
        Self { q, v }
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self { q, v: DVector::zeros(n) }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }

    pub(crate) fn check(&self, model: &RobotModel) -> Result<()> {
        if self.q.len() != model.dof() || self.v.len() != model.dof() {
            return Err(Error::InvalidArgument(format!(
                "joint state has dims ({}, {}), model has {} joints",
                self.q.len(),
                self.v.len(),
                model.dof()
            )));
        }
        if !self.is_finite() {
            return Err(Error::InvalidArgument("joint state is not finite".into()));
        }
        Ok(())
    }
}

/// A world-frame force applied at a body point.
///
/// `stiffness` describes how the force reacts to motion of the point:
/// `∂force/∂(point position) = −stiffness`. Constant loads use zero stiffness;
/// spring contacts use their world-frame stiffness matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLoad {
    pub point: BodyPoint,
    pub force: Vector3<f64>,
    pub stiffness: Matrix3<f64>,
}

impl PointLoad {
    pub fn constant(point: BodyPoint, force: Vector3<f64>) -> Self {
        Self { point, force, stiffness: Matrix3::zeros() }
    }
}

/// How dynamics derivatives are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    #[default]
    Analytic,
    /// Central finite differences; kept as a cross-check.
    FiniteDifference,
}

/// Joint accelerations with their partial derivatives.
#[derive(Debug, Clone)]
pub struct DynamicsDerivatives {
    pub acceleration: DVector<f64>,
    pub da_dq: DMatrix<f64>,
    pub da_dv: DMatrix<f64>,
    pub da_du: DMatrix<f64>,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Composite-rigid-body mass matrix.
pub(crate) fn crba(model: &RobotModel, frames: &FrameCache) -> DMatrix<f64> {
    let n = model.dof();
    let mut mass_matrix = DMatrix::zeros(n, n);
    // Running composite of links i..n: mass, first moment and inertia about
    // the world origin.
    let mut mass = 0.0;
    let mut moment = Vector3::zeros();
    let mut inertia_origin = Matrix3::zeros();
    for i in (0..n).rev() {
        let link = &model.links()[i];
        let rotation = &frames.rotations[i];
        let com = frames.origins[i] + rotation * link.com;
        let inertia_com = rotation * link.inertia * rotation.transpose();
        mass += link.mass;
        moment += link.mass * com;
        inertia_origin += inertia_com + link.mass * (com.norm_squared() * Matrix3::identity() - com * com.transpose());

        let centre = moment / mass;
        let composite_inertia =
            inertia_origin - mass * (centre.norm_squared() * Matrix3::identity() - centre * centre.transpose());
        let axis = &frames.axes[i];
        let force = mass * axis.cross(&(centre - frames.origins[i]));
        let torque_centre = composite_inertia * axis;
        for j in 0..=i {
            let torque_j = torque_centre + (centre - frames.origins[j]).cross(&force);
            let entry = frames.axes[j].dot(&torque_j);
            mass_matrix[(j, i)] = entry;
            mass_matrix[(i, j)] = entry;
        }
    }
    mass_matrix
}

/// External force resolved for the recursions: link (0-based), lever arm from
/// the link origin to the application point, and the world force.
struct ResolvedLoad {
    link: usize,
    lever: Vector3<f64>,
    force: Vector3<f64>,
}

fn resolve_loads(frames: &FrameCache, loads: &[PointLoad]) -> Vec<ResolvedLoad> {
    loads
        .iter()
        .map(|l| {
            let link = l.point.link - 1;
            ResolvedLoad { link, lever: frames.rotations[link] * l.point.offset, force: l.force }
        })
        .collect()
}

/// Per-link quantities of the recursive Newton–Euler pass.
struct NewtonEuler {
    z: Vec<Vector3<f64>>,
    /// o_i − o_{i−1} (o_{−1} is the world origin).
    e: Vec<Vector3<f64>>,
    /// com_i − o_i.
    s: Vec<Vector3<f64>>,
    inertia: Vec<Matrix3<f64>>,
    omega: Vec<Vector3<f64>>,
    alpha: Vec<Vector3<f64>>,
    acc_origin: Vec<Vector3<f64>>,
    acc_com: Vec<Vector3<f64>>,
    force: Vec<Vector3<f64>>,
    torque: Vec<Vector3<f64>>,
    /// Force transmitted from link i−1 to link i.
    joint_force: Vec<Vector3<f64>>,
    /// Moment about o_i transmitted from link i−1 to link i.
    joint_moment: Vec<Vector3<f64>>,
    tau: DVector<f64>,
}

/// Recursive Newton–Euler inverse dynamics:
/// `τ = M(q)a + C(q,v)v + g(q) + D v − Σ Jᵀ f_ext`.
fn newton_euler(
    model: &RobotModel,
    frames: &FrameCache,
    v: &DVector<f64>,
    a: &DVector<f64>,
    loads: &[ResolvedLoad],
) -> NewtonEuler {
    let n = model.dof();
    let mut ne = NewtonEuler {
        z: frames.axes.clone(),
        e: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
        inertia: Vec::with_capacity(n),
        omega: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
        acc_origin: Vec::with_capacity(n),
        acc_com: Vec::with_capacity(n),
        force: Vec::with_capacity(n),
        torque: Vec::with_capacity(n),
        joint_force: vec![Vector3::zeros(); n],
        joint_moment: vec![Vector3::zeros(); n],
        tau: DVector::zeros(n),
    };

    let mut omega_prev = Vector3::zeros();
    let mut alpha_prev = Vector3::zeros();
    let mut acc_prev = -model.gravity();
    let mut origin_prev = Vector3::zeros();
    for i in 0..n {
        let link = &model.links()[i];
        let rotation = &frames.rotations[i];
        let z = frames.axes[i];
        let e = frames.origins[i] - origin_prev;
        let s = rotation * link.com;
        let inertia = rotation * link.inertia * rotation.transpose();

        let zv = z * v[i];
        let omega = omega_prev + zv;
        let alpha = alpha_prev + z * a[i] + omega_prev.cross(&zv);
        let acc_origin = acc_prev + alpha_prev.cross(&e) + omega_prev.cross(&omega_prev.cross(&e));
        let acc_com = acc_origin + alpha.cross(&s) + omega.cross(&omega.cross(&s));

        ne.force.push(link.mass * acc_com);
        ne.torque.push(inertia * alpha + omega.cross(&(inertia * omega)));
        ne.e.push(e);
        ne.s.push(s);
        ne.inertia.push(inertia);
        ne.omega.push(omega);
        ne.alpha.push(alpha);
        ne.acc_origin.push(acc_origin);
        ne.acc_com.push(acc_com);

        omega_prev = omega;
        alpha_prev = alpha;
        acc_prev = acc_origin;
        origin_prev = frames.origins[i];
    }

    let mut f_child = Vector3::zeros();
    let mut n_child = Vector3::zeros();
    let mut e_child = Vector3::zeros();
    for i in (0..n).rev() {
        let mut f = ne.force[i] + f_child;
        let mut m = ne.torque[i] + ne.s[i].cross(&ne.force[i]) + n_child + e_child.cross(&f_child);
        for load in loads.iter().filter(|l| l.link == i) {
            f -= load.force;
            m -= load.lever.cross(&load.force);
        }
        ne.tau[i] = ne.z[i].dot(&m) + model.damping()[i] * v[i];
        ne.joint_force[i] = f;
        ne.joint_moment[i] = m;
        f_child = f;
        n_child = m;
        e_child = ne.e[i];
    }
    ne
}

/// Directional derivative of the Newton–Euler torques along `(dq, dv)` with
/// accelerations and external forces held fixed.
///
/// A configuration direction `dq` moves every link as if the joints turned at
/// rate `dq`: vectors rigidly attached to link i rotate with the virtual
/// angular velocity `Ω_i = Σ_{j≤i} z_j dq_j`.
fn newton_euler_tangent(
    model: &RobotModel,
    ne: &NewtonEuler,
    v: &DVector<f64>,
    a: &DVector<f64>,
    loads: &[ResolvedLoad],
    dq: &DVector<f64>,
    dv: &DVector<f64>,
) -> DVector<f64> {
    let n = model.dof();
    let mut big_omega = Vec::with_capacity(n);
    let mut dz = Vec::with_capacity(n);
    let mut de = Vec::with_capacity(n);
    let mut ds = Vec::with_capacity(n);
    let mut dforce = Vec::with_capacity(n);
    let mut dtorque = Vec::with_capacity(n);

    let mut big_omega_prev = Vector3::zeros();
    let mut domega_prev = Vector3::zeros();
    let mut dalpha_prev = Vector3::zeros();
    let mut dacc_prev = Vector3::zeros();
    let mut omega_prev = Vector3::zeros();
    let mut alpha_prev = Vector3::zeros();
    for i in 0..n {
        let z = &ne.z[i];
        let e = &ne.e[i];
        let s = &ne.s[i];
        let inertia = &ne.inertia[i];
        let omega = &ne.omega[i];
        let alpha = &ne.alpha[i];
        let mass = model.links()[i].mass;

        let dz_i = big_omega_prev.cross(z);
        let de_i = big_omega_prev.cross(e);
        let bo = big_omega_prev + z * dq[i];
        let ds_i = bo.cross(s);
        let bo_hat = skew(&bo);
        let dinertia = bo_hat * inertia - inertia * bo_hat;

        let zv = z * v[i];
        let dzv = dz_i * v[i] + z * dv[i];
        let domega = domega_prev + dzv;
        let dalpha = dalpha_prev + dz_i * a[i] + domega_prev.cross(&zv) + omega_prev.cross(&dzv);
        let dacc_origin = dacc_prev
            + dalpha_prev.cross(e)
            + alpha_prev.cross(&de_i)
            + domega_prev.cross(&omega_prev.cross(e))
            + omega_prev.cross(&(domega_prev.cross(e) + omega_prev.cross(&de_i)));
        let dacc_com = dacc_origin
            + dalpha.cross(s)
            + alpha.cross(&ds_i)
            + domega.cross(&omega.cross(s))
            + omega.cross(&(domega.cross(s) + omega.cross(&ds_i)));

        dforce.push(mass * dacc_com);
        dtorque.push(
            dinertia * alpha
                + inertia * dalpha
                + domega.cross(&(inertia * omega))
                + omega.cross(&(dinertia * omega + inertia * domega)),
        );
        big_omega.push(bo);
        dz.push(dz_i);
        de.push(de_i);
        ds.push(ds_i);

        big_omega_prev = bo;
        domega_prev = domega;
        dalpha_prev = dalpha;
        dacc_prev = dacc_origin;
        omega_prev = *omega;
        alpha_prev = *alpha;
    }

    let mut dtau = DVector::zeros(n);
    let mut df_child = Vector3::zeros();
    let mut dn_child = Vector3::zeros();
    for i in (0..n).rev() {
        let df = dforce[i] + df_child;
        let mut dn = dtorque[i] + ds[i].cross(&ne.force[i]) + ne.s[i].cross(&dforce[i]) + dn_child;
        if i + 1 < n {
            dn += de[i + 1].cross(&ne.joint_force[i + 1]) + ne.e[i + 1].cross(&df_child);
        }
        for load in loads.iter().filter(|l| l.link == i) {
            dn -= big_omega[i].cross(&load.lever).cross(&load.force);
        }
        dtau[i] = dz[i].dot(&ne.joint_moment[i]) + ne.z[i].dot(&dn) + model.damping()[i] * dv[i];
        df_child = df;
        dn_child = dn;
    }
    dtau
}

/// Joint-space mass matrix `M(q)`.
pub fn mass_matrix(model: &RobotModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    let frames = FrameCache::new(model, q)?;
    Ok(crba(model, &frames))
}

/// Combined Coriolis/centrifugal and gravity torques `C(q,v)v + g(q)`.
///
/// Viscous joint damping, when the model has any, is included.
pub fn bias_forces(model: &RobotModel, state: &JointState) -> Result<DVector<f64>> {
    state.check(model)?;
    let frames = FrameCache::new(model, &state.q)?;
    Ok(newton_euler(model, &frames, &state.v, &DVector::zeros(model.dof()), &[]).tau)
}

/// Gravity torques `g(q)`.
pub fn gravity_torques(model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    let n = model.dof();
    let frames = FrameCache::new(model, q)?;
    Ok(newton_euler(model, &frames, &DVector::zeros(n), &DVector::zeros(n), &[]).tau)
}

/// Torques required to realise accelerations `a` under external point loads.
pub fn inverse_dynamics(
    model: &RobotModel,
    state: &JointState,
    a: &DVector<f64>,
    loads: &[PointLoad],
) -> Result<DVector<f64>> {
    state.check(model)?;
    let frames = FrameCache::new(model, &state.q)?;
    let resolved = resolve_loads(&frames, loads);
    Ok(newton_euler(model, &frames, &state.v, a, &resolved).tau)
}

/// Joint-space generalised force `Σ Jᵀ f` of a set of point loads.
pub fn load_torque(frames: &FrameCache, loads: &[PointLoad]) -> DVector<f64> {
    let mut tau = DVector::zeros(frames.dof());
    for load in loads {
        let world = frames.point(&load.point);
        for j in 0..load.point.link {
            tau[j] += frames.axes[j].cross(&(world - frames.origins[j])).dot(&load.force);
        }
    }
    tau
}

fn factor(mass_matrix: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(mass_matrix).ok_or_else(|| Error::NumericalFailure("mass matrix is not positive-definite".into()))
}

fn check_loads(model: &RobotModel, loads: &[PointLoad]) -> Result<()> {
    for load in loads {
        load.point.check(model)?;
        if !load.force.iter().all(|f| f.is_finite()) {
            return Err(Error::InvalidArgument("contact force is not finite".into()));
        }
    }
    Ok(())
}

/// `q̈ = M(q)⁻¹ (u + Σ Jᵀ λ − b(q, v))`.
pub fn forward_dynamics(
    model: &RobotModel,
    state: &JointState,
    u: &DVector<f64>,
    loads: &[PointLoad],
) -> Result<DVector<f64>> {
    state.check(model)?;
    check_loads(model, loads)?;
    if u.len() != model.dof() {
        return Err(Error::InvalidArgument(format!("torque has {} entries", u.len())));
    }
    let frames = FrameCache::new(model, &state.q)?;
    let resolved = resolve_loads(&frames, loads);
    // Inverse dynamics at zero acceleration gives b − Σ Jᵀλ.
    let rhs = u - newton_euler(model, &frames, &state.v, &DVector::zeros(model.dof()), &resolved).tau;
    let chol = factor(crba(model, &frames))?;
    Ok(chol.solve(&rhs))
}

/// Accelerations and their partials with respect to `q`, `v` and `u`.
///
/// Each load's force is treated as a spring about the current configuration:
/// `λ(q') = λ − K (p(q') − p(q))`. Its configuration dependence therefore
/// contributes `−Jᵀ K J` to the stiffness, while `∂λ/∂v = ∂λ/∂u = 0`.
pub fn forward_dynamics_derivatives(
    model: &RobotModel,
    state: &JointState,
    u: &DVector<f64>,
    loads: &[PointLoad],
    mode: DerivativeMode,
) -> Result<DynamicsDerivatives> {
    match mode {
        DerivativeMode::Analytic => analytic_derivatives(model, state, u, loads),
        DerivativeMode::FiniteDifference => finite_difference_derivatives(model, state, u, loads, 1e-6),
    }
}

fn analytic_derivatives(
    model: &RobotModel,
    state: &JointState,
    u: &DVector<f64>,
    loads: &[PointLoad],
) -> Result<DynamicsDerivatives> {
    state.check(model)?;
    check_loads(model, loads)?;
    let n = model.dof();
    if u.len() != n {
        return Err(Error::InvalidArgument(format!("torque has {} entries", u.len())));
    }
    let frames = FrameCache::new(model, &state.q)?;
    let resolved = resolve_loads(&frames, loads);
    let zeros = DVector::zeros(n);
    let bias = newton_euler(model, &frames, &state.v, &zeros, &resolved).tau;
    let chol = factor(crba(model, &frames))?;
    let acceleration = chol.solve(&(u - bias));

    let ne = newton_euler(model, &frames, &state.v, &acceleration, &resolved);
    let mut did_dq = DMatrix::zeros(n, n);
    let mut did_dv = DMatrix::zeros(n, n);
    let mut unit = DVector::zeros(n);
    for k in 0..n {
        unit[k] = 1.0;
        did_dq.set_column(k, &newton_euler_tangent(model, &ne, &state.v, &acceleration, &resolved, &unit, &zeros));
        did_dv.set_column(k, &newton_euler_tangent(model, &ne, &state.v, &acceleration, &resolved, &zeros, &unit));
        unit[k] = 0.0;
    }
    // Spring stiffness of the loads: ∂(Jᵀλ)/∂q |_J fixed = Jᵀ ∂λ/∂q = −Jᵀ K J.
    for load in loads {
        if load.stiffness.iter().all(|k| *k == 0.0) {
            continue;
        }
        let jac = frames.point_jacobian(&load.point);
        did_dq += jac.transpose() * (load.stiffness * &jac);
    }

    let da_dq = -chol.solve(&did_dq);
    let da_dv = -chol.solve(&did_dv);
    let da_du = chol.inverse();
    Ok(DynamicsDerivatives { acceleration, da_dq, da_dv, da_du })
}

/// Loads re-evaluated at a perturbed configuration under the spring model.
fn spring_loads_at(
    model: &RobotModel,
    q0: &DVector<f64>,
    q: &DVector<f64>,
    loads: &[PointLoad],
) -> Result<Vec<PointLoad>> {
    let frames0 = FrameCache::new(model, q0)?;
    let frames = FrameCache::new(model, q)?;
    Ok(loads
        .iter()
        .map(|l| {
            let shift = frames.point(&l.point) - frames0.point(&l.point);
            PointLoad { point: l.point, force: l.force - l.stiffness * shift, stiffness: l.stiffness }
        })
        .collect())
}

fn finite_difference_derivatives(
    model: &RobotModel,
    state: &JointState,
    u: &DVector<f64>,
    loads: &[PointLoad],
    h: f64,
) -> Result<DynamicsDerivatives> {
    let n = model.dof();
    let acceleration = forward_dynamics(model, state, u, loads)?;
    let mut da_dq = DMatrix::zeros(n, n);
    let mut da_dv = DMatrix::zeros(n, n);
    let mut da_du = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut plus = state.clone();
        let mut minus = state.clone();
        plus.q[k] += h;
        minus.q[k] -= h;
        let ap = forward_dynamics(model, &plus, u, &spring_loads_at(model, &state.q, &plus.q, loads)?)?;
        let am = forward_dynamics(model, &minus, u, &spring_loads_at(model, &state.q, &minus.q, loads)?)?;
        da_dq.set_column(k, &((ap - am) / (2.0 * h)));

        let mut plus = state.clone();
        let mut minus = state.clone();
        plus.v[k] += h;
        minus.v[k] -= h;
        let ap = forward_dynamics(model, &plus, u, loads)?;
        let am = forward_dynamics(model, &minus, u, loads)?;
        da_dv.set_column(k, &((ap - am) / (2.0 * h)));

        let mut up = u.clone();
        let mut um = u.clone();
        up[k] += h;
        um[k] -= h;
        let ap = forward_dynamics(model, state, &up, loads)?;
        let am = forward_dynamics(model, state, &um, loads)?;
        da_du.set_column(k, &((ap - am) / (2.0 * h)));
    }
    Ok(DynamicsDerivatives { acceleration, da_dq, da_dv, da_du })
}

/// Kinetic energy `½ vᵀ M v`.
pub fn kinetic_energy(model: &RobotModel, state: &JointState) -> Result<f64> {
    let m = mass_matrix(model, &state.q)?;
    Ok(0.5 * state.v.dot(&(m * &state.v)))
}

/// Gravitational potential energy relative to the world origin.
pub fn potential_energy(model: &RobotModel, q: &DVector<f64>) -> Result<f64> {
    let frames = FrameCache::new(model, q)?;
    Ok(model
        .links()
        .iter()
        .enumerate()
        .map(|(i, link)| {
            let com = frames.origins[i] + frames.rotations[i] * link.com;
            -link.mass * model.gravity().dot(&com)
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> JointState {
        JointState::new(
            DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
            DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
        )
    }

    /// Mass matrix assembled from link Jacobians: Σ m JᵥᵀJᵥ + J_ωᵀ I J_ω.
    fn mass_matrix_from_jacobians(model: &RobotModel, q: &DVector<f64>) -> DMatrix<f64> {
        let frames = FrameCache::new(model, q).unwrap();
        let n = model.dof();
        let mut m = DMatrix::zeros(n, n);
        for (i, link) in model.links().iter().enumerate() {
            let jv = frames.point_jacobian(&BodyPoint::new(i + 1, link.com));
            let jw = frames.angular_jacobian(i + 1);
            let r = frames.link_rotation(i + 1);
            let inertia = r * link.inertia * r.transpose();
            m += link.mass * jv.transpose() * &jv + jw.transpose() * inertia * &jw;
        }
        m
    }

    #[test]
    fn pendulum_inertia_is_ml2() {
        let (m, l, eps) = (1.3, 0.8, 1e-9);
        let model = RobotModel::pendulum(m, l, eps).unwrap();
        for q in [0.0, 0.4, -2.0] {
            let mm = mass_matrix(&model, &DVector::from_element(1, q)).unwrap();
            assert_relative_eq!(mm[(0, 0)], m * l * l + eps, epsilon = 1e-12);
        }
    }

    #[test]
    fn pendulum_gravity_torque() {
        // Upright at q = 0; tipping by θ about y puts the mass at
        // (l sinθ, 0, l cosθ) and the bias (holding) torque is −m g l sinθ.
        let (m, l) = (2.0, 0.5);
        let model = RobotModel::pendulum(m, l, 1e-6).unwrap();
        for theta in [0.3, 1.2, -0.7] {
            let b = bias_forces(&model, &JointState::at_rest(DVector::from_element(1, theta))).unwrap();
            assert_relative_eq!(b[0], -m * 9.81 * l * theta.sin(), epsilon = 1e-12);
        }
        // Measured from the hanging position the torque reads m g l sinθ.
        let theta_down: f64 = 0.4;
        let b = bias_forces(&model, &JointState::at_rest(DVector::from_element(1, theta_down + std::f64::consts::PI)))
            .unwrap();
        assert_relative_eq!(b[0], m * 9.81 * l * theta_down.sin(), epsilon = 1e-12);
    }

    #[test]
    fn crba_matches_jacobian_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = RobotModel::desk7();
        for _ in 0..50 {
            let q = random_state(&mut rng, 7).q;
            let m = mass_matrix(&model, &q).unwrap();
            let reference = mass_matrix_from_jacobians(&model, &q);
            assert!((&m - &reference).amax() < 1e-12);
            assert!((&m - m.transpose()).amax() < 1e-10);
            assert!(m.clone().symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn zero_velocity_bias_is_gravity() {
        let model = RobotModel::desk7();
        let q = DVector::from_vec(vec![0.1, 0.5, -0.3, 1.2, 0.4, -0.6, 0.2]);
        let b = bias_forces(&model, &JointState::at_rest(q.clone())).unwrap();
        assert_relative_eq!(b, gravity_torques(&model, &q).unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn bias_matches_christoffel_finite_differences() {
        // C(q,v)v = Ṁ v − ½ ∂/∂q (vᵀ M v): an independent route through the
        // mass matrix only.
        let model = RobotModel::desk7();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..10 {
            let s = random_state(&mut rng, 7);
            let mut mdot = DMatrix::zeros(7, 7);
            let mut grad = DVector::zeros(7);
            for k in 0..7 {
                let mut qp = s.q.clone();
                let mut qm = s.q.clone();
                qp[k] += h;
                qm[k] -= h;
                let dm = (mass_matrix(&model, &qp).unwrap() - mass_matrix(&model, &qm).unwrap()) / (2.0 * h);
                mdot += &dm * s.v[k];
                grad[k] = 0.5 * s.v.dot(&(&dm * &s.v));
            }
            let coriolis = mdot * &s.v - grad;
            let expected = coriolis + gravity_torques(&model, &s.q).unwrap();
            let b = bias_forces(&model, &s).unwrap();
            assert!((b - expected).amax() < 1e-6);
        }
    }

    #[test]
    fn exact_compensation_gives_zero_acceleration() {
        let model = RobotModel::desk7();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = random_state(&mut rng, 7);
            let u = bias_forces(&model, &s).unwrap();
            let a = forward_dynamics(&model, &s, &u, &[]).unwrap();
            assert!(a.norm() < 1e-9);
        }
    }

    #[test]
    fn contact_cancelling_torque_gives_zero_acceleration() {
        // Planar arm, force at the tip along world z: pick u = b − Jᵀλ.
        let model = RobotModel::planar3();
        let s = JointState::new(DVector::from_vec(vec![0.4, -0.3, 0.8]), DVector::from_vec(vec![0.2, 0.1, -0.4]));
        let tip = BodyPoint::new(3, Vector3::new(0.0, 0.0, 0.2));
        let load = PointLoad::constant(tip, Vector3::new(3.0, 0.0, -5.0));
        let jac = point_jacobian_of(&model, &s.q, &tip);
        let u = bias_forces(&model, &s).unwrap() - jac.transpose() * load.force;
        let a = forward_dynamics(&model, &s, &u, &[load]).unwrap();
        assert!(a.norm() < 1e-9);
    }

    fn point_jacobian_of(model: &RobotModel, q: &DVector<f64>, p: &BodyPoint) -> nalgebra::Matrix3xX<f64> {
        FrameCache::new(model, q).unwrap().point_jacobian(p)
    }

    #[test]
    fn forward_dynamics_matches_dense_solve() {
        let model = RobotModel::desk7();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = random_state(&mut rng, 7);
            let u = DVector::from_fn(7, |_, _| rng.random_range(-20.0..20.0));
            let p = BodyPoint::new(rng.random_range(1..=7), Vector3::new(0.03, -0.02, 0.05));
            let f = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 4.0);
            let m = mass_matrix_from_jacobians(&model, &s.q);
            let b = bias_forces(&model, &s).unwrap();
            let jac = point_jacobian_of(&model, &s.q, &p);
            let expected = m.lu().solve(&(&u + jac.transpose() * f - b)).unwrap();
            let a = forward_dynamics(&model, &s, &u, &[PointLoad::constant(p, f)]).unwrap();
            assert!((a - expected).amax() < 1e-9);
        }
    }

    #[test]
    fn du_derivative_is_inverse_mass_matrix() {
        let model = RobotModel::desk7();
        let s = JointState::new(DVector::from_element(7, 0.3), DVector::from_element(7, -0.2));
        let d = forward_dynamics_derivatives(&model, &s, &DVector::zeros(7), &[], DerivativeMode::Analytic).unwrap();
        let minv = mass_matrix(&model, &s.q).unwrap().try_inverse().unwrap();
        assert!((d.da_du - minv).amax() < 1e-10);
    }

    #[test]
    fn zero_stiffness_matches_constant_load() {
        let model = RobotModel::planar3();
        let s = JointState::new(DVector::from_vec(vec![0.4, -0.3, 0.8]), DVector::from_vec(vec![0.2, 0.1, -0.4]));
        let p = BodyPoint::new(2, Vector3::new(0.0, 0.0, 0.1));
        let load = PointLoad::constant(p, Vector3::new(1.0, 0.0, 2.0));
        let with_zero_k = PointLoad { stiffness: Matrix3::zeros(), ..load.clone() };
        let a =
            forward_dynamics_derivatives(&model, &s, &DVector::zeros(3), &[load], DerivativeMode::Analytic).unwrap();
        let b = forward_dynamics_derivatives(&model, &s, &DVector::zeros(3), &[with_zero_k], DerivativeMode::Analytic)
            .unwrap();
        assert_eq!(a.da_dq, b.da_dq);
        // No load and no stiffness reduces to the contact-free derivatives.
        let free = forward_dynamics_derivatives(&model, &s, &DVector::zeros(3), &[], DerivativeMode::Analytic).unwrap();
        let zero_force = PointLoad::constant(p, Vector3::zeros());
        let c = forward_dynamics_derivatives(&model, &s, &DVector::zeros(3), &[zero_force], DerivativeMode::Analytic)
            .unwrap();
        assert!((free.da_dq - c.da_dq).amax() < 1e-14);
    }

    fn simulate_unforced(model: &RobotModel, q0: Vec<f64>, dt: f64, duration: f64) -> f64 {
        let mut s = JointState::at_rest(DVector::from_vec(q0));
        let energy = |s: &JointState| kinetic_energy(model, s).unwrap() + potential_energy(model, &s.q).unwrap();
        let e0 = energy(&s);
        let zero = DVector::zeros(model.dof());
        let mut worst: f64 = 0.0;
        for _ in 0..(duration / dt).round() as usize {
            let a = forward_dynamics(model, &s, &zero, &[]).unwrap();
            s.v += a * dt;
            s.q += &s.v * dt;
            worst = worst.max((energy(&s) - e0).abs() / e0.abs());
        }
        worst
    }

    #[test]
    fn unforced_energy_drift_small_at_fine_step() {
        // Swing about the hanging equilibrium, released from rest.
        let drift = simulate_unforced(&RobotModel::planar3(), vec![PI - 0.5, 0.3, 0.2], 1e-4, 1.0);
        assert!(drift < 1e-3, "relative drift {drift}");
    }

    #[test]
    fn energy_error_is_first_order_in_step() {
        // Semi-implicit Euler with a configuration-dependent mass matrix is not
        // symplectic, so large motions drift. The error must still shrink
        // linearly with the step.
        let model = RobotModel::planar3();
        let coarse = simulate_unforced(&model, vec![0.6, -0.4, 0.9], 1e-3, 0.5);
        let fine = simulate_unforced(&model, vec![0.6, -0.4, 0.9], 1e-4, 0.5);
        let ratio = coarse / fine;
        assert!((5.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn analytic_derivatives_match_finite_differences(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = RobotModel::desk7();
            let s = random_state(&mut rng, 7);
            let u = DVector::from_fn(7, |_, _| rng.random_range(-30.0..30.0));
            let mut loads = Vec::new();
            for _ in 0..rng.random_range(0..3) {
                let p = BodyPoint::new(rng.random_range(1..=7), Vector3::new(0.04, 0.0, rng.random_range(0.0..0.2)));
                let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                let k = 3500.0 * dir * dir.transpose();
                loads.push(PointLoad { point: p, force: dir * rng.random_range(1.0..20.0), stiffness: k });
            }
            let an = forward_dynamics_derivatives(&model, &s, &u, &loads, DerivativeMode::Analytic).unwrap();
            let fd = forward_dynamics_derivatives(&model, &s, &u, &loads, DerivativeMode::FiniteDifference).unwrap();
            prop_assert!(rel_err(&an.da_dq, &fd.da_dq) < 1e-5, "dq {}", rel_err(&an.da_dq, &fd.da_dq));
            prop_assert!(rel_err(&an.da_dv, &fd.da_dv) < 1e-5, "dv {}", rel_err(&an.da_dv, &fd.da_dv));
            prop_assert!(rel_err(&an.da_du, &fd.da_du) < 1e-5, "du {}", rel_err(&an.da_du, &fd.da_du));
        }
    }
}
