//! Feedback-initialized spring contacts.
//!
//! A reported contact (location and force) becomes a spring that is stiff only
//! along the reported force direction. Its rest location is placed so that the
//! spring reproduces the reported force at the configuration where the report
//! was made; afterwards the contact point moves with the robot.

use nalgebra::{DVector, Matrix3, Matrix3xX, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::rigid_body::{BodyPoint, FrameCache, PointLoad, RobotModel};
use crate::{Error, Result};

/// Reports with a smaller force magnitude (N) do not define a contact frame.
pub const MIN_CONTACT_FORCE: f64 = 0.5;

/// One contact report from the estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactFeedback {
    /// Estimated contact location, world frame (m).
    pub position: Vector3<f64>,
    /// Estimated contact force acting on the robot, world frame (N).
    pub force: Vector3<f64>,
    /// 1-based link index.
    pub link: usize,
    /// Time of the report (s).
    pub timestamp: f64,
}

/// Spring parameters of one active contact.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactParams {
    /// World-frame stiffness, `R diag(0, 0, k) Rᵀ` (N/m).
    pub stiffness: Matrix3<f64>,
    /// Environment rest location, world frame (m).
    pub rest_location: Vector3<f64>,
    /// Contact point fixed on the robot.
    pub attachment: BodyPoint,
    /// Stiffness along the contact normal (N/m).
    pub k_env: f64,
    /// Contact frame; its z-axis is the force direction.
    pub frame: Rotation3<f64>,
}

/// Contact frame whose z-axis is the direction of `force`.
///
/// The x/y axes are completed from the world axis least parallel to z.
pub fn build_contact_frame(force: &Vector3<f64>) -> Result<Rotation3<f64>> {
    let magnitude = force.norm();
    if !(magnitude > MIN_CONTACT_FORCE) {
        return Err(Error::DegenerateFrame { magnitude, threshold: MIN_CONTACT_FORCE });
    }
    let z = force / magnitude;
    let mut k = 0;
    for i in 1..3 {
        if z[i].abs() < z[k].abs() {
            k = i;
        }
    }
    let seed = Vector3::ith(k, 1.0);
    let y = z.cross(&seed).normalize();
    let x = y.cross(&z);
    Ok(Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z])))
}

impl ContactParams {
    /// Spring through a known robot point.
    ///
    /// `point_world` is where `attachment` currently sits; the rest location is
    /// offset from it along the force so that the spring force equals `force`.
    pub fn from_attachment(
        force: &Vector3<f64>,
        point_world: &Vector3<f64>,
        attachment: BodyPoint,
        k_env: f64,
    ) -> Result<Self> {
        if !(k_env > 0.0 && k_env.is_finite()) {
            return Err(Error::InvalidArgument(format!("k_env must be positive, got {k_env}")));
        }
        let frame = build_contact_frame(force)?;
        let r = frame.matrix();
        let stiffness = r * Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, k_env)) * r.transpose();
        let local_rest = Vector3::new(0.0, 0.0, force.norm() / k_env);
        Ok(Self { stiffness, rest_location: point_world + r * local_rest, attachment, k_env, frame })
    }

    pub fn link(&self) -> usize {
        self.attachment.link
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.frame.matrix().column(2).into_owned()
    }

    /// Spring force for precomputed frames.
    pub fn force_at(&self, frames: &FrameCache) -> Vector3<f64> {
        self.stiffness * (self.rest_location - frames.point(&self.attachment))
    }

    /// Signed compression along the normal (m); negative means the spring
    /// would pull, i.e. the robot has separated.
    pub fn deformation_at(&self, frames: &FrameCache) -> f64 {
        self.normal().dot(&(self.rest_location - frames.point(&self.attachment)))
    }

    pub fn jacobian_at(&self, frames: &FrameCache) -> Matrix3xX<f64> {
        -self.stiffness * frames.point_jacobian(&self.attachment)
    }

    /// The spring as a load for the dynamics, including its stiffness.
    pub fn point_load(&self, frames: &FrameCache) -> PointLoad {
        PointLoad { point: self.attachment, force: self.force_at(frames), stiffness: self.stiffness }
    }
}

/// Spring parameters from a contact report at configuration `q`.
pub fn compute_theta(
    feedback: &ContactFeedback,
    model: &RobotModel,
    q: &DVector<f64>,
    k_env: f64,
) -> Result<ContactParams> {
    BodyPoint::new(feedback.link, Vector3::zeros()).check(model)?;
    let frames = FrameCache::new(model, q)?;
    let attachment = BodyPoint::new(feedback.link, frames.to_link_frame(feedback.link, &feedback.position));
    ContactParams::from_attachment(&feedback.force, &feedback.position, attachment, k_env)
}

pub fn spring_force(params: &ContactParams, model: &RobotModel, q: &DVector<f64>) -> Result<Vector3<f64>> {
    params.attachment.check(model)?;
    Ok(params.force_at(&FrameCache::new(model, q)?))
}

/// `∂λ/∂q = −K J`. The force does not depend on velocity or torque.
pub fn spring_force_jacobian(params: &ContactParams, model: &RobotModel, q: &DVector<f64>) -> Result<Matrix3xX<f64>> {
    params.attachment.check(model)?;
    Ok(params.jacobian_at(&FrameCache::new(model, q)?))
}

/// Joint torque `Σ Jᵢᵀ λᵢ` produced by the springs.
pub fn external_torque(contacts: &[ContactParams], model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    let frames = FrameCache::new(model, q)?;
    let mut tau = DVector::zeros(model.dof());
    for c in contacts {
        c.attachment.check(model)?;
        tau += frames.point_jacobian(&c.attachment).transpose() * c.force_at(&frames);
    }
    Ok(tau)
}

/// Spring loads for the dynamics at configuration `frames`.
pub fn point_loads(contacts: &[ContactParams], frames: &FrameCache) -> Vec<PointLoad> {
    contacts.iter().map(|c| c.point_load(frames)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rigid_body::{forward_dynamics_derivatives, DerivativeMode, JointState};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feedback(
        model: &RobotModel,
        q: &DVector<f64>,
        link: usize,
        offset: Vector3<f64>,
        force: Vector3<f64>,
    ) -> ContactFeedback {
        let frames = FrameCache::new(model, q).unwrap();
        ContactFeedback { position: frames.point(&BodyPoint::new(link, offset)), force, link, timestamp: 0.0 }
    }

    fn q7() -> DVector<f64> {
        DVector::from_vec(vec![0.2, 0.7, -0.3, -1.2, 0.4, 0.9, 0.1])
    }

    #[test]
    fn axis_aligned_force_gives_identity_normal() {
        let r = build_contact_frame(&Vector3::new(0.0, 0.0, 10.0)).unwrap();
        assert_relative_eq!(r.matrix().column(2).into_owned(), Vector3::z(), epsilon = 1e-15);
    }

    #[test]
    fn frame_for_planar_force() {
        let r = build_contact_frame(&Vector3::new(3.0, 4.0, 0.0)).unwrap();
        let m = r.matrix();
        assert_relative_eq!(m.column(2).into_owned(), Vector3::new(0.6, 0.8, 0.0), epsilon = 1e-15);
        assert_relative_eq!(m.transpose() * m, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(m.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn small_force_is_rejected() {
        assert!(matches!(build_contact_frame(&Vector3::new(0.3, 0.0, 0.3)), Err(Error::DegenerateFrame { .. })));
        assert!(build_contact_frame(&Vector3::new(f64::NAN, 1.0, 1.0)).is_err());
    }

    #[test]
    fn theta_for_axis_aligned_report() {
        let model = RobotModel::desk7();
        let q = q7();
        let fb = feedback(&model, &q, 4, Vector3::new(0.06, 0.0, 0.1), Vector3::new(0.0, 0.0, 10.0));
        let p = compute_theta(&fb, &model, &q, 3500.0).unwrap();
        // 10 N / 3500 N/m
        assert_relative_eq!(
            p.rest_location - fb.position,
            Vector3::new(0.0, 0.0, 0.002857142857142857),
            epsilon = 1e-15
        );
        assert_relative_eq!(p.stiffness, Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 3500.0)), epsilon = 1e-12);
        assert_relative_eq!(p.attachment.offset, Vector3::new(0.06, 0.0, 0.1), epsilon = 1e-14);
        assert_relative_eq!(spring_force(&p, &model, &q).unwrap(), fb.force, epsilon = 1e-9);
    }

    #[test]
    fn force_from_normal_deformation() {
        let model = RobotModel::planar3();
        let q = DVector::from_vec(vec![0.3, -0.2, 0.4]);
        let mut p = compute_theta(
            &feedback(&model, &q, 2, Vector3::new(0.0, 0.0, 0.1), Vector3::new(1.0, 0.0, 1.0)),
            &model,
            &q,
            3500.0,
        )
        .unwrap();
        let frames = FrameCache::new(&model, &q).unwrap();
        // At the rest location the spring is relaxed.
        p.rest_location = frames.point(&p.attachment);
        assert_relative_eq!(p.force_at(&frames), Vector3::zeros(), epsilon = 1e-15);
        // 4 mm along the normal: 3500 * 0.004 = 14 N.
        p.rest_location += p.normal() * 0.004;
        assert_relative_eq!(p.force_at(&frames).norm(), 14.0, epsilon = 1e-9);
        assert_relative_eq!(p.deformation_at(&frames), 0.004, epsilon = 1e-15);
    }

    #[test]
    fn external_torque_superposes() {
        let model = RobotModel::desk7();
        let q = q7();
        assert_eq!(external_torque(&[], &model, &q).unwrap(), DVector::zeros(7));
        let fb_a = feedback(&model, &q, 3, Vector3::new(0.06, 0.0, 0.1), Vector3::new(2.0, -5.0, 3.0));
        let fb_b = feedback(&model, &q, 7, Vector3::new(0.0, 0.0, 0.1), Vector3::new(-8.0, 1.0, 4.0));
        let a = compute_theta(&fb_a, &model, &q, 3500.0).unwrap();
        let b = compute_theta(&fb_b, &model, &q, 3500.0).unwrap();
        let frames = FrameCache::new(&model, &q).unwrap();
        let by_hand = frames.point_jacobian(&a.attachment).transpose() * fb_a.force
            + frames.point_jacobian(&b.attachment).transpose() * fb_b.force;
        let both = external_torque(&[a.clone(), b], &model, &q).unwrap();
        assert_relative_eq!(both, by_hand, epsilon = 1e-9);

        let mut relaxed = a;
        relaxed.rest_location = frames.point(&relaxed.attachment);
        assert_relative_eq!(external_torque(&[relaxed], &model, &q).unwrap(), DVector::zeros(7), epsilon = 1e-12);
    }

    #[test]
    fn zero_stiffness_jacobian_is_zero() {
        let model = RobotModel::desk7();
        let q = q7();
        let mut p =
            compute_theta(&feedback(&model, &q, 5, Vector3::zeros(), Vector3::new(0.0, 3.0, 0.0)), &model, &q, 3500.0)
                .unwrap();
        p.stiffness = Matrix3::zeros();
        assert_eq!(spring_force_jacobian(&p, &model, &q).unwrap().norm(), 0.0);
    }

    #[test]
    fn invalid_link_is_rejected() {
        let model = RobotModel::planar3();
        let q = DVector::zeros(3);
        let fb = ContactFeedback { position: Vector3::zeros(), force: Vector3::z() * 5.0, link: 4, timestamp: 0.0 };
        assert!(compute_theta(&fb, &model, &q, 3500.0).is_err());
        let fb = ContactFeedback { link: 1, ..fb };
        assert!(compute_theta(&fb, &model, &q, 0.0).is_err());
    }

    #[test]
    fn spring_derivatives_enter_dynamics() {
        let model = RobotModel::desk7();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = q7();
        let fb = feedback(&model, &q, 6, Vector3::new(0.05, 0.0, 0.05), Vector3::new(4.0, -9.0, 2.0));
        let p = compute_theta(&fb, &model, &q, 3500.0).unwrap();
        let state = JointState::new(q.add_scalar(0.02), DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0)));
        let frames = FrameCache::new(&model, &state.q).unwrap();
        let u = DVector::from_element(7, 3.0);
        let loads = point_loads(&[p], &frames);
        let an = forward_dynamics_derivatives(&model, &state, &u, &loads, DerivativeMode::Analytic).unwrap();
        let fd = forward_dynamics_derivatives(&model, &state, &u, &loads, DerivativeMode::FiniteDifference).unwrap();
        assert!((&an.da_dq - &fd.da_dq).norm() / fd.da_dq.norm() < 1e-5);
    }

    proptest! {
        #[test]
        fn closure_and_eigenstructure(
            q in proptest::collection::vec(-2.0f64..2.0, 7),
            link in 1usize..=7,
            offset in proptest::array::uniform3(-0.08f64..0.08),
            dir in proptest::array::uniform3(-1.0f64..1.0),
            magnitude in 0.6f64..40.0,
            k_env in 500.0f64..8000.0,
        ) {
            let dir = Vector3::from(dir);
            prop_assume!(dir.norm() > 1e-3);
            let model = RobotModel::desk7();
            let q = DVector::from_vec(q);
            let fb = feedback(&model, &q, link, Vector3::from(offset), dir.normalize() * magnitude);
            let p = compute_theta(&fb, &model, &q, k_env).unwrap();
            prop_assert!((spring_force(&p, &model, &q).unwrap() - fb.force).norm() < 1e-9);

            let eig = p.stiffness.symmetric_eigen();
            let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            values.sort_by(f64::total_cmp);
            prop_assert!(values[0].abs() < 1e-9 && values[1].abs() < 1e-9);
            prop_assert!((values[2] - k_env).abs() < 1e-9 * k_env.max(1.0));
            prop_assert!((p.stiffness - p.stiffness.transpose()).norm() < 1e-9);
        }

        #[test]
        fn tangential_motion_leaves_force_unchanged(
            dir in proptest::array::uniform3(-1.0f64..1.0),
            tangent in proptest::array::uniform2(-0.05f64..0.05),
            magnitude in 0.6f64..40.0,
        ) {
            let dir = Vector3::from(dir);
            prop_assume!(dir.norm() > 1e-3);
            let model = RobotModel::desk7();
            let q = q7();
            let fb = feedback(&model, &q, 7, Vector3::new(0.0, 0.0, 0.1), dir.normalize() * magnitude);
            let mut p = compute_theta(&fb, &model, &q, 3500.0).unwrap();
            let frames = FrameCache::new(&model, &q).unwrap();
            let before = p.force_at(&frames);
            // Moving the rest location tangentially is the same as moving the
            // contact point tangentially the other way.
            let shift = p.frame * Vector3::new(tangent[0], tangent[1], 0.0);
            p.rest_location -= shift;
            prop_assert!((p.force_at(&frames) - before).norm() < 1e-9);
        }

        #[test]
        fn jacobian_matches_finite_differences(
            q in proptest::collection::vec(-2.0f64..2.0, 7),
            link in 1usize..=7,
            dir in proptest::array::uniform3(-1.0f64..1.0),
        ) {
            let dir = Vector3::from(dir);
            prop_assume!(dir.norm() > 1e-3);
            let model = RobotModel::desk7();
            let q = DVector::from_vec(q);
            let fb = feedback(&model, &q, link, Vector3::new(0.03, -0.02, 0.05), dir.normalize() * 12.0);
            let p = compute_theta(&fb, &model, &q, 3500.0).unwrap();
            let qe = q.add_scalar(0.05);
            let jac = spring_force_jacobian(&p, &model, &qe).unwrap();
            let h = 1e-6;
            let mut fd = Matrix3xX::zeros(7);
            for j in 0..7 {
                let mut qp = qe.clone();
                qp[j] += h;
                let mut qm = qe.clone();
                qm[j] -= h;
                let col = (spring_force(&p, &model, &qp).unwrap() - spring_force(&p, &model, &qm).unwrap()) / (2.0 * h);
                fd.set_column(j, &col);
            }
            prop_assert!((&jac - &fd).norm() <= 1e-6 * fd.norm().max(1.0));
            // Every column lies along the contact normal.
            let n = p.normal();
            for j in 0..7 {
                prop_assert!((jac.column(j) - n * n.dot(&jac.column(j))).norm() < 1e-9);
            }
        }
    }
}
