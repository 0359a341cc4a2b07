//! Forward kinematics and point Jacobians.

use nalgebra::{DVector, Matrix3, Matrix3xX, Rotation3, Vector3};

use super::model::RobotModel;
use crate::{Error, Result};

/// A point rigidly attached to a link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyPoint {
    /// 1-based link index.
    pub link: usize,
    /// Position in the link frame (m).
    pub offset: Vector3<f64>,
}

impl BodyPoint {
    pub fn new(link: usize, offset: Vector3<f64>) -> Self {
        Self { link, offset }
    }

    pub(crate) fn check(&self, model: &RobotModel) -> Result<()> {
        if self.link == 0 || self.link > model.dof() {
            return Err(Error::InvalidArgument(format!("link index {} outside 1..={}", self.link, model.dof())));
        }
        Ok(())
    }
}

/// World-frame poses of every link for one configuration.
///
/// Entry `i` (0-based) describes link `i + 1`: its frame rotation, its origin
/// (the location of joint `i + 1`) and the world direction of joint `i + 1`.
#[derive(Debug, Clone)]
pub struct FrameCache {
    pub(crate) rotations: Vec<Matrix3<f64>>,
    pub(crate) origins: Vec<Vector3<f64>>,
    pub(crate) axes: Vec<Vector3<f64>>,
}

impl FrameCache {
    pub fn new(model: &RobotModel, q: &DVector<f64>) -> Result<Self> {
        model.check_configuration(q)?;
        let n = model.dof();
        let mut rotations = Vec::with_capacity(n);
        let mut origins = Vec::with_capacity(n);
        let mut axes = Vec::with_capacity(n);
        let mut parent_rotation = Matrix3::identity();
        let mut parent_origin = Vector3::zeros();
        for (joint, &qi) in model.joints().iter().zip(q.iter()) {
            let origin = parent_origin + parent_rotation * joint.origin.translation.vector;
            let rotation = parent_rotation
                * joint.origin.rotation.to_rotation_matrix().into_inner()
                * Rotation3::from_axis_angle(&joint.axis, qi).into_inner();
            axes.push(rotation * joint.axis.into_inner());
            rotations.push(rotation);
            origins.push(origin);
            parent_rotation = rotation;
            parent_origin = origin;
        }
        Ok(Self { rotations, origins, axes })
    }

    pub fn dof(&self) -> usize {
        self.origins.len()
    }

    /// Rotation of link `link` (1-based).
    pub fn link_rotation(&self, link: usize) -> &Matrix3<f64> {
        &self.rotations[link - 1]
    }

    /// Origin of link `link` (1-based).
    pub fn link_origin(&self, link: usize) -> &Vector3<f64> {
        &self.origins[link - 1]
    }

    /// World direction of joint `joint` (1-based).
    pub fn joint_axis(&self, joint: usize) -> &Vector3<f64> {
        &self.axes[joint - 1]
    }

    pub fn point(&self, p: &BodyPoint) -> Vector3<f64> {
        self.origins[p.link - 1] + self.rotations[p.link - 1] * p.offset
    }

    /// Link-frame offset of a world point, for the given link.
    pub fn to_link_frame(&self, link: usize, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotations[link - 1].transpose() * (world - self.origins[link - 1])
    }

    /// 3×n positional Jacobian of an arbitrary world point treated as fixed to `link`.
    pub fn world_point_jacobian(&self, link: usize, world: &Vector3<f64>) -> Matrix3xX<f64> {
        let n = self.dof();
        let mut jac = Matrix3xX::zeros(n);
        for j in 0..link {
            let column = self.axes[j].cross(&(world - self.origins[j]));
            jac.set_column(j, &column);
        }
        jac
    }

    pub fn point_jacobian(&self, p: &BodyPoint) -> Matrix3xX<f64> {
        self.world_point_jacobian(p.link, &self.point(p))
    }

    /// 3×n angular-velocity Jacobian of `link`.
    pub fn angular_jacobian(&self, link: usize) -> Matrix3xX<f64> {
        let mut jac = Matrix3xX::zeros(self.dof());
        for j in 0..link {
            jac.set_column(j, &self.axes[j]);
        }
        jac
    }

    /// End-effector position and orientation.
    pub fn end_effector(&self, model: &RobotModel) -> (Vector3<f64>, Rotation3<f64>) {
        let n = self.dof();
        let ee = model.end_effector();
        let rotation = self.rotations[n - 1] * ee.rotation.to_rotation_matrix().into_inner();
        let position = self.origins[n - 1] + self.rotations[n - 1] * ee.translation.vector;
        (position, Rotation3::from_matrix_unchecked(rotation))
    }

    /// End-effector position as a body point on the last link.
    pub fn end_effector_point(model: &RobotModel) -> BodyPoint {
        BodyPoint::new(model.dof(), model.end_effector().translation.vector)
    }
}

/// World position of a body point and world orientation of its link.
pub fn forward_kinematics(
    model: &RobotModel,
    q: &DVector<f64>,
    p: &BodyPoint,
) -> Result<(Vector3<f64>, Rotation3<f64>)> {
    p.check(model)?;
    let frames = FrameCache::new(model, q)?;
    Ok((frames.point(p), Rotation3::from_matrix_unchecked(*frames.link_rotation(p.link))))
}

/// Positional Jacobian `J` of a body point: world point velocity = `J·v`.
pub fn point_jacobian(model: &RobotModel, q: &DVector<f64>, p: &BodyPoint) -> Result<Matrix3xX<f64>> {
    p.check(model)?;
    let frames = FrameCache::new(model, q)?;
    Ok(frames.point_jacobian(p))
}
