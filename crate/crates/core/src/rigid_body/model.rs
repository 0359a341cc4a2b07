//! Serial-chain robot description and its text document format.

use nalgebra::{DVector, Isometry3, Matrix3, Rotation3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Version of the robot model document understood by [`RobotModel::from_toml_str`].
pub const MODEL_FORMAT_VERSION: u32 = 1;

const AXIS_NORM_TOL: f64 = 1e-12;

/// A revolute joint: fixed transform from the parent link frame followed by a
/// rotation about `axis` (expressed in the joint frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub origin: Isometry3<f64>,
    pub axis: Unit<Vector3<f64>>,
}

/// Inertial properties of the link that follows a joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    /// kg
    pub mass: f64,
    /// Centre of mass in the link frame (m).
    pub com: Vector3<f64>,
    /// Rotational inertia about the centre of mass, link-frame axes (kg·m²).
    pub inertia: Matrix3<f64>,
}

/// Joint position, velocity and torque limits.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLimits {
    pub q_min: DVector<f64>,
    pub q_max: DVector<f64>,
    pub v_max: DVector<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
}

/// Kinematic and inertial description of an n-joint revolute serial chain.
///
/// Link indices are 1-based throughout the crate: link `k` is the body moved
/// by joint `k`, link 0 is the fixed base.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub name: String,
    joints: Vec<Joint>,
    links: Vec<Link>,
    limits: JointLimits,
    gravity: Vector3<f64>,
    end_effector: Isometry3<f64>,
    damping: DVector<f64>,
}

impl RobotModel {
    pub fn new(
        name: impl Into<String>,
        joints: Vec<Joint>,
        links: Vec<Link>,
        limits: JointLimits,
        gravity: Vector3<f64>,
        end_effector: Isometry3<f64>,
    ) -> Result<Self> {
        let n = joints.len();
        let model =
            Self { name: name.into(), damping: DVector::zeros(n), joints, links, limits, gravity, end_effector };
        model.validate()?;
        Ok(model)
    }

    /// Returns a copy with per-joint viscous damping (N·m·s/rad).
    ///
    /// Damping is meant for plant models; controller models keep it at zero.
    pub fn with_damping(mut self, damping: DVector<f64>) -> Result<Self> {
        if damping.len() != self.dof() || damping.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidModel("damping must be finite, non-negative and one entry per joint".into()));
        }
        self.damping = damping;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.joints.len();
        if n == 0 {
            return Err(Error::InvalidModel("chain has no joints".into()));
        }
        if self.links.len() != n {
            return Err(Error::InvalidModel(format!("{} joints but {} links", n, self.links.len())));
        }
        let l = &self.limits;
        for (label, v) in
            [("q_min", &l.q_min), ("q_max", &l.q_max), ("v_max", &l.v_max), ("u_min", &l.u_min), ("u_max", &l.u_max)]
        {
            if v.len() != n {
                return Err(Error::InvalidModel(format!("{label} has {} entries, expected {n}", v.len())));
            }
        }
        for i in 0..n {
            if !(l.q_min[i] < l.q_max[i]) {
                return Err(Error::InvalidModel(format!("joint {}: q_min >= q_max", i + 1)));
            }
            if !(l.u_min[i] < l.u_max[i]) {
                return Err(Error::InvalidModel(format!("joint {}: u_min >= u_max", i + 1)));
            }
            if !(l.v_max[i] > 0.0) {
                return Err(Error::InvalidModel(format!("joint {}: v_max must be positive", i + 1)));
            }
        }
        for (i, joint) in self.joints.iter().enumerate() {
            if (joint.axis.norm() - 1.0).abs() > AXIS_NORM_TOL {
                return Err(Error::InvalidModel(format!("joint {}: axis is not unit length", i + 1)));
            }
        }
        for (i, link) in self.links.iter().enumerate() {
            if !(link.mass > 0.0) {
                return Err(Error::InvalidModel(format!("link {}: mass must be positive", i + 1)));
            }
            let inertia = &link.inertia;
            if (inertia - inertia.transpose()).amax() > 1e-12 {
                return Err(Error::InvalidModel(format!("link {}: inertia not symmetric", i + 1)));
            }
            if inertia.cholesky().is_none() {
                return Err(Error::InvalidModel(format!("link {}: inertia not positive-definite", i + 1)));
            }
        }
        if !self.gravity.iter().all(|g| g.is_finite()) {
            return Err(Error::InvalidModel("gravity must be finite".into()));
        }
        Ok(())
    }

    /// Number of joints.
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn limits(&self) -> &JointLimits {
        &self.limits
    }

    pub fn gravity(&self) -> &Vector3<f64> {
        &self.gravity
    }

    /// End-effector frame relative to the last link.
    pub fn end_effector(&self) -> &Isometry3<f64> {
        &self.end_effector
    }

    pub fn damping(&self) -> &DVector<f64> {
        &self.damping
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }

    pub(crate) fn check_configuration(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::InvalidArgument(format!(
                "configuration has {} entries, model has {} joints",
                q.len(),
                self.dof()
            )));
        }
        Ok(())
    }

    /// Parses a robot model document (see `models/*.toml` for the layout).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: ModelDocument = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        doc.into_model()
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Generic 7-DOF desk-scale arm shipped with the crate.
    pub fn desk7() -> Self {
        Self::from_toml_str(include_str!("../../models/desk7.toml")).expect("bundled desk7 model is valid")
    }

    /// Planar 3-DOF arm in the xz-plane, for fast tests.
    pub fn planar3() -> Self {
        Self::from_toml_str(include_str!("../../models/planar3.toml")).expect("bundled planar3 model is valid")
    }

    /// Looks up a bundled model by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "desk7" => Some(Self::desk7()),
            "planar3" => Some(Self::planar3()),
            _ => None,
        }
    }

    /// Single revolute joint about world y carrying a concentrated mass at
    /// distance `length` along the link z-axis. `inertia` is the (small)
    /// isotropic rotational inertia about the mass centre.
    pub fn pendulum(mass: f64, length: f64, inertia: f64) -> Result<Self> {
        Self::new(
            "pendulum",
            vec![Joint { name: "j1".into(), origin: Isometry3::identity(), axis: Vector3::y_axis() }],
            vec![Link { mass, com: Vector3::new(0.0, 0.0, length), inertia: Matrix3::identity() * inertia }],
            JointLimits {
                q_min: DVector::from_element(1, -10.0),
                q_max: DVector::from_element(1, 10.0),
                v_max: DVector::from_element(1, 50.0),
                u_min: DVector::from_element(1, -100.0),
                u_max: DVector::from_element(1, 100.0),
            },
            Vector3::new(0.0, 0.0, -9.81),
            Isometry3::translation(0.0, 0.0, length),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    format_version: u32,
    name: String,
    gravity_m_per_s2: [f64; 3],
    end_effector: FrameEntry,
    joints: Vec<JointEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    translation_m: [f64; 3],
    rpy_rad: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointEntry {
    name: String,
    origin_translation_m: [f64; 3],
    origin_rpy_rad: [f64; 3],
    axis: [f64; 3],
    q_min_rad: f64,
    q_max_rad: f64,
    v_max_rad_per_s: f64,
    u_min_nm: f64,
    u_max_nm: f64,
    damping_nm_s_per_rad: f64,
    mass_kg: f64,
    com_m: [f64; 3],
    /// `[ixx, iyy, izz, ixy, ixz, iyz]`
    inertia_kgm2: [f64; 6],
}

fn isometry(translation: [f64; 3], rpy: [f64; 3]) -> Isometry3<f64> {
    let rotation = Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]);
    Isometry3::from_parts(
        Translation3::new(translation[0], translation[1], translation[2]),
        UnitQuaternion::from_rotation_matrix(&rotation),
    )
}

impl ModelDocument {
    fn into_model(self) -> Result<RobotModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported format_version {} (expected {MODEL_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let n = self.joints.len();
        let mut joints = Vec::with_capacity(n);
        let mut links = Vec::with_capacity(n);
        let mut limits = JointLimits {
            q_min: DVector::zeros(n),
            q_max: DVector::zeros(n),
            v_max: DVector::zeros(n),
            u_min: DVector::zeros(n),
            u_max: DVector::zeros(n),
        };
        let mut damping = DVector::zeros(n);
        for (i, j) in self.joints.into_iter().enumerate() {
            let axis = Vector3::from(j.axis);
            if (axis.norm() - 1.0).abs() > AXIS_NORM_TOL {
                return Err(Error::InvalidModel(format!("joint {}: axis is not unit length", j.name)));
            }
            joints.push(Joint {
                name: j.name,
                origin: isometry(j.origin_translation_m, j.origin_rpy_rad),
                axis: Unit::new_unchecked(axis),
            });
            let [ixx, iyy, izz, ixy, ixz, iyz] = j.inertia_kgm2;
            links.push(Link {
                mass: j.mass_kg,
                com: Vector3::from(j.com_m),
                inertia: Matrix3::new(ixx, ixy, ixz, ixy, iyy, iyz, ixz, iyz, izz),
            });
            limits.q_min[i] = j.q_min_rad;
            limits.q_max[i] = j.q_max_rad;
            limits.v_max[i] = j.v_max_rad_per_s;
            limits.u_min[i] = j.u_min_nm;
            limits.u_max[i] = j.u_max_nm;
            damping[i] = j.damping_nm_s_per_rad;
        }
        RobotModel::new(
            self.name,
            joints,
            links,
            limits,
            Vector3::from(self.gravity_m_per_s2),
            isometry(self.end_effector.translation_m, self.end_effector.rpy_rad),
        )?
        .with_damping(damping)
    }
}
