//! Ground-truth plant: the arm, penalty half-spaces and scripted pushes.

use std::sync::Arc;

use contact_mpc::rigid_body::{
    forward_dynamics, kinetic_energy, potential_energy, BodyPoint, FrameCache, JointState, PointLoad, RobotModel,
};
use nalgebra::{DVector, Unit, Vector3};

use crate::{Result, SimError};

/// Solid occupying `normal · p < offset`; free space is `normal · p ≥ offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace {
    pub normal: Unit<Vector3<f64>>,
    pub offset: f64,
}

impl HalfSpace {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentObject {
    pub name: String,
    pub surface: HalfSpace,
    /// k_true (N/m).
    pub stiffness: f64,
    /// Viscous damping on penetration rate (N·s/m).
    pub damping: f64,
}

/// A sphere of radius `radius` centred on a body point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub point: BodyPoint,
    pub radius: f64,
}

/// Probe spheres spread along each link segment plus the end-effector tip.
///
/// Link `i` spans from its origin to the origin of link `i + 1` (the last link
/// spans to the end-effector). Probes sit at the centres of `per_link` equal
/// slices of that segment.
pub fn default_probes(model: &RobotModel, per_link: usize, radius: f64, tip: bool) -> Vec<Probe> {
    let n = model.dof();
    let mut probes = Vec::with_capacity(n * per_link + 1);
    for link in 1..=n {
        let end = if link < n {
            model.joints()[link].origin.translation.vector
        } else {
            model.end_effector().translation.vector
        };
        for k in 0..per_link {
            let s = (k as f64 + 0.5) / per_link as f64;
            probes.push(Probe { point: BodyPoint::new(link, end * s), radius });
        }
    }
    if tip {
        probes.push(Probe { point: FrameCache::end_effector_point(model), radius: 0.0 });
    }
    probes
}

/// Force profile of a scripted push: linear ramp to the peak, hold, linear
/// release.
#[derive(Debug, Clone, PartialEq)]
pub struct Disturbance {
    pub name: String,
    pub point: BodyPoint,
    /// Direction of the force on the robot.
    pub direction: Unit<Vector3<f64>>,
    pub peak_force: f64,
    pub start: f64,
    pub ramp: f64,
    pub hold: f64,
    pub release: f64,
    /// Compliance of the pusher (N/m): the force drops by this much per metre
    /// the point yields along `direction`.
    pub stiffness: f64,
}

impl Disturbance {
    /// Force the pusher applies when the point has not moved.
    pub fn nominal_force(&self, t: f64) -> f64 {
        let local = t - self.start;
        let ramp_end = self.ramp;
        let hold_end = ramp_end + self.hold;
        let release_end = hold_end + self.release;
        if local < 0.0 || local >= release_end {
            0.0
        } else if local < ramp_end {
            self.peak_force * local / self.ramp
        } else if local < hold_end {
            self.peak_force
        } else {
            self.peak_force * (release_end - local) / self.release
        }
    }

    pub fn active(&self, t: f64) -> bool {
        let local = t - self.start;
        local >= 0.0 && local < self.ramp + self.hold + self.release
    }
}

/// Where a true contact force comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactSource {
    Environment(usize),
    Disturbance(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrueContact {
    pub source: ContactSource,
    pub point: BodyPoint,
    /// Point of application, world frame.
    pub position: Vector3<f64>,
    /// Penetration depth (m); zero for pushes.
    pub penetration: f64,
    /// Force on the robot, world frame.
    pub force: Vector3<f64>,
}

impl TrueContact {
    pub fn link(&self) -> usize {
        self.point.link
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub joints: JointState,
    pub time: f64,
    /// Contacts active at `joints`.
    pub contacts: Vec<TrueContact>,
    /// Position of each push point when its push started.
    pub push_anchors: Vec<Option<Vector3<f64>>>,
}

#[derive(Debug, Clone)]
pub struct Plant {
    pub model: Arc<RobotModel>,
    pub environment: Vec<EnvironmentObject>,
    pub probes: Vec<Probe>,
    pub disturbances: Vec<Disturbance>,
    /// Tick length (s).
    pub dt: f64,
    /// Semi-implicit Euler steps per tick.
    pub substeps: usize,
}

impl Plant {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.substeps == 0 {
            return Err(SimError::Config(format!(
                "plant needs dt > 0 and at least one substep, got {} / {}",
                self.dt, self.substeps
            )));
        }
        for obj in &self.environment {
            if !(obj.stiffness > 0.0) || !(obj.damping >= 0.0) {
                return Err(SimError::Config(format!(
                    "environment object '{}' needs k_true > 0 and damping ≥ 0",
                    obj.name
                )));
            }
        }
        for d in &self.disturbances {
            let n = self.model.dof();
            if d.point.link == 0 || d.point.link > n {
                return Err(SimError::Config(format!(
                    "disturbance '{}' on link {} outside 1..={n}",
                    d.name, d.point.link
                )));
            }
            if !(d.stiffness > 0.0) || !(d.ramp > 0.0) || d.hold < 0.0 || !(d.release > 0.0) || d.peak_force < 0.0 {
                return Err(SimError::Config(format!("disturbance '{}' has an invalid profile", d.name)));
            }
        }
        Ok(())
    }

    pub fn initial_state(&self, joints: JointState) -> Result<PlantState> {
        let mut state =
            PlantState { joints, time: 0.0, contacts: Vec::new(), push_anchors: vec![None; self.disturbances.len()] };
        self.update_anchors(&mut state)?;
        state.contacts = self.contacts(&state.joints, state.time, &state.push_anchors)?;
        Ok(state)
    }

    /// True contacts at a joint state.
    pub fn contacts(
        &self,
        joints: &JointState,
        time: f64,
        anchors: &[Option<Vector3<f64>>],
    ) -> Result<Vec<TrueContact>> {
        let frames = FrameCache::new(&self.model, &joints.q)?;
        let mut contacts = Vec::new();
        for probe in &self.probes {
            let centre = frames.point(&probe.point);
            for (index, obj) in self.environment.iter().enumerate() {
                let penetration = probe.radius - obj.surface.signed_distance(&centre);
                if penetration <= 0.0 {
                    continue;
                }
                let mut magnitude = obj.stiffness * penetration;
                if obj.damping > 0.0 {
                    let velocity = frames.point_jacobian(&probe.point) * &joints.v;
                    magnitude -= obj.damping * obj.surface.normal.dot(&velocity);
                }
                contacts.push(TrueContact {
                    source: ContactSource::Environment(index),
                    point: probe.point,
                    position: centre,
                    penetration,
                    force: magnitude.max(0.0) * obj.surface.normal.into_inner(),
                });
            }
        }
        for (index, d) in self.disturbances.iter().enumerate() {
            let Some(anchor) = anchors[index] else { continue };
            if !d.active(time) {
                continue;
            }
            let position = frames.point(&d.point);
            let yielded = d.direction.dot(&(position - anchor));
            let magnitude = (d.nominal_force(time) - d.stiffness * yielded).max(0.0);
            if magnitude > 0.0 {
                contacts.push(TrueContact {
                    source: ContactSource::Disturbance(index),
                    point: d.point,
                    position,
                    penetration: 0.0,
                    force: magnitude * d.direction.into_inner(),
                });
            }
        }
        Ok(contacts)
    }

    fn update_anchors(&self, state: &mut PlantState) -> Result<()> {
        for (index, d) in self.disturbances.iter().enumerate() {
            if d.active(state.time) {
                if state.push_anchors[index].is_none() {
                    let frames = FrameCache::new(&self.model, &state.joints.q)?;
                    state.push_anchors[index] = Some(frames.point(&d.point));
                }
            } else {
                state.push_anchors[index] = None;
            }
        }
        Ok(())
    }

    /// Advances one tick under joint torques `u`.
    pub fn step(&self, state: &PlantState, u: &DVector<f64>) -> Result<PlantState> {
        let mut next = state.clone();
        let h = self.dt / self.substeps as f64;
        for k in 0..self.substeps {
            let t = state.time + k as f64 * h;
            let loads: Vec<PointLoad> = self
                .contacts(&next.joints, t, &next.push_anchors)?
                .into_iter()
                .map(|c| PointLoad::constant(c.point, c.force))
                .collect();
            let a = forward_dynamics(&self.model, &next.joints, u, &loads)
                .map_err(|e| self.diverged(&next, e.to_string()))?;
            next.joints.v += a * h;
            next.joints.q += &next.joints.v * h;
            if !next.joints.is_finite() {
                return Err(self.diverged(&next, "non-finite joint state".into()));
            }
        }
        next.time = state.time + self.dt;
        self.update_anchors(&mut next)?;
        next.contacts = self.contacts(&next.joints, next.time, &next.push_anchors)?;
        Ok(next)
    }

    fn diverged(&self, state: &PlantState, reason: String) -> SimError {
        SimError::Diverged {
            time: state.time,
            reason,
            q: state.joints.q.as_slice().to_vec(),
            v: state.joints.v.as_slice().to_vec(),
        }
    }

    /// Kinetic plus gravitational plus spring energy (J). Pushes and damping
    /// are not conservative and are excluded.
    pub fn energy(&self, joints: &JointState) -> Result<f64> {
        let mut energy = kinetic_energy(&self.model, joints)? + potential_energy(&self.model, &joints.q)?;
        let frames = FrameCache::new(&self.model, &joints.q)?;
        for probe in &self.probes {
            let centre = frames.point(&probe.point);
            for obj in &self.environment {
                let penetration = probe.radius - obj.surface.signed_distance(&centre);
                if penetration > 0.0 {
                    energy += 0.5 * obj.stiffness * penetration * penetration;
                }
            }
        }
        Ok(energy)
    }
}

/// Free-function form of [`Plant::step`].
pub fn plant_step(plant: &Plant, state: &PlantState, u: &DVector<f64>) -> Result<PlantState> {
    plant.step(state, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use contact_mpc::rigid_body::gravity_torques;

    fn floor(offset: f64, stiffness: f64) -> EnvironmentObject {
        EnvironmentObject {
            name: "floor".into(),
            surface: HalfSpace { normal: Vector3::z_axis(), offset },
            stiffness,
            damping: 0.0,
        }
    }

    fn pendulum_plant(environment: Vec<EnvironmentObject>) -> Plant {
        let model = Arc::new(RobotModel::pendulum(1.0, 0.5, 1e-4).unwrap());
        let probes = vec![Probe { point: BodyPoint::new(1, Vector3::new(0.0, 0.0, 0.5)), radius: 0.0 }];
        Plant { model, environment, probes, disturbances: Vec::new(), dt: 1e-3, substeps: 1 }
    }

    #[test]
    fn two_millimetres_into_a_3500_wall_gives_seven_newtons() {
        // Pendulum pointing down puts the tip at z = −0.5.
        let plant = pendulum_plant(vec![floor(-0.498, 3500.0)]);
        let joints = JointState::at_rest(DVector::from_element(1, std::f64::consts::PI));
        let state = plant.initial_state(joints).unwrap();
        assert_eq!(state.contacts.len(), 1);
        assert_relative_eq!(state.contacts[0].penetration, 0.002, epsilon = 1e-12);
        assert_relative_eq!(state.contacts[0].force, Vector3::new(0.0, 0.0, 7.0), epsilon = 1e-9);
    }

    #[test]
    fn contact_free_step_matches_dynamics() {
        let plant = pendulum_plant(vec![floor(-2.0, 3500.0)]);
        let joints = JointState::at_rest(DVector::from_element(1, 0.7));
        let state = plant.initial_state(joints.clone()).unwrap();
        assert!(state.contacts.is_empty());
        let u = DVector::from_element(1, 0.3);
        let next = plant.step(&state, &u).unwrap();
        let a = forward_dynamics(&plant.model, &joints, &u, &[]).unwrap();
        assert_relative_eq!(next.joints.v, &a * 1e-3, epsilon = 1e-15);
        assert_relative_eq!(next.joints.q, &joints.q + &a * 1e-6, epsilon = 1e-15);
        assert_eq!(next.time, 1e-3);
    }

    #[test]
    fn damping_never_pulls() {
        let mut wall = floor(-0.498, 3500.0);
        wall.damping = 1e4;
        let plant = pendulum_plant(vec![wall]);
        // Tip moving up out of the floor fast.
        let joints =
            JointState::new(DVector::from_element(1, std::f64::consts::PI - 0.001), DVector::from_element(1, 5.0));
        let state = plant.initial_state(joints).unwrap();
        assert!(state.contacts.iter().all(|c| c.force.z >= 0.0));
    }

    #[test]
    fn push_enters_like_a_contact() {
        let model = Arc::new(RobotModel::desk7());
        let point = BodyPoint::new(3, Vector3::new(0.0, 0.0, 0.1));
        let push = Disturbance {
            name: "push".into(),
            point,
            direction: Vector3::y_axis(),
            peak_force: 25.0,
            start: 0.0,
            ramp: 0.5,
            hold: 1.0,
            release: 0.2,
            stiffness: 1000.0,
        };
        let plant = Plant {
            model: model.clone(),
            environment: Vec::new(),
            probes: Vec::new(),
            disturbances: vec![push],
            dt: 1e-3,
            substeps: 1,
        };
        let q = DVector::from_vec(vec![0.0, 0.6, 0.0, -1.4, 0.0, 0.8, 0.0]);
        let mut state = plant.initial_state(JointState::at_rest(q.clone())).unwrap();
        state.time = 0.25;
        state.contacts = plant.contacts(&state.joints, state.time, &state.push_anchors).unwrap();
        assert_eq!(state.contacts.len(), 1);
        assert_relative_eq!(state.contacts[0].force, Vector3::new(0.0, 12.5, 0.0), epsilon = 1e-12);

        let u = gravity_torques(&model, &q).unwrap();
        let next = plant.step(&state, &u).unwrap();
        let load = PointLoad::constant(point, Vector3::new(0.0, 12.5, 0.0));
        let a = forward_dynamics(&model, &state.joints, &u, &[load]).unwrap();
        assert_relative_eq!(next.joints.v, a * 1e-3, epsilon = 1e-12);
    }

    #[test]
    fn push_profile() {
        let d = Disturbance {
            name: "p".into(),
            point: BodyPoint::new(1, Vector3::zeros()),
            direction: Vector3::x_axis(),
            peak_force: 25.0,
            start: 1.0,
            ramp: 0.5,
            hold: 2.0,
            release: 0.5,
            stiffness: 1000.0,
        };
        assert_eq!(d.nominal_force(0.99), 0.0);
        assert_relative_eq!(d.nominal_force(1.25), 12.5);
        assert_eq!(d.nominal_force(2.0), 25.0);
        assert_relative_eq!(d.nominal_force(3.75), 12.5, epsilon = 1e-12);
        assert_eq!(d.nominal_force(4.0), 0.0);
    }

    #[test]
    fn yielding_relieves_the_push() {
        let model = Arc::new(RobotModel::pendulum(1.0, 0.5, 1e-4).unwrap());
        let point = BodyPoint::new(1, Vector3::new(0.0, 0.0, 0.5));
        let d = Disturbance {
            name: "p".into(),
            point,
            direction: Vector3::x_axis(),
            peak_force: 10.0,
            start: 0.0,
            ramp: 1e-9,
            hold: 10.0,
            release: 1.0,
            stiffness: 1000.0,
        };
        let plant = Plant { model, environment: vec![], probes: vec![], disturbances: vec![d], dt: 1e-3, substeps: 1 };
        let state = plant.initial_state(JointState::at_rest(DVector::from_element(1, 0.0))).unwrap();
        // Tilting about y moves the tip along +x by 0.5·sin(φ).
        let tilted = JointState::at_rest(DVector::from_element(1, (0.004f64 / 0.5).asin()));
        let contacts = plant.contacts(&tilted, 0.5, &state.push_anchors).unwrap();
        assert_relative_eq!(contacts[0].force.x, 6.0, epsilon = 1e-9);
    }

    #[test]
    fn probes_cover_every_link_and_the_tip() {
        let model = RobotModel::desk7();
        let probes = default_probes(&model, 5, 0.05, true);
        assert_eq!(probes.len(), 36);
        for link in 1..=7 {
            assert_eq!(probes.iter().filter(|p| p.point.link == link).count(), if link == 7 { 6 } else { 5 });
        }
        assert_eq!(probes.last().unwrap().radius, 0.0);
    }

    #[test]
    fn energy_includes_springs() {
        let plant = pendulum_plant(vec![floor(-0.498, 3500.0)]);
        let joints = JointState::at_rest(DVector::from_element(1, std::f64::consts::PI));
        let e = plant.energy(&joints).unwrap();
        let pe = potential_energy(&plant.model, &joints.q).unwrap();
        assert_relative_eq!(e - pe, 0.5 * 3500.0 * 0.002f64.powi(2), epsilon = 1e-12);
    }
}
