//! Scripted end-effector targets.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::costs::CostConfig;
use crate::{Error, Result};

/// How the position target moves during a phase. Times are relative to the
/// phase start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    /// Constant target: the phase's `target_position`.
    Hold,
    /// Straight line from `from_m` to the phase's `target_position`, with a
    /// smooth start and stop.
    Line { from_m: [f64; 3], duration_s: f64 },
    /// Circle in the world yz-plane, x held at the centre's value. Starts at
    /// `centre + radius·(0, cos φ₀, sin φ₀)`.
    Circle { centre_m: [f64; 3], radius_m: f64, period_s: f64, start_angle_rad: f64 },
}

impl Motion {
    pub fn position(&self, hold: &Vector3<f64>, t: f64) -> Vector3<f64> {
        match self {
            Motion::Hold => *hold,
            Motion::Line { from_m, duration_s } => {
                let s = if *duration_s > 0.0 { (t / duration_s).clamp(0.0, 1.0) } else { 1.0 };
                let blend = s * s * (3.0 - 2.0 * s);
                Vector3::from(*from_m) + blend * (hold - Vector3::from(*from_m))
            }
            Motion::Circle { centre_m, radius_m, period_s, start_angle_rad } => {
                let angle = start_angle_rad + 2.0 * std::f64::consts::PI * t / period_s;
                Vector3::from(*centre_m) + *radius_m * Vector3::new(0.0, angle.cos(), angle.sin())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Motion::Hold => true,
            Motion::Line { duration_s, .. } => *duration_s >= 0.0,
            Motion::Circle { radius_m, period_s, .. } => *radius_m >= 0.0 && *period_s > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid motion {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub name: String,
    /// Start time (s).
    pub start: f64,
    /// Cost configuration; its target position is the hold/line end point.
    pub costs: CostConfig,
    pub motion: Motion,
}

/// Phases sorted by start time. Before the first phase the first phase's
/// initial target is held.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSchedule {
    phases: Vec<Phase>,
}

impl PhaseSchedule {
    pub fn new(phases: Vec<Phase>) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::InvalidArgument("phase schedule is empty".into()));
        }
        for w in phases.windows(2) {
            if !(w[0].start < w[1].start) {
                return Err(Error::InvalidArgument(format!(
                    "phase '{}' does not start after '{}'",
                    w[1].name, w[0].name
                )));
            }
        }
        for p in &phases {
            p.motion.validate()?;
        }
        Ok(Self { phases })
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    /// Index of the phase active at `t`.
    pub fn index_at(&self, t: f64) -> usize {
        self.phases.iter().rposition(|p| p.start <= t).unwrap_or(0)
    }

    /// Phase index and the cost configuration with its target at time `t`.
    pub fn config_at(&self, t: f64) -> (usize, CostConfig) {
        let index = self.index_at(t);
        let phase = &self.phases[index];
        let local = (t - phase.start).max(0.0);
        let mut costs = phase.costs.clone();
        costs.target_position = phase.motion.position(&phase.costs.target_position, local);
        (index, costs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rigid_body::RobotModel;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;

    fn schedule() -> PhaseSchedule {
        let model = RobotModel::desk7();
        let base = CostConfig::regulation(&model, Vector3::new(0.5, 0.0, 0.4), Rotation3::identity());
        PhaseSchedule::new(vec![
            Phase {
                name: "approach".into(),
                start: 1.0,
                costs: base.clone(),
                motion: Motion::Line { from_m: [0.3, 0.0, 0.6], duration_s: 2.0 },
            },
            Phase {
                name: "circle".into(),
                start: 4.0,
                costs: base.clone(),
                motion: Motion::Circle {
                    centre_m: [0.5, 0.0, 0.4],
                    radius_m: 0.05,
                    period_s: 5.0,
                    start_angle_rad: 0.0,
                },
            },
            Phase { name: "hold".into(), start: 14.0, costs: base, motion: Motion::Hold },
        ])
        .unwrap()
    }

    #[test]
    fn before_first_phase_holds_initial_target() {
        let s = schedule();
        let (i, c) = s.config_at(0.2);
        assert_eq!(i, 0);
        assert_relative_eq!(c.target_position, Vector3::new(0.3, 0.0, 0.6), epsilon = 1e-15);
    }

    #[test]
    fn line_reaches_end_point() {
        let s = schedule();
        assert_relative_eq!(s.config_at(2.0).1.target_position, Vector3::new(0.4, 0.0, 0.5), epsilon = 1e-12);
        assert_relative_eq!(s.config_at(3.5).1.target_position, Vector3::new(0.5, 0.0, 0.4), epsilon = 1e-15);
    }

    #[test]
    fn circle_stays_in_yz_plane() {
        let s = schedule();
        for k in 0..100 {
            let t = 4.0 + k as f64 * 0.1;
            let p = s.config_at(t).1.target_position;
            assert_eq!(p.x, 0.5);
            assert_relative_eq!(((p.y).powi(2) + (p.z - 0.4).powi(2)).sqrt(), 0.05, epsilon = 1e-12);
        }
        // A quarter period later the target is at the top of the circle.
        assert_relative_eq!(s.config_at(5.25).1.target_position, Vector3::new(0.5, 0.0, 0.45), epsilon = 1e-12);
    }

    #[test]
    fn each_boundary_switches_once() {
        let s = schedule();
        let mut switches = 0;
        let mut last = s.index_at(0.0);
        for k in 0..20_000 {
            let i = s.index_at(k as f64 * 1e-3);
            if i != last {
                switches += 1;
                assert_eq!(i, last + 1);
                last = i;
            }
        }
        assert_eq!(switches, 2);
        assert_eq!(s.index_at(4.0), 1);
        assert_eq!(s.index_at(4.0 - 1e-12), 0);
    }

    #[test]
    fn unsorted_phases_are_rejected() {
        let mut phases = schedule().phases().to_vec();
        phases.swap(0, 1);
        assert!(PhaseSchedule::new(phases).is_err());
        assert!(PhaseSchedule::new(vec![]).is_err());
    }
}
