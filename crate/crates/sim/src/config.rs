//! Scenario files (TOML) and their resolution into runnable parts.
//!
//! Every field carries its unit in its name. Gains and contact sets have no
//! defaults: the shipped files under `scenarios/` spell them out.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use contact_mpc::costs::CostConfig;
use contact_mpc::mpc::{Motion, MpcSettings, Phase, PhaseSchedule};
use contact_mpc::rigid_body::{BodyPoint, FrameCache, JointState, RobotModel};
use nalgebra::{DVector, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::oracle::OracleNoise;
use crate::plant::{default_probes, Disturbance, EnvironmentObject, HalfSpace, Plant};
use crate::{Result, SimError};

pub const SCENARIO_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Plant, oracle and controller interleaved in one thread.
    Deterministic,
    /// Controller in its own thread, paced by the wall clock.
    Realtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub format_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seed: u64,
    pub duration_s: f64,
    pub mode: RunMode,
    pub robot: RobotSection,
    pub plant: PlantSection,
    #[serde(default)]
    pub environment: Vec<EnvironmentSection>,
    #[serde(default)]
    pub disturbance: Vec<DisturbanceSection>,
    pub oracle: OracleSection,
    pub controller: MpcSettings,
    pub costs: CostSection,
    pub phase: Vec<PhaseSection>,
    pub metrics: MetricsSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSection {
    /// Bundled model name (`desk7`, `planar3`) or a model file path relative
    /// to the scenario file.
    pub model: String,
    pub initial_q_rad: Vec<f64>,
    /// Viscous joint damping of the plant only; the controller model has none.
    #[serde(default)]
    pub plant_damping_nm_s_per_rad: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub rate_hz: u64,
    /// Semi-implicit Euler steps per plant tick.
    pub substeps: usize,
    pub probes_per_link: usize,
    pub body_probe_radius_m: f64,
    pub tip_probe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSection {
    pub name: String,
    /// Outward normal of the solid (points into free space).
    pub normal: [f64; 3],
    /// Free space is `normal · p ≥ offset_m`.
    pub offset_m: f64,
    pub stiffness_n_per_m: f64,
    pub damping_n_s_per_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    pub name: String,
    /// 1-based link.
    pub link: usize,
    /// Point of application in the link frame.
    pub offset_m: [f64; 3],
    /// Direction of the force on the robot, world frame.
    pub direction: [f64; 3],
    pub peak_force_n: f64,
    pub start_s: f64,
    pub ramp_s: f64,
    pub hold_s: f64,
    pub release_s: f64,
    pub stiffness_n_per_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub rate_hz: u64,
    pub noise: OracleNoise,
}

/// `"initial"` (the end-effector orientation at the initial configuration) or
/// roll-pitch-yaw angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrientationTarget {
    Named(String),
    RpyRad([f64; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub velocity_weight: f64,
    pub position_weight: f64,
    pub orientation_weight: f64,
    pub control_weight: f64,
    pub regulation_weight: f64,
    pub barrier_weight: f64,
    pub target_orientation: OrientationTarget,
    /// Desired force on regulated links (force on the robot, world frame).
    pub target_force_n: [f64; 3],
    pub force_selector: [f64; 3],
    /// One limit per link.
    pub force_limit_n: Vec<f64>,
    pub barrier_scale: f64,
    pub smooth_barrier: bool,
    pub barrier_links: Vec<usize>,
    pub regulation_links: Vec<usize>,
    pub state_limit_weight: f64,
    pub state_limit_margin: f64,
}

/// Per-phase replacements for [`CostSection`] gains and force targets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostOverrides {
    pub velocity_weight: Option<f64>,
    pub position_weight: Option<f64>,
    pub orientation_weight: Option<f64>,
    pub control_weight: Option<f64>,
    pub regulation_weight: Option<f64>,
    pub barrier_weight: Option<f64>,
    pub target_force_n: Option<[f64; 3]>,
    pub barrier_links: Option<Vec<usize>>,
    pub regulation_links: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionSection {
    #[default]
    Hold,
    /// From `from_m` (default: the previous phase's target) to the phase target.
    Line { from_m: Option<[f64; 3]>, duration_s: f64 },
    /// Circle in the yz-plane about the phase target.
    Circle { radius_m: f64, period_s: f64, start_angle_rad: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub name: String,
    pub start_s: f64,
    /// Default: the initial end-effector position.
    #[serde(default)]
    pub target_position_m: Option<[f64; 3]>,
    #[serde(default)]
    pub motion: MotionSection,
    #[serde(default)]
    pub costs: CostOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    PositionRmseM,
    ForceRmseN,
    /// Largest true contact force on any link.
    MaxForceN,
    /// Largest true contact force on a barrier link.
    MaxBarrierForceN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    /// Phase name, or `"all"` for the whole run.
    pub phase: String,
    pub metric: MetricName,
    #[serde(default)]
    pub max: Option<f64>,
    #[serde(default)]
    pub min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    /// Cycles on which the solver may fail before the run aborts.
    pub max_stalled_cycles: usize,
    #[serde(default)]
    pub threshold: Vec<Threshold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Relative paths are resolved against the working directory.
    pub dir: PathBuf,
    /// Write `trace.csv` and `contacts.csv`.
    pub traces: bool,
}

/// Sets `key` (dot-separated; array elements by index) to `raw`, parsed as a
/// TOML value when possible and as a string otherwise.
pub fn apply_override(doc: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let value = parse_value(raw);
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            toml::Value::Table(table) => {
                if last {
                    table.insert(part.to_string(), value);
                    return Ok(());
                }
                table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::map::Map::new()))
            }
            toml::Value::Array(items) => {
                let index: usize = part
                    .parse()
                    .map_err(|_| SimError::Config(format!("override '{key}': '{part}' is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(index)
                    .ok_or_else(|| SimError::Config(format!("override '{key}': index {index} out of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(SimError::Config(format!("override '{key}': '{part}' is inside a scalar"))),
        };
    }
    Err(SimError::Config("empty override key".into()))
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut table) => table.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Splits `key=value`.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (key, value) =
        arg.split_once('=').ok_or_else(|| SimError::Config(format!("override '{arg}' is not key=value")))?;
    Ok((key.trim().to_string(), value.trim().to_string()))
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Value =
            toml::from_str(text).map_err(|e| SimError::Config(format!("scenario is not valid TOML: {e}")))?;
        for (key, value) in overrides {
            apply_override(&mut doc, key, value)?;
        }
        let config: ScenarioConfig = doc.try_into().map_err(|e: toml::de::Error| SimError::Config(e.to_string()))?;
        if config.format_version != SCENARIO_FORMAT_VERSION {
            return Err(SimError::Config(format!(
                "scenario format version {} is not supported (expected {SCENARIO_FORMAT_VERSION})",
                config.format_version
            )));
        }
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::from_toml_str(&text, overrides)?, base))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    /// Resolves models, geometry and schedules. `base` anchors relative model
    /// paths.
    pub fn resolve(&self, base: &Path) -> Result<Scenario> {
        let model = match RobotModel::builtin(&self.robot.model) {
            Some(m) => m,
            None => RobotModel::from_file(base.join(&self.robot.model))?,
        };
        let n = model.dof();
        if self.robot.initial_q_rad.len() != n {
            return Err(SimError::Config(format!("initial_q_rad needs {n} entries")));
        }
        if !(self.duration_s > 0.0) {
            return Err(SimError::Config("duration_s must be positive".into()));
        }
        let plant_model = match &self.robot.plant_damping_nm_s_per_rad {
            Some(d) => model.clone().with_damping(DVector::from_vec(d.clone()))?,
            None => model.clone(),
        };
        let initial = JointState::at_rest(DVector::from_vec(self.robot.initial_q_rad.clone()));

        let plant = self.build_plant(Arc::new(plant_model))?;
        let model = Arc::new(model);
        let schedule = self.build_schedule(&model, &initial)?;
        self.check_rates()?;
        let controller = self.controller.clone();
        controller.validate()?;
        for threshold in &self.metrics.threshold {
            if threshold.phase != "all" && !self.phase.iter().any(|p| p.name == threshold.phase) {
                return Err(SimError::Config(format!("threshold refers to unknown phase '{}'", threshold.phase)));
            }
        }
        Ok(Scenario { config: self.clone(), model, plant, initial, schedule, controller })
    }

    fn check_rates(&self) -> Result<()> {
        let plant = self.plant.rate_hz;
        if plant == 0 || self.oracle.rate_hz == 0 || self.oracle.rate_hz > plant {
            return Err(SimError::Config("need 0 < oracle rate ≤ plant rate".into()));
        }
        let ticks = self.controller.control_period_s * plant as f64;
        if (ticks - ticks.round()).abs() > 1e-9 || ticks.round() < 1.0 {
            return Err(SimError::Config(format!(
                "control period {} s is not a whole number of plant ticks",
                self.controller.control_period_s
            )));
        }
        Ok(())
    }

    fn build_plant(&self, model: Arc<RobotModel>) -> Result<Plant> {
        let environment = self
            .environment
            .iter()
            .map(|e| {
                Ok(EnvironmentObject {
                    name: e.name.clone(),
                    surface: HalfSpace { normal: unit(e.normal, &e.name)?, offset: e.offset_m },
                    stiffness: e.stiffness_n_per_m,
                    damping: e.damping_n_s_per_m,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let disturbances = self
            .disturbance
            .iter()
            .map(|d| {
                Ok(Disturbance {
                    name: d.name.clone(),
                    point: BodyPoint::new(d.link, Vector3::from(d.offset_m)),
                    direction: unit(d.direction, &d.name)?,
                    peak_force: d.peak_force_n,
                    start: d.start_s,
                    ramp: d.ramp_s,
                    hold: d.hold_s,
                    release: d.release_s,
                    stiffness: d.stiffness_n_per_m,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let probes =
            default_probes(&model, self.plant.probes_per_link, self.plant.body_probe_radius_m, self.plant.tip_probe);
        let plant = Plant {
            model,
            environment,
            probes,
            disturbances,
            dt: 1.0 / self.plant.rate_hz as f64,
            substeps: self.plant.substeps,
        };
        plant.validate()?;
        Ok(plant)
    }

    fn base_costs(&self, model: &RobotModel, initial: &JointState) -> Result<CostConfig> {
        let frames = FrameCache::new(model, &initial.q)?;
        let (position, rotation) = frames.end_effector(model);
        let c = &self.costs;
        let target_rotation = match &c.target_orientation {
            OrientationTarget::Named(name) if name == "initial" => rotation,
            OrientationTarget::Named(name) => {
                return Err(SimError::Config(format!("unknown orientation target '{name}'")));
            }
            OrientationTarget::RpyRad(rpy) => Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]),
        };
        let mut costs = CostConfig::regulation(model, position, target_rotation);
        costs.velocity_weight = c.velocity_weight;
        costs.position_weight = c.position_weight;
        costs.orientation_weight = c.orientation_weight;
        costs.control_weight = c.control_weight;
        costs.regulation_weight = c.regulation_weight;
        costs.barrier_weight = c.barrier_weight;
        costs.target_force = Vector3::from(c.target_force_n);
        costs.force_selector = Vector3::from(c.force_selector);
        costs.force_limit = c.force_limit_n.clone();
        costs.barrier_scale = c.barrier_scale;
        costs.smooth_barrier = c.smooth_barrier;
        costs.barrier_links = c.barrier_links.clone();
        costs.regulation_links = c.regulation_links.clone();
        costs.state_limit_weight = c.state_limit_weight;
        costs.state_limit_margin = c.state_limit_margin;
        Ok(costs)
    }

    fn build_schedule(&self, model: &RobotModel, initial: &JointState) -> Result<PhaseSchedule> {
        let base = self.base_costs(model, initial)?;
        let mut previous_target = base.target_position;
        let mut phases = Vec::with_capacity(self.phase.len());
        for section in &self.phase {
            let mut costs = base.clone();
            let o = &section.costs;
            let set = |dst: &mut f64, src: Option<f64>| {
                if let Some(v) = src {
                    *dst = v;
                }
            };
            set(&mut costs.velocity_weight, o.velocity_weight);
            set(&mut costs.position_weight, o.position_weight);
            set(&mut costs.orientation_weight, o.orientation_weight);
            set(&mut costs.control_weight, o.control_weight);
            set(&mut costs.regulation_weight, o.regulation_weight);
            set(&mut costs.barrier_weight, o.barrier_weight);
            if let Some(f) = o.target_force_n {
                costs.target_force = Vector3::from(f);
            }
            if let Some(links) = &o.barrier_links {
                costs.barrier_links = links.clone();
            }
            if let Some(links) = &o.regulation_links {
                costs.regulation_links = links.clone();
            }
            if let Some(p) = section.target_position_m {
                costs.target_position = Vector3::from(p);
            }
            let motion = match &section.motion {
                MotionSection::Hold => Motion::Hold,
                MotionSection::Line { from_m, duration_s } => {
                    Motion::Line { from_m: from_m.unwrap_or(previous_target.into()), duration_s: *duration_s }
                }
                MotionSection::Circle { radius_m, period_s, start_angle_rad } => Motion::Circle {
                    centre_m: costs.target_position.into(),
                    radius_m: *radius_m,
                    period_s: *period_s,
                    start_angle_rad: *start_angle_rad,
                },
            };
            costs.validate(model)?;
            previous_target = costs.target_position;
            phases.push(Phase { name: section.name.clone(), start: section.start_s, costs, motion });
        }
        Ok(PhaseSchedule::new(phases)?)
    }
}

fn unit(v: [f64; 3], name: &str) -> Result<Unit<Vector3<f64>>> {
    let v = Vector3::from(v);
    let norm = v.norm();
    if !((norm - 1.0).abs() < 1e-9) {
        return Err(SimError::Config(format!("'{name}': direction {v:?} is not a unit vector")));
    }
    Ok(Unit::new_unchecked(v))
}

/// A scenario with everything needed to run it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// Controller model.
    pub model: Arc<RobotModel>,
    pub plant: Plant,
    pub initial: JointState,
    pub schedule: PhaseSchedule,
    pub controller: MpcSettings,
}
