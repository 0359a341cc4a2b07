//! Per-phase tracking and force statistics of a closed-loop trace.

use contact_mpc::mpc::PhaseSchedule;
use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::config::{MetricName, Threshold};

/// One plant tick of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub time: f64,
    pub phase: usize,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub ee_position: Vector3<f64>,
    pub target_position: Vector3<f64>,
    /// Total true contact force on each link (index = link − 1).
    pub link_forces: Vec<Vector3<f64>>,
    pub tracked_contacts: usize,
    pub solver: Option<SolverRow>,
    pub stalled: bool,
    pub stale: bool,
}

/// Solver statistics of the control cycle that produced a row's command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverRow {
    pub iterations: usize,
    pub cost: f64,
    pub gap_norm: f64,
    pub regularization: f64,
    pub step_length: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowMetrics {
    pub name: String,
    pub samples: usize,
    /// Absent when the window is empty.
    pub position_rmse_m: Option<f64>,
    /// Absent when the window is empty or regulates no link.
    pub force_rmse_n: Option<f64>,
    pub max_force_n: Option<f64>,
    /// Absent when the window is empty or limits no link.
    pub max_barrier_force_n: Option<f64>,
}

impl WindowMetrics {
    pub fn get(&self, metric: MetricName) -> Option<f64> {
        match metric {
            MetricName::PositionRmseM => self.position_rmse_m,
            MetricName::ForceRmseN => self.force_rmse_n,
            MetricName::MaxForceN => self.max_force_n,
            MetricName::MaxBarrierForceN => self.max_barrier_force_n,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolveTimes {
    pub cycles: usize,
    pub mean_s: Option<f64>,
    pub p50_s: Option<f64>,
    pub p95_s: Option<f64>,
    pub max_s: Option<f64>,
}

impl SolveTimes {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let pick = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
        Self {
            cycles: sorted.len(),
            mean_s: Some(sorted.iter().sum::<f64>() / sorted.len() as f64),
            p50_s: Some(pick(0.5)),
            p95_s: Some(pick(0.95)),
            max_s: sorted.last().copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// The whole run, then one entry per phase.
    pub windows: Vec<WindowMetrics>,
}

impl Metrics {
    pub fn window(&self, name: &str) -> Option<&WindowMetrics> {
        self.windows.iter().find(|w| w.name == name)
    }
}

#[derive(Default)]
struct Accumulator {
    samples: usize,
    position_sq: f64,
    force_sq: f64,
    force_samples: usize,
    max_force: f64,
    max_barrier: Option<f64>,
}

impl Accumulator {
    fn finish(&self, name: &str) -> WindowMetrics {
        let some = |v: f64| (self.samples > 0).then_some(v);
        WindowMetrics {
            name: name.to_string(),
            samples: self.samples,
            position_rmse_m: some((self.position_sq / self.samples.max(1) as f64).sqrt()),
            force_rmse_n: (self.force_samples > 0).then(|| (self.force_sq / self.force_samples as f64).sqrt()),
            max_force_n: some(self.max_force),
            max_barrier_force_n: self.max_barrier,
        }
    }
}

/// RMSE of `‖p_ee − p_des‖` and of the selected force error on regulated
/// links, and maxima of the true link forces, over the run and each phase.
pub fn compute_metrics(trace: &[TraceRow], schedule: &PhaseSchedule) -> Metrics {
    let phases = schedule.phases();
    let mut all = Accumulator::default();
    let mut per_phase: Vec<Accumulator> = phases.iter().map(|_| Accumulator::default()).collect();
    for row in trace {
        let costs = &phases[row.phase].costs;
        let selector = Matrix3::from_diagonal(&costs.force_selector);
        let position_sq = (row.ee_position - row.target_position).norm_squared();
        let force_sq = (!costs.regulation_links.is_empty()).then(|| {
            costs
                .regulation_links
                .iter()
                .map(|&l| (selector * (row.link_forces[l - 1] - costs.target_force)).norm_squared())
                .sum::<f64>()
        });
        let max_force = row.link_forces.iter().map(|f| f.norm()).fold(0.0, f64::max);
        let max_barrier = (!costs.barrier_links.is_empty())
            .then(|| costs.barrier_links.iter().map(|&l| row.link_forces[l - 1].norm()).fold(0.0, f64::max));
        for acc in [&mut all, &mut per_phase[row.phase]] {
            acc.samples += 1;
            acc.position_sq += position_sq;
            if let Some(f) = force_sq {
                acc.force_sq += f;
                acc.force_samples += 1;
            }
            acc.max_force = acc.max_force.max(max_force);
            if let Some(b) = max_barrier {
                acc.max_barrier = Some(acc.max_barrier.map_or(b, |m: f64| m.max(b)));
            }
        }
    }
    let mut windows = vec![all.finish("all")];
    windows.extend(phases.iter().zip(&per_phase).map(|(p, acc)| acc.finish(&p.name)));
    Metrics { windows }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdResult {
    pub phase: String,
    pub metric: MetricName,
    pub value: Option<f64>,
    pub max: Option<f64>,
    pub min: Option<f64>,
    pub pass: bool,
}

impl std::fmt::Display for ThresholdResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {:?}", self.phase, self.metric)?;
        match self.value {
            Some(v) => write!(f, " = {v:.4}")?,
            None => write!(f, " absent")?,
        }
        if let Some(min) = self.min {
            write!(f, ", min {min}")?;
        }
        if let Some(max) = self.max {
            write!(f, ", max {max}")?;
        }
        write!(f, ": {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

/// Absent metrics fail their thresholds.
pub fn evaluate(metrics: &Metrics, thresholds: &[Threshold]) -> Vec<ThresholdResult> {
    thresholds
        .iter()
        .map(|t| {
            let value = metrics.window(&t.phase).and_then(|w| w.get(t.metric));
            let pass = match value {
                Some(v) => t.max.is_none_or(|m| v <= m) && t.min.is_none_or(|m| v > m),
                None => false,
            };
            ThresholdResult { phase: t.phase.clone(), metric: t.metric, value, max: t.max, min: t.min, pass }
        })
        .collect()
}
