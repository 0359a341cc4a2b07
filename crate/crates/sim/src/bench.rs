//! Controller timing with a fixed number of synthetic contacts.
//!
//! Each case warms the controller up at the scenario's initial state, then
//! times full controller steps (reconciliation, problem build and solve) on
//! snapshots whose joint state is jittered so that every solve has work to do.

use std::time::Instant;

use contact_mpc::contact::ContactFeedback;
use contact_mpc::mpc::{Controller, FeedbackSnapshot};
use contact_mpc::rigid_body::{BodyPoint, FrameCache, JointState};
use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Scenario;
use crate::metrics::SolveTimes;
use crate::{Result, SimError};

/// Rates reported for the reference implementation on its own hardware, for
/// context only.
pub const REFERENCE_RATES_HZ: [f64; 3] = [6800.0, 1900.0, 1800.0];

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub warmup_cycles: usize,
    pub cycles: usize,
    /// Standard deviation of the joint jitter (rad, rad/s).
    pub jitter: f64,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { warmup_cycles: 50, cycles: 300, jitter: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchCase {
    pub contacts: usize,
    pub times: SolveTimes,
    /// `1 / median step time`.
    pub rate_hz: f64,
    pub mean_iterations: f64,
}

/// Synthetic reports: the last link pressed along −x at the end-effector,
/// then link 3 pushed along +y at its origin.
pub fn synthetic_contacts(
    scenario: &Scenario,
    q: &DVector<f64>,
    count: usize,
    time: f64,
) -> Result<Vec<ContactFeedback>> {
    let model = &scenario.model;
    let n = model.dof();
    if count > 2 || n < 3 {
        return Err(SimError::Config(format!("bench supports 0 to 2 contacts on arms with 3+ joints, got {count}")));
    }
    let frames = FrameCache::new(model, q)?;
    let ee = FrameCache::end_effector_point(model);
    let second = BodyPoint::new(3, Vector3::zeros());
    let all = [(ee, Vector3::new(-10.0, 0.0, 0.0)), (second, Vector3::new(0.0, 10.0, 0.0))];
    Ok(all[..count]
        .iter()
        .map(|(point, force)| ContactFeedback {
            position: frames.point(point),
            force: *force,
            link: point.link,
            timestamp: time,
        })
        .collect())
}

pub fn bench_case(scenario: &Scenario, contacts: usize, options: &BenchOptions) -> Result<BenchCase> {
    let mut settings = scenario.controller.clone();
    settings.use_contact_feedback = true;
    let mut controller = Controller::new(scenario.model.clone(), settings.clone(), scenario.schedule.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(contacts as u64));
    let base = scenario.initial.clone();
    let n = base.q.len();
    let mut samples = Vec::with_capacity(options.cycles);
    let mut iterations = 0usize;
    for cycle in 0..options.warmup_cycles + options.cycles {
        let now = cycle as f64 * settings.control_period_s;
        let q = &base.q + DVector::from_fn(n, |_, _| options.jitter * rng.random_range(-1.0..1.0));
        let v = &base.v + DVector::from_fn(n, |_, _| options.jitter * rng.random_range(-1.0..1.0));
        let snapshot = FeedbackSnapshot {
            timestamp: now,
            contacts: synthetic_contacts(scenario, &base.q, contacts, now)?,
            state: JointState::new(q, v),
        };
        let start = Instant::now();
        let out = controller.step(now, &snapshot)?;
        let elapsed = start.elapsed().as_secs_f64();
        if cycle >= options.warmup_cycles {
            samples.push(elapsed);
            iterations += out.stats.map_or(0, |s| s.iterations);
        }
        let tracked = controller.state().contacts.len();
        if tracked != contacts {
            return Err(SimError::Config(format!(
                "bench expected {contacts} tracked contacts, controller holds {tracked}"
            )));
        }
    }
    let times = SolveTimes::from_samples(&samples);
    Ok(BenchCase {
        contacts,
        rate_hz: times.p50_s.map_or(0.0, |p| 1.0 / p),
        mean_iterations: iterations as f64 / options.cycles.max(1) as f64,
        times,
    })
}

pub fn run_bench(scenario: &Scenario, options: &BenchOptions) -> Result<Vec<BenchCase>> {
    (0..=2).map(|k| bench_case(scenario, k, options)).collect()
}

/// Contact count never makes the median step faster by more than `slack`
/// (relative), i.e. rates are non-increasing up to timing noise.
pub fn rates_ordered(cases: &[BenchCase], slack: f64) -> bool {
    cases.windows(2).all(|w| w[1].rate_hz <= w[0].rate_hz * (1.0 + slack))
}
