//! The closed loop: plant, contact oracle and controller.
//!
//! `trace.csv` column order, one row per plant tick:
//! `t_s, phase, q{i}_rad…, v{i}_rad_per_s…, u{i}_nm…, ee_{x,y,z}_m, target_{x,y,z}_m,
//! f{link}_{x,y,z}_n… (true total force per link), tracked_contacts,
//! solver_iterations, solver_cost, solver_gap, solver_reg, solver_step,
//! solver_converged, stalled, stale`. Solver columns are empty on ticks
//! without a solve.
//!
//! `contacts.csv`: `t_s, kind, link, p{x,y,z}_m, f{x,y,z}_n` with `kind` one of
//! `true` (every plant tick, per probe), `feedback` (every oracle tick) and
//! `predicted` (every solve, model force at the measured state; no position).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use contact_mpc::contact::ContactFeedback;
use contact_mpc::mpc::{Controller, FeedbackSnapshot, StepOutput};
use contact_mpc::rigid_body::FrameCache;
use nalgebra::{DVector, Vector3};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunMode, Scenario};
use crate::metrics::{compute_metrics, evaluate, Metrics, SolveTimes, SolverRow, ThresholdResult, TraceRow};
use crate::oracle::{oracle_due, Oracle};
use crate::plant::{PlantState, TrueContact};
use crate::{Result, SimError};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the scenario's output directory.
    pub out_dir: Option<PathBuf>,
    /// Write nothing to disk.
    pub dry_run: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub mode: RunMode,
    pub plant_ticks: usize,
    pub control_cycles: usize,
    pub stalled_cycles: usize,
    pub stale_cycles: usize,
    pub trace_sha256: String,
    pub contacts_sha256: String,
    pub wall_time_s: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub summary: RunSummary,
    pub solve_times: SolveTimes,
    pub thresholds: Vec<ThresholdResult>,
    pub metrics: Metrics,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
    #[serde(skip)]
    pub trace_csv: Vec<u8>,
    #[serde(skip)]
    pub contacts_csv: Vec<u8>,
}

impl RunReport {
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

struct Recorder {
    trace: Vec<TraceRow>,
    trace_csv: csv::Writer<Vec<u8>>,
    contacts_csv: csv::Writer<Vec<u8>>,
    solve_times: Vec<f64>,
    cycles: usize,
    stalled: usize,
    stale: usize,
}

impl Recorder {
    fn new(dof: usize) -> Result<Self> {
        let mut header = vec!["t_s".to_string(), "phase".to_string()];
        for (prefix, unit) in [("q", "rad"), ("v", "rad_per_s"), ("u", "nm")] {
            header.extend((1..=dof).map(|i| format!("{prefix}{i}_{unit}")));
        }
        for prefix in ["ee", "target"] {
            header.extend(["x", "y", "z"].iter().map(|a| format!("{prefix}_{a}_m")));
        }
        for link in 1..=dof {
            header.extend(["x", "y", "z"].iter().map(|a| format!("f{link}_{a}_n")));
        }
        header.extend(
            [
                "tracked_contacts",
                "solver_iterations",
                "solver_cost",
                "solver_gap",
                "solver_reg",
                "solver_step",
                "solver_converged",
                "stalled",
                "stale",
            ]
            .map(String::from),
        );
        let mut trace_csv = csv::Writer::from_writer(Vec::new());
        trace_csv.write_record(&header)?;
        let mut contacts_csv = csv::Writer::from_writer(Vec::new());
        contacts_csv.write_record(["t_s", "kind", "link", "px_m", "py_m", "pz_m", "fx_n", "fy_n", "fz_n"])?;
        Ok(Self {
            trace: Vec::new(),
            trace_csv,
            contacts_csv,
            solve_times: Vec::new(),
            cycles: 0,
            stalled: 0,
            stale: 0,
        })
    }

    fn contact(&mut self, t: f64, kind: &str, link: usize, p: Option<&Vector3<f64>>, f: &Vector3<f64>) -> Result<()> {
        let mut record = vec![fmt(t), kind.to_string(), link.to_string()];
        match p {
            Some(p) => record.extend(p.iter().map(|v| fmt(*v))),
            None => record.extend(std::iter::repeat_n(String::new(), 3)),
        }
        record.extend(f.iter().map(|v| fmt(*v)));
        self.contacts_csv.write_record(&record)?;
        Ok(())
    }

    fn cycle(&mut self, t: f64, out: &StepOutput, solve_time: f64) -> Result<()> {
        self.cycles += 1;
        self.stalled += out.stalled as usize;
        self.stale += out.stale as usize;
        if out.stats.is_some() {
            self.solve_times.push(solve_time);
        }
        for (link, force) in &out.predicted_forces {
            self.contact(t, "predicted", *link, None, force)?;
        }
        Ok(())
    }

    fn row(&mut self, row: TraceRow) -> Result<()> {
        let mut record = vec![fmt(row.time), row.phase.to_string()];
        record.extend(row.q.iter().chain(&row.v).chain(&row.u).map(|v| fmt(*v)));
        record.extend(row.ee_position.iter().chain(row.target_position.iter()).map(|v| fmt(*v)));
        record.extend(row.link_forces.iter().flat_map(|f| f.iter()).map(|v| fmt(*v)));
        record.push(row.tracked_contacts.to_string());
        match &row.solver {
            Some(s) => record.extend([
                s.iterations.to_string(),
                fmt(s.cost),
                fmt(s.gap_norm),
                fmt(s.regularization),
                fmt(s.step_length),
                (s.converged as u8).to_string(),
            ]),
            None => record.extend(std::iter::repeat_n(String::new(), 6)),
        }
        record.push((row.stalled as u8).to_string());
        record.push((row.stale as u8).to_string());
        self.trace_csv.write_record(&record)?;
        self.trace.push(row);
        Ok(())
    }
}

/// Shortest representation that reads back to the same value.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn link_forces(contacts: &[TrueContact], dof: usize) -> Vec<Vector3<f64>> {
    let mut forces = vec![Vector3::zeros(); dof];
    for c in contacts {
        forces[c.link() - 1] += c.force;
    }
    forces
}

fn solver_row(out: &StepOutput) -> Option<SolverRow> {
    out.stats.as_ref().map(|s| SolverRow {
        iterations: s.iterations,
        cost: s.cost,
        gap_norm: s.gap_norm,
        regularization: s.regularization,
        step_length: s.step_length,
        converged: s.converged,
    })
}

fn log_cycle(t: f64, out: &StepOutput) {
    let r = &out.reconciliation;
    if !r.added.is_empty() || !r.removed.is_empty() {
        log::debug!("t = {t:.3} s: contacts added on links {:?}, removed from {:?}", r.added, r.removed);
    }
    if out.stalled {
        log::warn!("t = {t:.3} s: solver stalled, previous command reused");
    }
}

struct Loop<'a> {
    scenario: &'a Scenario,
    ticks: usize,
    control_every: usize,
}

impl<'a> Loop<'a> {
    fn new(scenario: &'a Scenario) -> Self {
        let rate = scenario.config.plant.rate_hz as f64;
        let ticks = (scenario.config.duration_s * rate).round() as usize;
        let control_every = (scenario.controller.control_period_s * rate).round() as usize;
        Self { scenario, ticks, control_every }
    }

    fn time(&self, tick: usize) -> f64 {
        tick as f64 / self.scenario.config.plant.rate_hz as f64
    }

    fn record_tick(
        &self,
        rec: &mut Recorder,
        state: &PlantState,
        t: f64,
        command: &DVector<f64>,
        last: Option<&StepOutput>,
        tracked: usize,
    ) -> Result<()> {
        let model = &self.scenario.model;
        let frames = FrameCache::new(model, &state.joints.q)?;
        let (ee, _) = frames.end_effector(model);
        let (phase, costs) = self.scenario.schedule.config_at(t);
        for c in &state.contacts {
            rec.contact(t, "true", c.link(), Some(&c.position), &c.force)?;
        }
        rec.row(TraceRow {
            time: t,
            phase,
            q: state.joints.q.as_slice().to_vec(),
            v: state.joints.v.as_slice().to_vec(),
            u: command.as_slice().to_vec(),
            ee_position: ee,
            target_position: costs.target_position,
            link_forces: link_forces(&state.contacts, model.dof()),
            tracked_contacts: tracked,
            solver: last.and_then(solver_row),
            stalled: last.is_some_and(|o| o.stalled),
            stale: last.is_some_and(|o| o.stale),
        })
    }

    fn check_stalls(&self, rec: &Recorder) -> Result<()> {
        let allowed = self.scenario.config.metrics.max_stalled_cycles;
        if rec.stalled > allowed {
            return Err(SimError::TooManyStalls { count: rec.stalled, allowed });
        }
        Ok(())
    }

    fn run_deterministic(&self, rec: &mut Recorder) -> Result<()> {
        let sc = self.scenario;
        let plant_rate = sc.config.plant.rate_hz;
        let mut controller = Controller::new(sc.model.clone(), sc.controller.clone(), sc.schedule.clone())?;
        let mut oracle = Oracle::new(sc.config.oracle.noise.clone(), sc.config.seed);
        let mut state = sc.plant.initial_state(sc.initial.clone())?;
        let mut feedback: Vec<ContactFeedback> = Vec::new();
        let mut command = DVector::zeros(sc.model.dof());
        for tick in 0..self.ticks {
            let t = self.time(tick);
            if oracle_due(tick as u64, plant_rate, sc.config.oracle.rate_hz) {
                feedback = oracle.tick(&state.contacts, t);
                for fb in &feedback {
                    rec.contact(t, "feedback", fb.link, Some(&fb.position), &fb.force)?;
                }
            }
            let mut out = None;
            if tick % self.control_every == 0 {
                let snapshot =
                    FeedbackSnapshot { timestamp: t, state: state.joints.clone(), contacts: feedback.clone() };
                let start = Instant::now();
                let o = controller.step(t, &snapshot)?;
                log_cycle(t, &o);
                rec.cycle(t, &o, start.elapsed().as_secs_f64())?;
                self.check_stalls(rec)?;
                command = o.command.clone();
                out = Some(o);
            }
            self.record_tick(rec, &state, t, &command, out.as_ref(), controller.state().contacts.len())?;
            state = sc.plant.step(&state, &command)?;
            state.time = self.time(tick + 1);
        }
        Ok(())
    }

    /// The controller solves in its own thread on the newest snapshot; the
    /// plant applies the newest command and is paced by the wall clock.
    fn run_realtime(&self, rec: &mut Recorder) -> Result<()> {
        type Command = (DVector<f64>, StepOutput, f64, usize);
        let sc = self.scenario;
        let plant_rate = sc.config.plant.rate_hz;
        let latest_snapshot: Arc<Mutex<Option<FeedbackSnapshot>>> = Arc::new(Mutex::new(None));
        let latest_command: Arc<Mutex<Option<Command>>> = Arc::new(Mutex::new(None));
        let clock: Arc<Mutex<f64>> = Arc::new(Mutex::new(0.0));
        let done = Arc::new(AtomicBool::new(false));
        let mut controller = Controller::new(sc.model.clone(), sc.controller.clone(), sc.schedule.clone())?;

        let worker = {
            let (snapshots, commands, clock, done) =
                (latest_snapshot.clone(), latest_command.clone(), clock.clone(), done.clone());
            std::thread::spawn(move || -> Result<()> {
                while !done.load(Ordering::Acquire) {
                    let Some(snapshot) = snapshots.lock().expect("snapshot lock").take() else {
                        std::thread::sleep(Duration::from_micros(50));
                        continue;
                    };
                    let now = *clock.lock().expect("clock lock");
                    let start = Instant::now();
                    let out = controller.step(now, &snapshot)?;
                    let elapsed = start.elapsed().as_secs_f64();
                    let tracked = controller.state().contacts.len();
                    *commands.lock().expect("command lock") = Some((out.command.clone(), out, elapsed, tracked));
                }
                Ok(())
            })
        };

        let mut oracle = Oracle::new(sc.config.oracle.noise.clone(), sc.config.seed);
        let mut state = sc.plant.initial_state(sc.initial.clone())?;
        let mut feedback: Vec<ContactFeedback> = Vec::new();
        let mut command = contact_mpc::mpc::reset_warm_start(&sc.model, &sc.initial, 1)?.us.remove(0);
        let mut tracked = 0;
        let start = Instant::now();
        let result = (|| -> Result<()> {
            for tick in 0..self.ticks {
                let t = self.time(tick);
                if let Some(wait) = Duration::from_secs_f64(t).checked_sub(start.elapsed()) {
                    std::thread::sleep(wait);
                }
                *clock.lock().expect("clock lock") = t;
                if oracle_due(tick as u64, plant_rate, sc.config.oracle.rate_hz) {
                    feedback = oracle.tick(&state.contacts, t);
                    for fb in &feedback {
                        rec.contact(t, "feedback", fb.link, Some(&fb.position), &fb.force)?;
                    }
                }
                if tick % self.control_every == 0 {
                    *latest_snapshot.lock().expect("snapshot lock") = Some(FeedbackSnapshot {
                        timestamp: t,
                        state: state.joints.clone(),
                        contacts: feedback.clone(),
                    });
                }
                let fresh = latest_command.lock().expect("command lock").take();
                let mut out = None;
                if let Some((u, o, elapsed, n)) = fresh {
                    log_cycle(t, &o);
                    rec.cycle(t, &o, elapsed)?;
                    self.check_stalls(rec)?;
                    command = u;
                    tracked = n;
                    out = Some(o);
                }
                self.record_tick(rec, &state, t, &command, out.as_ref(), tracked)?;
                state = sc.plant.step(&state, &command)?;
                state.time = self.time(tick + 1);
            }
            Ok(())
        })();
        done.store(true, Ordering::Release);
        let worker_result = worker.join().map_err(|_| SimError::Config("controller thread panicked".into()))?;
        result.and(worker_result)
    }
}

/// Runs a scenario to completion, computes metrics and, unless `dry_run`,
/// writes `trace.csv`, `contacts.csv`, `metrics.toml` and the resolved
/// `scenario.toml` to the output directory.
pub fn run_scenario(scenario: &Scenario, options: &RunOptions) -> Result<RunReport> {
    let started = Instant::now();
    let looped = Loop::new(scenario);
    let mut rec = Recorder::new(scenario.model.dof())?;
    match scenario.config.mode {
        RunMode::Deterministic => looped.run_deterministic(&mut rec)?,
        RunMode::Realtime => looped.run_realtime(&mut rec)?,
    }
    let trace_csv = rec.trace_csv.into_inner().map_err(|e| SimError::Io(e.into_error()))?;
    let contacts_csv = rec.contacts_csv.into_inner().map_err(|e| SimError::Io(e.into_error()))?;
    let metrics = compute_metrics(&rec.trace, &scenario.schedule);
    let thresholds = evaluate(&metrics, &scenario.config.metrics.threshold);
    let passed = thresholds.iter().all(|t| t.pass);
    let report = RunReport {
        summary: RunSummary {
            scenario: scenario.config.name.clone(),
            seed: scenario.config.seed,
            mode: scenario.config.mode,
            plant_ticks: looped.ticks,
            control_cycles: rec.cycles,
            stalled_cycles: rec.stalled,
            stale_cycles: rec.stale,
            trace_sha256: hex::encode(Sha256::digest(&trace_csv)),
            contacts_sha256: hex::encode(Sha256::digest(&contacts_csv)),
            wall_time_s: started.elapsed().as_secs_f64(),
            passed,
        },
        solve_times: SolveTimes::from_samples(&rec.solve_times),
        thresholds,
        metrics,
        trace: rec.trace,
        trace_csv,
        contacts_csv,
    };
    log::info!(
        "{}: {} control cycles in {:.1} s, thresholds {}",
        report.summary.scenario,
        report.summary.control_cycles,
        report.summary.wall_time_s,
        if passed { "passed" } else { "failed" }
    );
    if !options.dry_run {
        let dir = options.out_dir.clone().unwrap_or_else(|| scenario.config.output.dir.clone());
        write_outputs(&dir, scenario, &report)?;
    }
    Ok(report)
}

fn write_outputs(dir: &Path, scenario: &Scenario, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if scenario.config.output.traces {
        std::fs::write(dir.join("trace.csv"), &report.trace_csv)?;
        std::fs::write(dir.join("contacts.csv"), &report.contacts_csv)?;
    }
    std::fs::File::create(dir.join("metrics.toml"))?.write_all(report.to_toml_string().as_bytes())?;
    std::fs::write(dir.join("scenario.toml"), scenario.config.to_toml_string())?;
    Ok(())
}
