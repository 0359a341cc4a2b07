use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use contact_mpc::ddp::{BoxFddp, LqProblem, SolverStats};
use contact_mpc::mpc::{reset_warm_start, Controller, FeedbackSnapshot};
use contact_mpc_sim::bench::{rates_ordered, run_bench, BenchOptions, REFERENCE_RATES_HZ};
use contact_mpc_sim::checks;
use contact_mpc_sim::config::{parse_override, RunMode, ScenarioConfig};
use contact_mpc_sim::scenario::{run_scenario, RunOptions};
use contact_mpc_sim::{Result, SimError};
use nalgebra::DVector;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "contact-mpc", version, about = "Contact-feedback MPC simulator")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and evaluate its thresholds.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Force the single-threaded, bit-reproducible loop.
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// `key=value` with a dotted key, e.g. `environment.0.stiffness_n_per_m=2000`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run without writing outputs.
        #[arg(long)]
        dry_run: bool,
    },
    /// Solve one problem cold, then again from its own solution.
    Solve {
        /// A scenario, or a file with an `[lqr]` table.
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Time controller steps with zero, one and two contacts.
    Bench {
        config: PathBuf,
        #[arg(long, default_value_t = 300)]
        cycles: usize,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the randomized verification batteries.
    Check {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Plant substeps for the energy battery.
        #[arg(long, default_value_t = 20)]
        substeps: usize,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LqrFile {
    lqr: LqrFixture,
}

/// Double integrator regulated to the origin.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LqrFixture {
    axes: usize,
    horizon: usize,
    dt_s: f64,
    x0: Vec<f64>,
    /// Symmetric control bound; unbounded when absent.
    control_bound: Option<f64>,
}

/// Failure of a run that completed: thresholds or checks not met.
const EXIT_FAILED: u8 = 1;

fn overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter().map(|s| parse_override(s)).collect()
}

fn print_stats(label: &str, stats: &SolverStats) {
    println!(
        "{label}: iterations {}, cost {:.6e}, gap {:.2e}, reg {:.1e}, step {}, converged {}, {:.3} ms",
        stats.iterations,
        stats.cost,
        stats.gap_norm,
        stats.regularization,
        stats.step_length,
        stats.converged,
        1e3 * stats.wall_time_s
    );
}

fn simulate(
    config: &Path,
    seed: Option<u64>,
    deterministic: bool,
    out: Option<PathBuf>,
    raw: &[String],
    dry_run: bool,
) -> Result<u8> {
    let (mut cfg, base) = ScenarioConfig::load(config, &overrides(raw)?)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if deterministic {
        cfg.mode = RunMode::Deterministic;
    }
    let scenario = cfg.resolve(&base)?;
    let report = run_scenario(&scenario, &RunOptions { out_dir: out, dry_run })?;
    let s = &report.summary;
    println!("scenario {} (seed {}, {:?})", s.scenario, s.seed, s.mode);
    println!(
        "{} plant ticks, {} control cycles, {} stalled, {} stale, {:.1} s wall",
        s.plant_ticks, s.control_cycles, s.stalled_cycles, s.stale_cycles, s.wall_time_s
    );
    if let (Some(mean), Some(p95)) = (report.solve_times.mean_s, report.solve_times.p95_s) {
        println!("controller step: mean {:.3} ms, p95 {:.3} ms", 1e3 * mean, 1e3 * p95);
    }
    for w in &report.metrics.windows {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "  {:<14} pos_rmse {} m  force_rmse {} N  max_force {} N  max_barrier_force {} N",
            w.name,
            show(w.position_rmse_m),
            show(w.force_rmse_n),
            show(w.max_force_n),
            show(w.max_barrier_force_n)
        );
    }
    for t in &report.thresholds {
        println!("{t}");
    }
    println!("trace sha256 {}", s.trace_sha256);
    println!("{}", if s.passed { "PASS" } else { "FAIL" });
    Ok(if s.passed { 0 } else { EXIT_FAILED })
}

fn solve(config: &Path, raw: &[String]) -> Result<u8> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| SimError::Config(format!("cannot read {}: {e}", config.display())))?;
    if let Ok(file) = toml::from_str::<LqrFile>(&text) {
        let f = file.lqr;
        let mut problem = LqProblem::double_integrator(f.axes, f.horizon, f.dt_s, DVector::from_vec(f.x0))?;
        if let Some(b) = f.control_bound {
            problem = problem.with_bounds(DVector::from_element(f.axes, -b), DVector::from_element(f.axes, b))?;
        }
        let solver = BoxFddp::new(Default::default())?;
        let (cold, stats) = solver.solve(&problem, None)?;
        print_stats("cold", &stats);
        let (_, warm) = solver.solve(&problem, Some(&cold))?;
        print_stats("warm", &warm);
        return Ok(if warm.converged && warm.iterations <= 2 { 0 } else { EXIT_FAILED });
    }
    let (cfg, base) = ScenarioConfig::load(config, &overrides(raw)?)?;
    let scenario = cfg.resolve(&base)?;
    let controller = Controller::new(scenario.model.clone(), scenario.controller.clone(), scenario.schedule.clone())?;
    let snapshot = FeedbackSnapshot { timestamp: 0.0, state: scenario.initial.clone(), contacts: Vec::new() };
    let problem = controller.build_problem(&snapshot)?;
    let solver = BoxFddp::new(scenario.controller.solver.clone())?;
    let start = reset_warm_start(&scenario.model, &scenario.initial, scenario.controller.horizon)?;
    let (cold, stats) = solver.solve(&problem, Some(&start))?;
    print_stats("cold", &stats);
    let (_, warm) = solver.solve(&problem, Some(&cold))?;
    print_stats("warm", &warm);
    Ok(0)
}

fn bench(config: &Path, cycles: usize, raw: &[String]) -> Result<u8> {
    let (cfg, base) = ScenarioConfig::load(config, &overrides(raw)?)?;
    let scenario = cfg.resolve(&base)?;
    let cases = run_bench(&scenario, &BenchOptions { cycles, ..Default::default() })?;
    for (case, reference) in cases.iter().zip(REFERENCE_RATES_HZ) {
        let ms = |v: Option<f64>| v.map_or(f64::NAN, |v| 1e3 * v);
        println!(
            "{} contacts: mean {:.3} ms, p50 {:.3} ms, p95 {:.3} ms, {:.0} Hz, {:.2} iterations (reference {:.1} kHz)",
            case.contacts,
            ms(case.times.mean_s),
            ms(case.times.p50_s),
            ms(case.times.p95_s),
            case.rate_hz,
            case.mean_iterations,
            reference / 1e3
        );
    }
    let ordered = rates_ordered(&cases, 0.05);
    println!("rate non-increasing with contacts: {ordered}");
    Ok(0)
}

fn check(seed: u64, substeps: usize) -> Result<u8> {
    let results = checks::run_all(seed, substeps)?;
    for r in &results {
        println!("{r}");
    }
    Ok(if results.iter().all(|r| r.passed) { 0 } else { EXIT_FAILED })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::from_default_env().filter_level(level).init();
    let result = match cli.command {
        Command::Simulate { config, seed, deterministic, out, overrides, dry_run } => {
            simulate(&config, seed, deterministic, out, &overrides, dry_run)
        }
        Command::Solve { config, overrides } => solve(&config, &overrides),
        Command::Bench { config, cycles, overrides } => bench(&config, cycles, &overrides),
        Command::Check { seed, substeps } => check(seed, substeps),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
