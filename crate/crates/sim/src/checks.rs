//! Property batteries over random instances, each against an oracle that
//! does not reuse the code under test.

use std::sync::Arc;

use contact_mpc::contact::{
    compute_theta, point_loads, spring_force, spring_force_jacobian, ContactFeedback, ContactParams,
};
use contact_mpc::ddp::{BoxFddp, LqProblem, SolverSettings, Trajectory};
use contact_mpc::rigid_body::{
    forward_dynamics, forward_dynamics_derivatives, BodyPoint, DerivativeMode, FrameCache, Joint, JointLimits,
    JointState, Link, RobotModel,
};
use nalgebra::{DMatrix, DVector, Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle::{Oracle, OracleNoise};
use crate::plant::{default_probes, EnvironmentObject, HalfSpace, Plant};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {} ({})", self.name, if self.passed { "PASS" } else { "FAIL" }, self.detail)
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    Rotation3::from_scaled_axis(unit_vector(rng) * rng.random_range(0.0..std::f64::consts::PI))
}

/// Random revolute chain with 2 to 7 joints; links are solid boxes.
pub fn random_chain(rng: &mut ChaCha8Rng) -> RobotModel {
    let n = rng.random_range(2..=7);
    let mut joints = Vec::with_capacity(n);
    let mut links = Vec::with_capacity(n);
    for i in 0..n {
        let translation = Translation3::new(
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(0.05..0.3),
        );
        let rotation = UnitQuaternion::from_rotation_matrix(&random_rotation(rng));
        joints.push(Joint {
            name: format!("j{}", i + 1),
            origin: Isometry3::from_parts(translation, rotation),
            axis: nalgebra::Unit::new_normalize(unit_vector(rng)),
        });
        let mass = rng.random_range(0.3..3.0);
        let (a, b, c): (f64, f64, f64) =
            (rng.random_range(0.03..0.1), rng.random_range(0.03..0.1), rng.random_range(0.1..0.3));
        let principal =
            Matrix3::from_diagonal(&Vector3::new(b * b + c * c, a * a + c * c, a * a + b * b)) * (mass / 12.0);
        let r = random_rotation(rng);
        links.push(Link {
            mass,
            com: Vector3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(0.0..0.2)),
            inertia: r.matrix() * principal * r.matrix().transpose(),
        });
    }
    let limits = JointLimits {
        q_min: DVector::from_element(n, -10.0),
        q_max: DVector::from_element(n, 10.0),
        v_max: DVector::from_element(n, 10.0),
        u_min: DVector::from_element(n, -200.0),
        u_max: DVector::from_element(n, 200.0),
    };
    RobotModel::new(
        "random",
        joints,
        links,
        limits,
        Vector3::new(0.0, 0.0, -9.81),
        Isometry3::translation(0.0, 0.0, 0.1),
    )
    .expect("random chain is valid")
}

fn random_model(rng: &mut ChaCha8Rng) -> RobotModel {
    match rng.random_range(0..4) {
        0 => RobotModel::desk7(),
        1 => RobotModel::planar3(),
        _ => random_chain(rng),
    }
}

fn random_feedback(rng: &mut ChaCha8Rng, model: &RobotModel, q: &DVector<f64>) -> ContactFeedback {
    let frames = FrameCache::new(model, q).expect("valid configuration");
    let link = rng.random_range(1..=model.dof());
    let offset =
        Vector3::new(rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06), rng.random_range(0.0..0.25));
    ContactFeedback {
        position: frames.point(&BodyPoint::new(link, offset)),
        force: unit_vector(rng) * rng.random_range(0.6..50.0),
        link,
        timestamp: 0.0,
    }
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Accelerations with the springs re-evaluated at the configuration.
fn spring_dynamics(
    model: &RobotModel,
    contacts: &[ContactParams],
    state: &JointState,
    u: &DVector<f64>,
) -> DVector<f64> {
    let frames = FrameCache::new(model, &state.q).expect("valid configuration");
    forward_dynamics(model, state, u, &point_loads(contacts, &frames)).expect("finite dynamics")
}

/// Fourth-order central difference of `f` at zero.
fn five_point(h: f64, f: impl Fn(f64) -> DVector<f64>) -> DVector<f64> {
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

/// Analytic dynamics and spring Jacobians against central differences over
/// random chains, states and contacts.
pub fn derivative_battery(samples: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let model = random_model(&mut rng);
        let n = model.dof();
        let q = DVector::from_fn(n, |_, _| rng.random_range(-1.5..1.5));
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let u = DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
        let state = JointState::new(q.clone(), v.clone());
        let contacts: Vec<ContactParams> = (0..rng.random_range(0..=2))
            .map(|_| {
                let fb = random_feedback(&mut rng, &model, &q);
                compute_theta(&fb, &model, &q, rng.random_range(500.0..6000.0)).expect("strong feedback")
            })
            .collect();
        let frames = FrameCache::new(&model, &q).expect("valid configuration");
        let analytic = forward_dynamics_derivatives(
            &model,
            &state,
            &u,
            &point_loads(&contacts, &frames),
            DerivativeMode::Analytic,
        )
        .expect("derivatives");

        let mut fd_q = DMatrix::zeros(n, n);
        let mut fd_v = DMatrix::zeros(n, n);
        let mut fd_u = DMatrix::zeros(n, n);
        for j in 0..n {
            fd_q.set_column(
                j,
                &five_point(h, |d| {
                    let mut s = state.clone();
                    s.q[j] += d;
                    spring_dynamics(&model, &contacts, &s, &u)
                }),
            );
            fd_v.set_column(
                j,
                &five_point(h, |d| {
                    let mut s = state.clone();
                    s.v[j] += d;
                    spring_dynamics(&model, &contacts, &s, &u)
                }),
            );
            fd_u.set_column(
                j,
                &five_point(h, |d| {
                    let mut w = u.clone();
                    w[j] += d;
                    spring_dynamics(&model, &contacts, &state, &w)
                }),
            );
        }
        worst = worst
            .max(rel_err(&analytic.da_dq, &fd_q))
            .max(rel_err(&analytic.da_dv, &fd_v))
            .max(rel_err(&analytic.da_du, &fd_u));

        for c in &contacts {
            let jac = spring_force_jacobian(c, &model, &q).expect("jacobian");
            let mut fd = DMatrix::zeros(3, n);
            for j in 0..n {
                let d = five_point(h, |d| {
                    let mut qd = q.clone();
                    qd[j] += d;
                    DVector::from_column_slice(spring_force(c, &model, &qd).expect("force").as_slice())
                });
                fd.set_column(j, &d);
            }
            let jac = DMatrix::from_iterator(3, n, jac.iter().copied());
            worst = worst.max(rel_err(&jac, &fd));
        }
    }
    CheckResult {
        name: "derivatives",
        passed: worst < 1e-5,
        detail: format!("{samples} samples, worst relative error {worst:.2e} (limit 1e-5)"),
    }
}

/// The spring rebuilt from a report reproduces the reported force at the
/// report's configuration.
pub fn closure_battery(samples: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let model = random_model(&mut rng);
        let q = DVector::from_fn(model.dof(), |_, _| rng.random_range(-2.0..2.0));
        let fb = random_feedback(&mut rng, &model, &q);
        let params = compute_theta(&fb, &model, &q, rng.random_range(500.0..6000.0)).expect("strong feedback");
        worst = worst.max((spring_force(&params, &model, &q).expect("force") - fb.force).norm());
    }
    CheckResult {
        name: "spring closure",
        passed: worst < 1e-9,
        detail: format!("{samples} feedbacks, worst error {worst:.2e} N (limit 1e-9)"),
    }
}

/// Moving the contact point inside the contact frame's xy-plane leaves the
/// spring force unchanged.
pub fn tangential_battery(samples: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let model = random_model(&mut rng);
        let q = DVector::from_fn(model.dof(), |_, _| rng.random_range(-2.0..2.0));
        let fb = random_feedback(&mut rng, &model, &q);
        let params = compute_theta(&fb, &model, &q, rng.random_range(500.0..6000.0)).expect("strong feedback");
        let shift = params.frame * Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0);
        let before = params.stiffness * (params.rest_location - fb.position);
        let after = params.stiffness * (params.rest_location - (fb.position + shift));
        worst = worst.max((after - before).norm());
    }
    CheckResult {
        name: "tangential invariance",
        passed: worst < 1e-9,
        detail: format!("{samples} displacements, worst force change {worst:.2e} N (limit 1e-9)"),
    }
}

/// Finite-horizon Riccati recursion rolled out from the initial state.
pub fn riccati_controls(p: &LqProblem) -> Vec<DVector<f64>> {
    let mut s = p.qf.clone();
    let mut gains = Vec::with_capacity(p.horizon);
    for _ in 0..p.horizon {
        let bt_s = p.b.transpose() * &s;
        let k = -(&p.r + &bt_s * &p.b).lu().solve(&(&bt_s * &p.a)).expect("positive definite");
        s = &p.q + p.a.transpose() * &s * (&p.a + &p.b * &k);
        s = 0.5 * (&s + s.transpose());
        gains.push(k);
    }
    gains.reverse();
    let mut x = p.x0.clone();
    gains
        .iter()
        .map(|k| {
            let u = k * &x;
            x = &p.a * &x + &p.b * &u;
            u
        })
        .collect()
}

fn random_lq(rng: &mut ChaCha8Rng) -> LqProblem {
    let axes = rng.random_range(1..=3);
    let x0 = DVector::from_fn(2 * axes, |_, _| rng.random_range(-1.0..1.0));
    LqProblem::double_integrator(axes, rng.random_range(5..40), rng.random_range(0.02..0.2), x0).expect("valid fixture")
}

fn monotone(costs: &[f64]) -> bool {
    costs.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0))
}

/// Unconstrained fixtures against Riccati, box fixtures for exact
/// feasibility, and monotone cost once feasible.
pub fn solver_battery(samples: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let solver = BoxFddp::new(SolverSettings::default()).expect("default settings");
    let mut worst_error: f64 = 0.0;
    let mut infeasible = 0;
    let mut non_monotone = 0;
    for _ in 0..samples {
        let p = random_lq(&mut rng);
        let (traj, stats) = solver.solve(&p, None).expect("LQ solve");
        let expected = riccati_controls(&p);
        let err = traj.us.iter().zip(&expected).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        worst_error = worst_error.max(err);
        non_monotone += !monotone(&stats.feasible_costs) as usize;

        let bound = rng.random_range(0.05..0.5);
        let m = p.b.ncols();
        let bounded =
            p.clone().with_bounds(DVector::from_element(m, -bound), DVector::from_element(m, bound)).expect("bounds");
        let warm = Trajectory::constant(&bounded.x0, &DVector::zeros(m), bounded.horizon);
        let (traj, stats) = solver.solve(&bounded, Some(&warm)).expect("box solve");
        infeasible += traj.us.iter().flat_map(|u| u.iter()).filter(|u| **u < -bound || **u > bound).count();
        non_monotone += !monotone(&stats.feasible_costs) as usize;
    }
    CheckResult {
        name: "solver oracle",
        passed: worst_error < 1e-6 && infeasible == 0 && non_monotone == 0,
        detail: format!(
            "{samples} LQ + {samples} box fixtures, worst control error {worst_error:.2e} (limit 1e-6), \
             {infeasible} bound violations, {non_monotone} non-monotone cost sequences"
        ),
    }
}

/// Largest energy deviation from the start over a simulation, relative to the
/// initial energy (gravity measured from the base).
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyDrift {
    pub initial_j: f64,
    pub worst_deviation_j: f64,
    pub relative: f64,
    pub max_contacts: usize,
}

pub fn energy_drift(plant: &Plant, start: JointState, duration_s: f64) -> Result<EnergyDrift> {
    let mut state = plant.initial_state(start)?;
    let initial = plant.energy(&state.joints)?;
    let zero = DVector::zeros(plant.model.dof());
    let mut worst: f64 = 0.0;
    let mut max_contacts = state.contacts.len();
    for _ in 0..(duration_s / plant.dt).round() as usize {
        state = plant.step(&state, &zero)?;
        worst = worst.max((plant.energy(&state.joints)? - initial).abs());
        max_contacts = max_contacts.max(state.contacts.len());
    }
    Ok(EnergyDrift { initial_j: initial, worst_deviation_j: worst, relative: worst / initial.abs(), max_contacts })
}

/// Releases the desk arm from rest at 1 kHz with zero torque: twice in free
/// space and twice falling onto an undamped floor.
pub fn energy_battery(substeps: usize) -> Result<CheckResult> {
    let model = Arc::new(RobotModel::desk7());
    let floor = EnvironmentObject {
        name: "floor".into(),
        surface: HalfSpace { normal: Vector3::z_axis(), offset: 0.0 },
        stiffness: 3500.0,
        damping: 0.0,
    };
    let cases = [
        ("free, stretched", vec![], [0.0, 2.0, 0.0, 0.6, 0.0, 0.3, 0.0]),
        ("free, folded", vec![], [0.0, 0.6, 0.0, -1.4, 0.0, 0.8, 0.0]),
        ("floor, forward", vec![floor.clone()], [0.0, 1.0, 0.0, 1.0, 0.0, 0.5, 0.0]),
        ("floor, reaching", vec![floor], [0.0, 1.6, 0.0, 0.2, 0.0, 0.3, 0.0]),
    ];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, environment, q) in cases {
        let plant = Plant {
            model: model.clone(),
            probes: default_probes(&model, 5, 0.05, true),
            environment,
            disturbances: Vec::new(),
            dt: 1e-3,
            substeps,
        };
        let drift = energy_drift(&plant, JointState::at_rest(DVector::from_row_slice(&q)), 1.0)?;
        worst = worst.max(drift.relative);
        parts.push(format!("{name} {:.3}% ({} contacts max)", 100.0 * drift.relative, drift.max_contacts));
    }
    Ok(CheckResult {
        name: "energy",
        passed: worst < 0.005,
        detail: format!("dt 1 ms, {substeps} substeps: {} (limit 0.5%)", parts.join(", ")),
    })
}

/// Zero-noise feedback reproduces the plant's contacts exactly.
pub fn oracle_battery(samples: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Arc::new(RobotModel::desk7());
    let mut mismatches = 0;
    let mut reported = 0;
    for _ in 0..samples {
        let q = DVector::from_fn(7, |_, _| rng.random_range(-1.5..1.5));
        let frames = FrameCache::new(&model, &q)?;
        let probes = default_probes(&model, 5, 0.0, true);
        // Put a plane just behind a random probe so that it penetrates.
        let probe = probes[rng.random_range(0..probes.len())];
        let normal = nalgebra::Unit::new_normalize(unit_vector(&mut rng));
        let offset = normal.dot(&frames.point(&probe.point)) + rng.random_range(0.0005..0.01);
        let plant = Plant {
            model: model.clone(),
            environment: vec![EnvironmentObject {
                name: "wall".into(),
                surface: HalfSpace { normal, offset },
                stiffness: 3500.0,
                damping: 0.0,
            }],
            probes,
            disturbances: Vec::new(),
            dt: 1e-3,
            substeps: 1,
        };
        let state = plant.initial_state(JointState::at_rest(q))?;
        let feedback = Oracle::new(OracleNoise::off(), rng.random()).tick(&state.contacts, 0.25);
        reported += feedback.len();
        for fb in &feedback {
            let strongest = state
                .contacts
                .iter()
                .filter(|c| c.link() == fb.link)
                .max_by(|a, b| a.force.norm().total_cmp(&b.force.norm()))
                .expect("reported link is in contact");
            if strongest.force != fb.force || strongest.position != fb.position || fb.timestamp != 0.25 {
                mismatches += 1;
            }
        }
        let links: std::collections::BTreeSet<usize> = state.contacts.iter().map(|c| c.link()).collect();
        if links.len() != feedback.len() {
            mismatches += 1;
        }
    }
    Ok(CheckResult {
        name: "oracle fidelity",
        passed: mismatches == 0 && reported >= samples,
        detail: format!("{samples} random contact sets, {reported} reports, {mismatches} mismatches"),
    })
}

/// Every battery with its default sample counts.
pub fn run_all(seed: u64, plant_substeps: usize) -> Result<Vec<CheckResult>> {
    Ok(vec![
        derivative_battery(1000, seed),
        closure_battery(1000, seed.wrapping_add(1)),
        tangential_battery(1000, seed.wrapping_add(2)),
        solver_battery(200, seed.wrapping_add(3)),
        energy_battery(plant_substeps)?,
        oracle_battery(200, seed.wrapping_add(4))?,
    ])
}
