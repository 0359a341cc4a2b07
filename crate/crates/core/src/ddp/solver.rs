//! Feasibility-driven DDP with box-constrained controls.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::box_qp::solve_box_qp;
use super::problem::{ShootingProblem, StageDerivatives, Trajectory};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub max_iters: usize,
    /// Threshold on expected improvement and on accepted cost decrease.
    pub tolerance: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub reg_increase: f64,
    pub reg_decrease: f64,
    /// Step lengths tried are 1, ½, …, 2^−step_halvings.
    pub step_halvings: u32,
    pub box_qp_tolerance: f64,
    pub box_qp_max_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tolerance: 1e-6,
            reg_min: 1e-9,
            reg_max: 1e9,
            reg_increase: 10.0,
            reg_decrease: 0.5,
            step_halvings: 10,
            box_qp_tolerance: 1e-9,
            box_qp_max_iters: 100,
        }
    }
}

impl SolverSettings {
    /// Real-time budget used inside the control loop.
    pub fn mpc() -> Self {
        Self { max_iters: 5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters >= 1
            && self.tolerance > 0.0
            && self.reg_min > 0.0
            && self.reg_max >= self.reg_min
            && self.reg_increase > 1.0
            && self.reg_decrease > 0.0
            && self.reg_decrease < 1.0
            && self.box_qp_tolerance > 0.0
            && self.box_qp_max_iters >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid solver settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolverStats {
    /// Completed backward passes.
    pub iterations: usize,
    pub cost: f64,
    /// Largest dynamics defect, infinity norm.
    pub gap_norm: f64,
    pub regularization: f64,
    /// Last accepted step length, 0 when none was accepted.
    pub step_length: f64,
    pub wall_time_s: f64,
    pub rejected_steps: usize,
    pub converged: bool,
    /// Costs of accepted iterates once the trajectory is dynamically feasible,
    /// starting with the first feasible one.
    pub feasible_costs: Vec<f64>,
}

/// Gains of the local control law `δu = k + K δx`.
#[derive(Debug, Clone)]
pub struct StageGains {
    pub k: DVector<f64>,
    pub big_k: DMatrix<f64>,
    /// Dimensions not held at a control bound.
    pub free: Vec<bool>,
}

struct Backward {
    gains: Vec<StageGains>,
    vxx: Vec<DMatrix<f64>>,
    /// Σ first-order expected decrease, including gap terms.
    dg: f64,
    /// Σ second-order term, including gap terms.
    dq: f64,
}

struct Candidate {
    xs: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
    gaps: Vec<DVector<f64>>,
    cost: f64,
}

fn clamp(u: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    u.zip_zip_map(lower, upper, |v, l, h| v.max(l).min(h))
}

fn inf_norm(v: &[DVector<f64>]) -> f64 {
    v.iter().map(|g| g.amax()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Default)]
pub struct BoxFddp {
    pub settings: SolverSettings,
}

impl BoxFddp {
    pub fn new(settings: SolverSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self { settings })
    }

    /// Cost and gaps of a (possibly infeasible) trajectory.
    fn evaluate<P: ShootingProblem>(
        &self,
        problem: &P,
        xs: &[DVector<f64>],
        us: &[DVector<f64>],
    ) -> Result<(f64, Vec<DVector<f64>>)> {
        let horizon = problem.horizon();
        let mut gaps = Vec::with_capacity(horizon + 1);
        gaps.push(problem.initial_state() - &xs[0]);
        let mut cost = 0.0;
        for t in 0..horizon {
            let (next, c) = problem.step(t, &xs[t], &us[t])?;
            gaps.push(next - &xs[t + 1]);
            cost += c;
        }
        cost += problem.terminal_cost(&xs[horizon])?;
        Ok((cost, gaps))
    }

    pub fn solve<P: ShootingProblem>(
        &self,
        problem: &P,
        warm_start: Option<&Trajectory>,
    ) -> Result<(Trajectory, SolverStats)> {
        let started = Instant::now();
        let (horizon, nx, nu) = (problem.horizon(), problem.state_dim(), problem.control_dim());
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        let lower = problem.control_lower().clone();
        let upper = problem.control_upper().clone();
        let mut traj = match warm_start {
            Some(w) => {
                w.check(horizon, nx, nu)?;
                w.clone()
            }
            None => Trajectory::constant(&problem.initial_state(), &DVector::zeros(nu), horizon),
        };
        for u in traj.us.iter_mut() {
            *u = clamp(u, &lower, &upper);
        }

        let (mut cost, mut gaps) = self.evaluate(problem, &traj.xs, &traj.us)?;
        if !cost.is_finite() {
            return Err(Error::NumericalFailure("initial trajectory has non-finite cost".into()));
        }
        let mut feasible = inf_norm(&gaps) == 0.0;
        let mut stats = SolverStats { regularization: self.settings.reg_min, ..Default::default() };
        if feasible {
            stats.feasible_costs.push(cost);
        }
        let mut reg = self.settings.reg_min;
        let mut derivatives: Option<(Vec<StageDerivatives>, _)> = None;

        while stats.iterations < self.settings.max_iters {
            if derivatives.is_none() {
                let stages = (0..horizon)
                    .map(|t| problem.step_derivatives(t, &traj.xs[t], &traj.us[t]))
                    .collect::<Result<Vec<_>>>()?;
                let terminal = problem.terminal_derivatives(&traj.xs[horizon])?;
                derivatives = Some((stages, terminal));
            }
            let (stages, terminal) = derivatives.as_ref().unwrap();
            if feasible {
                for g in gaps.iter_mut() {
                    g.fill(0.0);
                }
            }

            let backward = loop {
                match self.backward_pass(stages, terminal, &traj, &gaps, feasible, reg, &lower, &upper) {
                    Some(b) => break b,
                    None => {
                        reg *= self.settings.reg_increase;
                        if reg > self.settings.reg_max {
                            return Err(Error::SolverStalled("backward pass failed at maximum regularization".into()));
                        }
                    }
                }
            };
            stats.iterations += 1;
            if feasible && backward.dg.abs() < self.settings.tolerance {
                stats.converged = true;
                break;
            }

            let mut accepted = None;
            for halving in 0..=self.settings.step_halvings {
                let alpha = 0.5f64.powi(halving as i32);
                let candidate = match self.forward_pass(problem, &traj, &gaps, &backward.gains, alpha, &lower, &upper) {
                    Ok(c) if c.cost.is_finite() => c,
                    Ok(_) | Err(Error::NumericalFailure(_)) => {
                        stats.rejected_steps += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let mut dv = 0.0;
                if !feasible {
                    for (t, gap) in gaps.iter().enumerate().take(horizon + 1) {
                        let dx = &traj.xs[t] - &candidate.xs[t];
                        dv -= gap.dot(&(&backward.vxx[t] * dx));
                    }
                }
                let d0 = backward.dg + dv;
                let d1 = backward.dq - 2.0 * dv;
                let expected = alpha * (d0 + 0.5 * alpha * d1);
                let actual = cost - candidate.cost;
                let ok = if feasible {
                    actual >= 0.0 && actual >= 0.1 * expected
                } else if expected >= 0.0 {
                    actual > 0.1 * expected || d0.abs() < self.settings.tolerance
                } else {
                    actual > 2.0 * expected
                };
                log::trace!(
                    "alpha {alpha:.3e}: actual {actual:.3e}, expected {expected:.3e}, d0 {d0:.3e}, d1 {d1:.3e}"
                );
                if ok {
                    accepted = Some((alpha, candidate, actual));
                    break;
                }
                stats.rejected_steps += 1;
            }

            match accepted {
                Some((alpha, candidate, decrease)) => {
                    let was_feasible = feasible;
                    traj.xs = candidate.xs;
                    traj.us = candidate.us;
                    gaps = candidate.gaps;
                    cost = candidate.cost;
                    feasible = was_feasible || alpha == 1.0;
                    derivatives = None;
                    stats.step_length = alpha;
                    if feasible {
                        stats.feasible_costs.push(cost);
                    }
                    if alpha > 0.5 - 1e-12 {
                        reg = (reg * self.settings.reg_decrease).max(self.settings.reg_min);
                    } else if alpha < 1.0 / 64.0 {
                        reg = (reg * self.settings.reg_increase).min(self.settings.reg_max);
                    }
                    if was_feasible && decrease < self.settings.tolerance {
                        stats.converged = true;
                        break;
                    }
                }
                None => {
                    stats.step_length = 0.0;
                    reg *= self.settings.reg_increase;
                    if reg > self.settings.reg_max {
                        return Err(Error::SolverStalled("no step accepted at maximum regularization".into()));
                    }
                }
            }
        }

        stats.cost = cost;
        stats.gap_norm = if feasible { 0.0 } else { inf_norm(&gaps) };
        stats.regularization = reg;
        stats.wall_time_s = started.elapsed().as_secs_f64();
        Ok((traj, stats))
    }

    /// Riccati sweep with the box QP at every stage. `None` if a control
    /// Hessian is not positive definite at this regularization.
    #[allow(clippy::too_many_arguments)]
    fn backward_pass(
        &self,
        stages: &[StageDerivatives],
        terminal: &crate::costs::CostEval,
        traj: &Trajectory,
        gaps: &[DVector<f64>],
        feasible: bool,
        reg: f64,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
    ) -> Option<Backward> {
        let horizon = stages.len();
        let mut vx = vec![DVector::zeros(0); horizon + 1];
        let mut vxx = vec![DMatrix::zeros(0, 0); horizon + 1];
        let mut gains = Vec::with_capacity(horizon);
        vxx[horizon] = terminal.lxx.clone();
        vx[horizon] = terminal.lx.clone();
        if !feasible {
            vx[horizon] += &vxx[horizon] * &gaps[horizon];
        }
        let mut dg = 0.0;
        let mut dq = 0.0;
        if !feasible {
            dg -= vx[horizon].dot(&gaps[horizon]);
            dq += gaps[horizon].dot(&(&vxx[horizon] * &gaps[horizon]));
        }

        for t in (0..horizon).rev() {
            let s = &stages[t];
            let vxx_next = &vxx[t + 1];
            let vx_next = &vx[t + 1];
            let fxt_vxx = s.fx.transpose() * vxx_next;
            let fut_vxx = s.fu.transpose() * vxx_next;
            let qx = &s.cost.lx + s.fx.transpose() * vx_next;
            let qu = &s.cost.lu + s.fu.transpose() * vx_next;
            let qxx = &s.cost.lxx + &fxt_vxx * &s.fx;
            let mut quu = &s.cost.luu + &fut_vxx * &s.fu;
            let qux = &s.cost.lux + &fut_vxx * &s.fx;
            quu = 0.5 * (&quu + quu.transpose());
            for i in 0..quu.nrows() {
                quu[(i, i)] += reg;
            }

            let u = &traj.us[t];
            let qp = solve_box_qp(
                &quu,
                &qu,
                &(lower - u),
                &(upper - u),
                &DVector::zeros(u.len()),
                self.settings.box_qp_tolerance,
                self.settings.box_qp_max_iters,
            )?;
            let k = qp.x;
            let nu = u.len();
            let nx = qx.len();
            let mut big_k = DMatrix::zeros(nu, nx);
            if let Some(factor) = &qp.free_factor {
                let idx: Vec<usize> = (0..nu).filter(|&i| qp.free[i]).collect();
                let qux_free = DMatrix::from_fn(idx.len(), nx, |r, c| qux[(idx[r], c)]);
                let k_free = -factor.solve(&qux_free);
                for (r, &i) in idx.iter().enumerate() {
                    big_k.set_row(i, &k_free.row(r));
                }
            }
            if !k.iter().chain(big_k.iter()).all(|v| v.is_finite()) {
                return None;
            }

            let kt_quu = big_k.transpose() * &quu;
            let mut v_x = &qx + &kt_quu * &k + big_k.transpose() * &qu + qux.transpose() * &k;
            let mut v_xx = &qxx + &kt_quu * &big_k + big_k.transpose() * &qux + qux.transpose() * &big_k;
            v_xx = 0.5 * (&v_xx + v_xx.transpose());
            if !feasible {
                v_x += &v_xx * &gaps[t];
            }
            dg -= qu.dot(&k);
            dq -= k.dot(&(&quu * &k));
            if !feasible {
                dg -= v_x.dot(&gaps[t]);
                dq += gaps[t].dot(&(&v_xx * &gaps[t]));
            }
            vx[t] = v_x;
            vxx[t] = v_xx;
            gains.push(StageGains { k, big_k, free: qp.free });
        }
        gains.reverse();
        Some(Backward { gains, vxx, dg, dq })
    }

    /// Nonlinear rollout; gaps shrink by the factor `1 − alpha`.
    #[allow(clippy::too_many_arguments)]
    fn forward_pass<P: ShootingProblem>(
        &self,
        problem: &P,
        traj: &Trajectory,
        gaps: &[DVector<f64>],
        gains: &[StageGains],
        alpha: f64,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
    ) -> Result<Candidate> {
        let horizon = traj.horizon();
        let mut xs = Vec::with_capacity(horizon + 1);
        let mut us = Vec::with_capacity(horizon);
        let mut new_gaps = Vec::with_capacity(horizon + 1);
        let mut cost = 0.0;
        let mut next = problem.initial_state();
        for t in 0..=horizon {
            let x = &next - (1.0 - alpha) * &gaps[t];
            new_gaps.push(&next - &x);
            if t == horizon {
                cost += problem.terminal_cost(&x)?;
                xs.push(x);
                break;
            }
            let dx = &x - &traj.xs[t];
            let g = &gains[t];
            let u = clamp(&(&traj.us[t] + alpha * &g.k + &g.big_k * dx), lower, upper);
            let (n, c) = problem.step(t, &x, &u)?;
            if !n.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericalFailure(format!("rollout diverged at stage {t}")));
            }
            cost += c;
            next = n;
            xs.push(x);
            us.push(u);
        }
        Ok(Candidate { xs, us, gaps: new_gaps, cost })
    }
}
