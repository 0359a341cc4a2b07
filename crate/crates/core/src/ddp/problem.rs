use nalgebra::{DMatrix, DVector};

use crate::costs::CostEval;
use crate::{Error, Result};

/// State and control sequences of a shooting problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `horizon + 1` states.
    pub xs: Vec<DVector<f64>>,
    /// `horizon` controls.
    pub us: Vec<DVector<f64>>,
}

impl Trajectory {
    /// Every state equal to `x`, every control equal to `u`.
    pub fn constant(x: &DVector<f64>, u: &DVector<f64>, horizon: usize) -> Self {
        Self { xs: vec![x.clone(); horizon + 1], us: vec![u.clone(); horizon] }
    }

    /// `us` rolled out from the problem's initial state; the result has no
    /// gaps.
    pub fn rollout<P: ShootingProblem>(problem: &P, us: Vec<DVector<f64>>) -> Result<Self> {
        let mut xs = Vec::with_capacity(us.len() + 1);
        xs.push(problem.initial_state());
        for (t, u) in us.iter().enumerate() {
            let (next, _) = problem.step(t, &xs[t], u)?;
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericalFailure(format!("rollout diverged at stage {t}")));
            }
            xs.push(next);
        }
        Ok(Self { xs, us })
    }

    pub fn horizon(&self) -> usize {
        self.us.len()
    }

    /// Drops the first stage and repeats the last one.
    pub fn shifted(&self) -> Self {
        let mut xs: Vec<_> = self.xs.iter().skip(1).cloned().collect();
        let mut us: Vec<_> = self.us.iter().skip(1).cloned().collect();
        if let Some(x) = xs.last().cloned() {
            xs.push(x);
        }
        if let Some(u) = self.us.last().cloned() {
            us.push(u);
        }
        Self { xs, us }
    }

    pub(crate) fn check(&self, horizon: usize, nx: usize, nu: usize) -> Result<()> {
        let ok = self.xs.len() == horizon + 1
            && self.us.len() == horizon
            && self.xs.iter().all(|x| x.len() == nx)
            && self.us.iter().all(|u| u.len() == nu);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "trajectory does not match horizon {horizon}, state dim {nx}, control dim {nu}"
            )))
        }
    }
}

/// Linearized dynamics and quadratic cost model of one stage.
#[derive(Debug, Clone)]
pub struct StageDerivatives {
    pub fx: DMatrix<f64>,
    pub fu: DMatrix<f64>,
    pub cost: CostEval,
}

/// A discrete-time optimal control problem with box-bounded controls.
pub trait ShootingProblem {
    fn horizon(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn initial_state(&self) -> DVector<f64>;
    fn control_lower(&self) -> &DVector<f64>;
    fn control_upper(&self) -> &DVector<f64>;
    /// Next state and stage cost.
    fn step(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, f64)>;
    fn terminal_cost(&self, x: &DVector<f64>) -> Result<f64>;
    fn step_derivatives(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<StageDerivatives>;
    fn terminal_derivatives(&self, x: &DVector<f64>) -> Result<CostEval>;
}

/// Linear dynamics `x⁺ = A x + B u` with cost
/// `½xᵀQx + ½uᵀRu` per stage and `½xᵀQ_f x` at the end.
#[derive(Debug, Clone)]
pub struct LqProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub horizon: usize,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
}

impl LqProblem {
    /// Unit-mass double integrator per axis, regulated to the origin.
    pub fn double_integrator(axes: usize, horizon: usize, dt: f64, x0: DVector<f64>) -> Result<Self> {
        let nx = 2 * axes;
        if x0.len() != nx || horizon == 0 || !(dt > 0.0) {
            return Err(Error::InvalidArgument("bad double-integrator dimensions".into()));
        }
        let mut a = DMatrix::identity(nx, nx);
        let mut b = DMatrix::zeros(nx, axes);
        for i in 0..axes {
            a[(i, axes + i)] = dt;
            b[(i, i)] = 0.5 * dt * dt;
            b[(axes + i, i)] = dt;
        }
        Ok(Self {
            a,
            b,
            q: DMatrix::identity(nx, nx),
            r: DMatrix::identity(axes, axes) * 0.1,
            qf: DMatrix::identity(nx, nx) * 10.0,
            x0,
            horizon,
            u_min: DVector::from_element(axes, -1e6),
            u_max: DVector::from_element(axes, 1e6),
        })
    }

    pub fn with_bounds(mut self, u_min: DVector<f64>, u_max: DVector<f64>) -> Result<Self> {
        if u_min.len() != self.b.ncols()
            || u_max.len() != u_min.len()
            || u_min.iter().zip(u_max.iter()).any(|(l, u)| !(l < u))
        {
            return Err(Error::InvalidArgument("control bounds must satisfy u_min < u_max".into()));
        }
        self.u_min = u_min;
        self.u_max = u_max;
        Ok(self)
    }
}

impl ShootingProblem for LqProblem {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn initial_state(&self) -> DVector<f64> {
        self.x0.clone()
    }

    fn control_lower(&self) -> &DVector<f64> {
        &self.u_min
    }

    fn control_upper(&self) -> &DVector<f64> {
        &self.u_max
    }

    fn step(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let cost = 0.5 * x.dot(&(&self.q * x)) + 0.5 * u.dot(&(&self.r * u));
        Ok((&self.a * x + &self.b * u, cost))
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(0.5 * x.dot(&(&self.qf * x)))
    }

    fn step_derivatives(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<StageDerivatives> {
        let (nx, nu) = (self.state_dim(), self.control_dim());
        let mut cost = CostEval::zeros(nx, nu);
        cost.value = self.step(0, x, u)?.1;
        cost.lx = &self.q * x;
        cost.lu = &self.r * u;
        cost.lxx = self.q.clone();
        cost.luu = self.r.clone();
        Ok(StageDerivatives { fx: self.a.clone(), fu: self.b.clone(), cost })
    }

    fn terminal_derivatives(&self, x: &DVector<f64>) -> Result<CostEval> {
        let mut cost = CostEval::zeros(self.state_dim(), 0);
        cost.value = self.terminal_cost(x)?;
        cost.lx = &self.qf * x;
        cost.lxx = self.qf.clone();
        Ok(cost)
    }
}
