//! Box-constrained feasibility-driven DDP for generic shooting problems.

mod box_qp;
mod problem;
mod solver;

pub use box_qp::{solve_box_qp, BoxQpSolution};
pub use problem::{LqProblem, ShootingProblem, StageDerivatives, Trajectory};
pub use solver::{BoxFddp, SolverSettings, SolverStats, StageGains};

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    /// Finite-horizon discrete Riccati recursion, rolled out from `x0`.
    fn riccati(p: &LqProblem) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
        let mut s = p.qf.clone();
        let mut gains = Vec::new();
        for _ in 0..p.horizon {
            let bt_s = p.b.transpose() * &s;
            let k = -(&p.r + &bt_s * &p.b).lu().solve(&(&bt_s * &p.a)).unwrap();
            s = &p.q + p.a.transpose() * &s * (&p.a + &p.b * &k);
            s = 0.5 * (&s + s.transpose());
            gains.push(k);
        }
        gains.reverse();
        let mut x = p.x0.clone();
        let mut us = Vec::new();
        for k in &gains {
            let u = k * &x;
            x = &p.a * &x + &p.b * &u;
            us.push(u);
        }
        (us, gains)
    }

    fn fixture() -> LqProblem {
        LqProblem::double_integrator(2, 20, 0.1, DVector::from_vec(vec![1.0, -0.5, 0.3, 0.2])).unwrap()
    }

    #[test]
    fn matches_riccati_from_cold_start() {
        let p = fixture();
        let (traj, stats) = BoxFddp::default().solve(&p, None).unwrap();
        let (us, _) = riccati(&p);
        let err = traj.us.iter().zip(&us).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max control error {err}");
        assert!(stats.converged);
        assert_eq!(stats.gap_norm, 0.0);
    }

    #[test]
    fn first_full_step_is_optimal_from_feasible_start() {
        let p = fixture();
        let mut warm = Trajectory::constant(&p.x0, &DVector::zeros(2), p.horizon);
        for t in 0..p.horizon {
            warm.xs[t + 1] = &p.a * &warm.xs[t];
        }
        let solver = BoxFddp::new(SolverSettings { max_iters: 1, ..Default::default() }).unwrap();
        let (traj, stats) = solver.solve(&p, Some(&warm)).unwrap();
        assert_eq!(stats.step_length, 1.0);
        let (us, _) = riccati(&p);
        let err = traj.us.iter().zip(&us).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        assert!(err < 1e-7, "max control error {err}");
    }

    #[test]
    fn backward_gains_match_riccati() {
        let p = fixture();
        let (traj, _) = BoxFddp::default().solve(&p, None).unwrap();
        let (_, gains) = riccati(&p);
        // At the optimum, δu = K δx reproduces the Riccati feedback: perturb
        // the initial state and re-solve with one iteration.
        let mut shifted = p.clone();
        shifted.x0 = &p.x0 + DVector::from_vec(vec![1e-3, 0.0, -2e-3, 1e-3]);
        let solver = BoxFddp::new(SolverSettings { max_iters: 1, ..Default::default() }).unwrap();
        let (moved, _) = solver.solve(&shifted, Some(&traj)).unwrap();
        let predicted = &traj.us[0] + &gains[0] * (&shifted.x0 - &p.x0);
        let err = (&moved.us[0] - predicted).amax();
        assert!(err < 1e-7, "feedback error {err}");
    }

    #[test]
    fn warm_start_at_optimum_converges_immediately() {
        let p = fixture();
        let (traj, _) = BoxFddp::default().solve(&p, None).unwrap();
        let (again, stats) = BoxFddp::default().solve(&p, Some(&traj)).unwrap();
        assert!(stats.iterations <= 2, "{} iterations", stats.iterations);
        assert_eq!(stats.rejected_steps, 0);
        assert!(stats.converged);
        for (a, b) in again.us.iter().zip(&traj.us) {
            assert!((a - b).amax() < 1e-9);
        }
    }

    #[test]
    fn zero_cost_gives_zero_gains() {
        let mut p = fixture();
        p.q.fill(0.0);
        p.qf.fill(0.0);
        p.r = DMatrix::identity(2, 2) * 1e-12;
        let (traj, stats) = BoxFddp::default().solve(&p, None).unwrap();
        assert!(traj.us.iter().all(|u| u.amax() < 1e-12));
        assert!(stats.converged);
    }

    #[test]
    fn bounded_controls_are_exactly_feasible() {
        let p = fixture().with_bounds(DVector::from_element(2, -0.4), DVector::from_element(2, 0.3)).unwrap();
        let (unbounded, _) = riccati(&p);
        assert!(unbounded.iter().any(|u| u.amax() > 0.4), "fixture must violate the bounds");
        let (traj, stats) = BoxFddp::default().solve(&p, None).unwrap();
        for u in &traj.us {
            for i in 0..2 {
                assert!(u[i] >= -0.4 && u[i] <= 0.3, "{u}");
            }
        }
        assert!(traj.us.iter().any(|u| u[0] == -0.4 || u[1] == -0.4 || u[0] == 0.3 || u[1] == 0.3));
        assert!(stats.converged);
        for w in stats.feasible_costs.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn clamped_rows_have_zero_feedback() {
        // Tight bounds at every stage: the solution sits on the bound and the
        // feedback can only act on free dimensions, so a small perturbation of
        // x0 leaves the clamped first control unchanged.
        let p = fixture().with_bounds(DVector::from_element(2, -0.05), DVector::from_element(2, 0.05)).unwrap();
        let (traj, _) = BoxFddp::default().solve(&p, None).unwrap();
        let clamped: Vec<usize> = (0..2).filter(|&i| traj.us[0][i].abs() == 0.05).collect();
        assert!(!clamped.is_empty());
        let mut shifted = p.clone();
        shifted.x0 = &p.x0 + DVector::from_element(4, 1e-4);
        let solver = BoxFddp::new(SolverSettings { max_iters: 1, ..Default::default() }).unwrap();
        let (moved, _) = solver.solve(&shifted, Some(&traj)).unwrap();
        for i in clamped {
            assert_eq!(moved.us[0][i], traj.us[0][i]);
        }
    }

    #[test]
    fn solutions_are_deterministic() {
        let p = fixture().with_bounds(DVector::from_element(2, -0.4), DVector::from_element(2, 0.3)).unwrap();
        let (a, _) = BoxFddp::default().solve(&p, None).unwrap();
        let (b, _) = BoxFddp::default().solve(&p, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shift_duplicates_last_stage() {
        let xs: Vec<_> = (0..4).map(|i| DVector::from_element(1, i as f64)).collect();
        let us: Vec<_> = (0..3).map(|i| DVector::from_element(1, 10.0 + i as f64)).collect();
        let s = Trajectory { xs, us }.shifted();
        assert_eq!(s.xs.iter().map(|x| x[0]).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 3.0]);
        assert_eq!(s.us.iter().map(|u| u[0]).collect::<Vec<_>>(), vec![11.0, 12.0, 12.0]);
    }

    #[test]
    fn mismatched_warm_start_is_rejected() {
        let p = fixture();
        let bad = Trajectory::constant(&p.x0, &DVector::zeros(2), 3);
        assert!(BoxFddp::default().solve(&p, Some(&bad)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_lq_matches_riccati(
            x0 in proptest::collection::vec(-2.0f64..2.0, 4),
            horizon in 1usize..30,
            dt in 0.01f64..0.3,
        ) {
            let p = LqProblem::double_integrator(2, horizon, dt, DVector::from_vec(x0)).unwrap();
            let (traj, stats) = BoxFddp::default().solve(&p, None).unwrap();
            let (us, _) = riccati(&p);
            let err = traj.us.iter().zip(&us).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
            prop_assert!(err < 1e-6, "error {}", err);
            prop_assert!(stats.converged);
        }

        #[test]
        fn accepted_feasible_costs_never_increase(
            x0 in proptest::collection::vec(-2.0f64..2.0, 4),
            bound in 0.05f64..2.0,
        ) {
            let p = LqProblem::double_integrator(2, 15, 0.1, DVector::from_vec(x0)).unwrap()
                .with_bounds(DVector::from_element(2, -bound), DVector::from_element(2, bound)).unwrap();
            let (traj, stats) = BoxFddp::default().solve(&p, None).unwrap();
            for w in stats.feasible_costs.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            for u in &traj.us {
                prop_assert!(u.iter().all(|v| v.abs() <= bound));
            }
        }
    }
}
