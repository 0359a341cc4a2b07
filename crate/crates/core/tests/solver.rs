use contact_mpc::ddp::{BoxFddp, LqProblem, SolverSettings};
use nalgebra::DVector;
use proptest::prelude::*;

#[test]
fn unconstrained_lq_converges_in_one_step() {
    let x0 = DVector::from_vec(vec![0.4, -0.1, 0.0, 0.3]);
    let problem = LqProblem::double_integrator(2, 30, 0.05, x0).unwrap();
    let solver = BoxFddp::new(SolverSettings::default()).unwrap();
    let (traj, stats) = solver.solve(&problem, None).unwrap();
    assert!(stats.converged);
    assert!(stats.iterations <= 2);
    assert_eq!(traj.us.len(), 30);
    assert!(traj.xs.last().unwrap().norm() < 0.4);
    let (_, warm) = solver.solve(&problem, Some(&traj)).unwrap();
    assert!(warm.converged && warm.iterations <= 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bounded_controls_stay_inside_the_box(
        bound in 0.05f64..1.0,
        x0 in proptest::collection::vec(-1.0f64..1.0, 4),
    ) {
        let problem = LqProblem::double_integrator(2, 20, 0.05, DVector::from_vec(x0))
            .unwrap()
            .with_bounds(DVector::from_element(2, -bound), DVector::from_element(2, bound))
            .unwrap();
        let solver = BoxFddp::new(SolverSettings::default()).unwrap();
        let (traj, stats) = solver.solve(&problem, None).unwrap();
        for u in &traj.us {
            prop_assert!(u.iter().all(|c| c.abs() <= bound));
        }
        prop_assert!(stats.feasible_costs.windows(2).all(|w| w[1] <= w[0]));
    }
}
