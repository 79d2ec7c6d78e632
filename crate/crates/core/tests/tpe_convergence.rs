use fastaa::cli::{bench_tpe, random_best, tpe_best, Objective};

#[test]
fn tpe_beats_random_on_toy_objectives() {
    let report = bench_tpe(100, 150, 77).unwrap();
    for suite in &report.suites {
        assert!(suite.wins >= 80, "{}: {} wins", suite.objective.name(), suite.wins);
        assert!(suite.within_tolerance >= 95, "{}: {} within", suite.objective.name(), suite.within_tolerance);
        assert!(suite.mean_best_tpe < suite.mean_best_random);
    }
}

#[test]
fn paired_runs_are_reproducible() {
    for objective in [Objective::Quadratic, Objective::Step] {
        assert_eq!(tpe_best(objective, 60, 5).unwrap(), tpe_best(objective, 60, 5).unwrap());
        assert_eq!(random_best(objective, 60, 5), random_best(objective, 60, 5));
    }
}

#[test]
fn grid_optima_sit_at_the_minimizer() {
    assert!((Objective::Quadratic.grid_optimum() - 0.7).abs() < 1e-9);
    let step = Objective::Step.grid_optimum();
    assert_eq!(Objective::Step.eval(step), 0.0);
    assert!(Objective::Step.eval(0.69) > 0.0 && Objective::Step.eval(0.71) > 0.0);
}
