//! Picard windows, residuals, pathwise uniqueness and the density `Z`.

mod support;

use fbsde::fixtures;
use fbsde::grid::sample_ensemble;
use fbsde::solver::*;
use fbsde::stats::mean;
use support::*;

#[test]
fn small_fixtures_contract_and_close() {
    for fx in [fixtures::trivial().unwrap(), fixtures::constant_driver(0.5).unwrap(), fixtures::constant_drift(0.5).unwrap()] {
        let ens = sample_ensemble(&fx.grid, 20_000, 1, 11).unwrap();
        let sol = solve_global(&fx.coeffs, &fx.grid, &fx.initial, &ens, &fx.config).unwrap();
        for r in &sol.iteration_log {
            assert!(r.converged && r.iterations <= 10, "{}: {r:?}", fx.name);
            assert!(r.empirical_factor <= 0.6, "{}: {r:?}", fx.name);
        }
        let res = sol.residuals.unwrap();
        assert_eq!(res.forward_dynamics_max, 0.0, "{}", fx.name);
        assert!(res.backward_dynamics_rms <= 1e-2, "{}: {res:?}", fx.name);
        assert_eq!(sol.windows.first().unwrap().0, 0);
        assert_eq!(sol.windows.last().unwrap().1, fx.grid.steps());
        let again = check_fbsde_residual(&sol, &fx.coeffs, &ens).unwrap();
        assert_eq!(again, res);
    }
}

#[test]
fn coupled_fixture_is_pathwise_unique() {
    let fx = fixtures::coupled().unwrap();
    let ens = sample_ensemble(&fx.grid, 20_000, 1, 12).unwrap();
    let report = empirical_pathwise_uniqueness(&fx.coeffs, &fx.grid, &fx.initial, &ens, &fx.config).unwrap();
    assert!(report.gap <= 2.0 * report.tol, "{report:?}");
}

#[test]
fn heat_martingale_and_density() {
    let fx = fixtures::heat_tanh().unwrap();
    let ens = sample_ensemble(&fx.grid, 100_000, 1, 13).unwrap();
    let sol = solve_global(&fx.coeffs, &fx.grid, &fx.initial, &ens, &fx.config).unwrap();
    // Tower property: with h = 0 the path mean of Y is constant in time.
    let m0 = mean(sol.y.at(0));
    for k in 0..=fx.grid.steps() {
        assert!((mean(sol.y.at(k)) - m0).abs() < 5e-3, "step {k}");
    }
    // Z is the spatial derivative of Y: E[tanh'(x + B_{T-t})].
    let dtanh = |u: f64| 1.0 - u.tanh().powi(2);
    for t in [0.0, 0.25, 0.5, 0.75] {
        let k = fx.grid.index_of(t).unwrap();
        for x in [-1.5, -0.5, 0.0, 0.5, 1.5] {
            let want = heat_expectation(dtanh, x, 1.0 - t);
            let got = sol.z_at(k, &[x], &[0.0])[0];
            assert!((got - want).abs() < 0.05, "t={t} x={x}: {got} vs {want}");
        }
    }
}

#[test]
fn same_seed_same_solution() {
    let fx = fixtures::coupled().unwrap();
    let ens = sample_ensemble(&fx.grid, 5_000, 1, 14).unwrap();
    let a = solve_global(&fx.coeffs, &fx.grid, &fx.initial, &ens, &fx.config).unwrap();
    let b = solve_global(&fx.coeffs, &fx.grid, &fx.initial, &ens, &fx.config).unwrap();
    assert_eq!(a.y.as_slice(), b.y.as_slice());
    assert_eq!(a.z.as_slice(), b.z.as_slice());
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    a.write_csv(&mut ca, 50).unwrap();
    b.write_csv(&mut cb, 50).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn oversized_windows_are_refused_unless_forced() {
    let fx = fixtures::coupled().unwrap();
    let grid = fbsde::TimeGrid::uniform(1.0, 4).unwrap();
    let ens = sample_ensemble(&grid, 2_000, 1, 15).unwrap();
    let err = solve_global(&fx.coeffs, &grid, &fx.initial, &ens, &fx.config).unwrap_err();
    assert!(matches!(err, fbsde::Error::Precondition(_)), "{err}");
    let forced = SolverConfig { force: true, ..fx.config.clone() };
    assert!(solve_global(&fx.coeffs, &grid, &fx.initial, &ens, &forced).is_ok());
}
