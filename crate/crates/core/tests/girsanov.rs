//! Measure change, weak solutions and the Z-invariance check.

use fbsde::fixtures::{self, Fixture};
use fbsde::girsanov::*;
use fbsde::grid::sample_ensemble;
use fbsde::solver::{solve_global, FdeSolution};
use fbsde::stats::Estimate;
use fbsde::BrownianEnsemble;

const PATHS: usize = 100_000;

fn solve(fx: &Fixture, paths: usize, seed: u64) -> (FdeSolution, BrownianEnsemble) {
    let ens = sample_ensemble(&fx.grid, paths, fx.coeffs.d, seed).unwrap();
    let sol = solve_global(&fx.coeffs, &fx.grid, &fx.initial, &ens, &fx.config).unwrap();
    (sol, ens)
}

#[test]
fn constant_integrand_gives_closed_form_weights() {
    let c = 0.5;
    let fx = fixtures::constant_drift(c).unwrap();
    let (sol, ens) = solve(&fx, PATHS, 42);
    let mc = build_measure_change(&sol, &fx.coeffs, &ens).unwrap();
    let k = fx.grid.steps();
    for p in (0..PATHS).step_by(97) {
        let b_end = ens.brownian_at(p, k)[0];
        let want = (-c * b_end - 0.5 * c * c).exp();
        assert!((mc.weights[p] - want).abs() <= 1e-12 * want, "path {p}");
    }
    let s = mc.summary();
    assert!((s.mean - 1.0).abs() <= 5.0 * s.std_err, "{s:?}");
    assert!(s.min > 0.0);
    assert!(s.tail_mass_fraction < 0.01);

    // W is a Brownian motion under P: E^P[g(W_T)] against a fresh ensemble.
    let fresh = sample_ensemble(&fx.grid, PATHS, 1, 4242).unwrap();
    let fresh_start = fx.initial.sample(PATHS, 4242);
    let fresh_end: Vec<f64> = (0..PATHS).map(|p| fresh_start[p] + fresh.brownian_at(p, k)[0]).collect();
    let clip = |x: f64| x.clamp(-1.0, 1.0);
    for g in [f64::tanh as fn(f64) -> f64, clip] {
        let weighted = weighted_estimate(&mc.w.at(k).iter().map(|&w| g(w)).collect::<Vec<_>>(), &mc.weights);
        let direct = Estimate::from_samples(&fresh_end.iter().map(|&w| g(w)).collect::<Vec<_>>());
        let se = (weighted.std_err.powi(2) + direct.std_err.powi(2)).sqrt();
        assert!((weighted.mean - direct.mean).abs() <= 3.0 * se, "{weighted:?} vs {direct:?}");
    }

    // The remaining quadratic variation of N is deterministic.
    let basis = fx.config.regression_basis(&fx.coeffs);
    let bmo = bmo_diagnostic(&sol, &mc, &[0, 16, 32, 48], &basis).unwrap();
    for probe in &bmo.probes {
        let want = c * c * (1.0 - probe.t);
        assert!((probe.mean - want).abs() <= 0.05 * want.max(1e-12), "{probe:?}");
    }
}

#[test]
fn zero_integrand_leaves_the_measure_alone() {
    let fx = fixtures::heat_tanh().unwrap();
    let (sol, ens) = solve(&fx, 20_000, 3);
    let mc = build_measure_change(&sol, &fx.coeffs, &ens).unwrap();
    assert!(mc.weights.iter().all(|&w| w == 1.0));
    let basis = fx.config.regression_basis(&fx.coeffs);
    let bmo = bmo_diagnostic(&sol, &mc, &[0, 32], &basis).unwrap();
    assert_eq!(bmo.sup_max, 0.0);
}

#[test]
fn trivial_weak_solution_has_no_residual() {
    let fx = fixtures::trivial().unwrap();
    let (sol, ens) = solve(&fx, 5_000, 3);
    let mc = build_measure_change(&sol, &fx.coeffs, &ens).unwrap();
    let weak = assemble_weak_solution(&sol, &mc, &fx.coeffs).unwrap();
    assert!(weak.residual.max_abs < 1e-12, "{:?}", weak.residual);
    assert!(weak.y.as_slice().iter().all(|&y| y == 1.0));
}

#[test]
fn z_surfaces_agree_across_measures() {
    for fx in [fixtures::constant_drift(0.5).unwrap(), fixtures::coupled().unwrap()] {
        let (sol, ens) = solve(&fx, PATHS, 42);
        let mc = build_measure_change(&sol, &fx.coeffs, &ens).unwrap();
        let basis = fx.config.regression_basis(&fx.coeffs);
        let r = check_z_invariance(&sol, &mc, &fx.coeffs, &basis, ZWeighting::OneStep).unwrap();
        assert!(r.max_discrepancy <= 0.05, "{}: {:?}", fx.name, r.max_discrepancy);
        let s = mc.summary();
        assert!((s.mean - 1.0).abs() <= 5.0 * s.std_err, "{}: {s:?}", fx.name);
    }
}

#[test]
fn weights_stay_positive_for_large_integrands() {
    let fx = fixtures::constant_drift(3.0).unwrap();
    let (sol, ens) = solve(&fx, 5_000, 8);
    let mc = build_measure_change(&sol, &fx.coeffs, &ens).unwrap();
    assert!(mc.weights.iter().all(|&w| w > 0.0 && w.is_finite()));
    assert!(mc.effective_sample_size() < 5_000.0);
}

#[test]
fn mismatched_ensemble_is_rejected() {
    let fx = fixtures::trivial().unwrap();
    let (sol, _) = solve(&fx, 2_000, 1);
    let other = sample_ensemble(&fx.grid, 2_000, 1, 2).unwrap();
    assert!(build_measure_change(&sol, &fx.coeffs, &other).is_err());
}
