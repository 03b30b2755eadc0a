//! Merton benchmark, the endowment fixture and martingale optimality.

use std::sync::OnceLock;

use fbsde::fixtures;
use fbsde::girsanov::{bmo_diagnostic, check_z_invariance, ZWeighting};
use fbsde::grid::sample_ensemble;
use fbsde::portfolio::*;
use fbsde::stats::rms;

const PATHS: usize = 100_000;

/// `∫_0^1 μ² / (2γσ̄²) ds` by the trapezoid rule.
fn merton_integral(model: &MarketModel) -> f64 {
    let n = 1000;
    let f = |t: f64| model.market_price_of_risk(t).powi(2) / (2.0 * model.gamma);
    (0..n).map(|i| 0.5 * (f(i as f64 / n as f64) + f((i + 1) as f64 / n as f64)) / n as f64).sum()
}

fn merton() -> &'static PortfolioSolution {
    static SOL: OnceLock<PortfolioSolution> = OnceLock::new();
    SOL.get_or_init(|| {
        let grid = fixtures::portfolio_grid();
        let ens = sample_ensemble(&grid, PATHS, 2, 42).unwrap();
        solve_portfolio(&fixtures::merton_market(), &grid, &ens, &fixtures::portfolio_config()).unwrap()
    })
}

fn endowment() -> &'static PortfolioSolution {
    static SOL: OnceLock<PortfolioSolution> = OnceLock::new();
    SOL.get_or_init(|| {
        let grid = fixtures::portfolio_grid();
        let ens = sample_ensemble(&grid, PATHS, 2, 42).unwrap();
        solve_portfolio(&fixtures::portfolio_market(), &grid, &ens, &fixtures::portfolio_config()).unwrap()
    })
}

#[test]
fn merton_benchmark() {
    let model = fixtures::merton_market();
    let want = merton_integral(&model);
    assert!((want - 0.125).abs() < 1e-12);
    let sol = merton();
    assert!((sol.y0 - want).abs() <= 0.01, "{}", sol.y0);
    assert!(sol.y0_stderr < 0.01 / 3.0);
    assert!((sol.value + (-0.125f64).exp()).abs() <= 0.01, "{}", sol.value);
    assert!(sol.value < 0.0 && sol.value > -1.0);
    for k in 0..sol.pi_star.times() {
        assert!(sol.pi_star.at(k).iter().all(|p| (p - 2.5).abs() <= 0.05), "step {k}");
    }
    assert!(rms(sol.fde.z.as_slice()) < 1e-6);
}

#[test]
fn strategy_is_read_off_z_exactly() {
    let model = fixtures::portfolio_market();
    let sol = endowment();
    for k in 0..sol.pi_star.times() {
        let t = sol.fde.grid.time(k);
        for p in (0..PATHS).step_by(1013) {
            let z = sol.fde.z.get(k, p);
            assert_eq!(sol.pi_star.get(k, p)[0], model.optimal_strategy(t, z));
            assert_eq!(sol.pi_star.get(k, p)[0], -z[1] + 0.1 / (1.0 * 0.2 * 0.2));
        }
    }
}

#[test]
fn endowment_weak_solution() {
    let sol = endowment();
    assert!(sol.weak_sol.residual.weighted_rms <= 1e-2, "{:?}", sol.weak_sol.residual);
    let s = sol.measure.summary();
    assert!((s.mean - 1.0).abs() <= 5.0 * s.std_err, "{s:?}");
    assert!(s.tail_mass_fraction < 0.01);
    let basis = fixtures::portfolio_config().regression_basis(&sol.coeffs);
    let r = check_z_invariance(&sol.fde, &sol.measure, &sol.coeffs, &basis, ZWeighting::OneStep).unwrap();
    assert!(r.max_discrepancy <= 0.05, "{r:?}");
    // Bounded endowment: the value stays between the Merton value shifted by
    // the endowment bounds.
    assert!(sol.y0 > 0.125 - 0.5 && sol.y0 < 0.125 + 0.5);
    assert!(sol.value < 0.0);
}

#[test]
fn remaining_quadratic_variation_shrinks() {
    let sol = endowment();
    let basis = fixtures::portfolio_config().regression_basis(&sol.coeffs);
    let bmo = bmo_diagnostic(&sol.fde, &sol.measure, &[0, 10, 20, 30, 40, 50], &basis).unwrap();
    assert!(bmo.sup_max.is_finite());
    for pair in bmo.probes.windows(2) {
        assert!(pair[1].mean <= pair[0].mean * 1.1 + 1e-12, "{:?}", bmo.probes);
    }
    // Dominated by the market price of risk: mass 0.25 (T - t) plus the Z^V part.
    assert!((bmo.probes[0].mean - 0.25).abs() < 0.05, "{:?}", bmo.probes[0]);
    assert!(bmo.probes.last().unwrap().mean.abs() < 1e-9);
}

#[test]
fn value_scales_with_initial_wealth() {
    let base = fixtures::merton_market();
    let grid = fixtures::optimality_grid();
    let ens = sample_ensemble(&grid, 20_000, 2, 7).unwrap();
    let cfg = fixtures::portfolio_config();
    let a = solve_portfolio(&base, &grid, &ens, &cfg).unwrap();
    let b = solve_portfolio(&base.clone().with_initial(0.4, 1.0, 1.0), &grid, &ens, &cfg).unwrap();
    assert_eq!(a.y0, b.y0);
    assert!((b.value - a.value * (-0.4f64).exp()).abs() < 1e-15);
}

#[test]
fn merton_martingale_optimality() {
    let model = fixtures::merton_market();
    let grid = fixtures::optimality_grid();
    let ens = sample_ensemble(&grid, PATHS, 2, 42).unwrap();
    let sol = solve_portfolio(&model, &grid, &ens, &fixtures::portfolio_config()).unwrap();
    let fresh = sample_ensemble(&grid, PATHS, 2, 4242).unwrap();
    let rep = verify_martingale_optimality(&sol, &model, &[0.5, -0.5, 1.0, -1.0], &fresh).unwrap();
    assert!(rep.optimal().is_martingale(), "{:?}", rep.optimal());
    for s in &rep.strategies[1..] {
        assert!(s.is_supermartingale() && s.strictly_decreasing(), "{s:?}");
        assert!(s.dominated(), "{s:?}");
        assert!(s.gap_to_optimal.mean < 0.0);
    }
    // The penalty is even in δ.
    let (up, down) = (&rep.strategies[1], &rep.strategies[2]);
    let diff = up.value.mean - down.value.mean;
    let se = (up.value.std_err.powi(2) + down.value.std_err.powi(2)).sqrt();
    assert!(diff.abs() <= 2.0 * se, "{diff} vs {se}");
    for (a, b) in up.drifts.iter().zip(&down.drifts) {
        let se = (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
        assert!((a.mean - b.mean).abs() <= 3.0 * se);
    }
    assert!(rep.asset_z().abs() <= 3.0, "{}", rep.asset_z());
    assert!(verify_martingale_optimality(&sol, &model, &[0.5], &ens).is_err());
}

#[test]
fn flat_market_penalises_any_position() {
    let model = fixtures::flat_market();
    let grid = fixtures::optimality_grid();
    let ens = sample_ensemble(&grid, PATHS, 2, 42).unwrap();
    let sol = solve_portfolio(&model, &grid, &ens, &fixtures::portfolio_config()).unwrap();
    assert!(sol.y0.abs() < 1e-12);
    assert_eq!(sol.value, -1.0);
    assert!(sol.pi_star.as_slice().iter().all(|&p| p.abs() < 1e-12));
    let fresh = sample_ensemble(&grid, PATHS, 2, 4243).unwrap();
    let rep = verify_martingale_optimality(&sol, &model, &[1.0], &fresh).unwrap();
    let s = &rep.strategies[1];
    assert!(s.strictly_decreasing(), "{s:?}");
    // Analytic drift: U_k (exp(γ²σ̄²δ²Δt/2) - 1) with U_k = -exp(-γ X_k) and
    // E[U_k] = -exp(γ²σ̄²δ² t_k / 2).
    let c = 0.5 * 0.04;
    for (k, e) in s.drifts.iter().enumerate() {
        let t = grid.time(k);
        let want = -(c * t).exp() * ((c * 0.1).exp() - 1.0);
        assert!((e.mean - want).abs() <= 3.0 * e.std_err, "step {k}: {e:?} vs {want}");
    }
}
