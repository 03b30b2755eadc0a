//! Exponential-utility investment with a nontradeable asset.
//!
//! The investor trades `S` and holds a claim `g(V_T, S_T)` on a correlated
//! nontradeable asset `V`. Writing the value process as
//! `-exp(-γ(X + Y))` leads to a quadratic BSDE for `Y`. That BSDE is solved
//! weakly: a linear FBSDE in `(ln V, ln S, Y)` is solved under `Q` and the
//! Girsanov pass with integrand `((γ/2) Z^V, μ^S / σ̄^S)` moves it to `P`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientSet;
use crate::error::{invalid, Result};
use crate::girsanov::{
    assemble_weak_solution_with, build_measure_change_with, weighted_estimate, MeasureChange, WeakSolution, WeakTerminal,
};
use crate::grid::{BrownianEnsemble, TimeGrid};
use crate::process::EnsembleProcess;
use crate::solver::{solve_global, FdeSolution, InitialState, SolverConfig};
use crate::stats::{pairwise_sum, Estimate};

pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// `g(v, s)`.
pub type EndowmentFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Smallest admissible `C₁` when the forward drift does not depend on `Z`.
const C1_FLOOR: f64 = 1e-6;
/// Log-price box half width used for the terminal Lipschitz bound.
const LOG_RADIUS: f64 = 1.5;
const SAMPLE_TIMES: usize = 201;

/// Market of one traded asset `S` and one nontradeable asset `V`:
///
/// ```text
/// dS/S = μ^S dt + σ̄^S dW̄,
/// dV/V = μ^V dt + σ^V dW^V + σ̄^V dW̄.
/// ```
#[derive(Clone)]
pub struct MarketModel {
    pub mu_s: TimeFn,
    pub sigma_bar_s: TimeFn,
    pub mu_v: TimeFn,
    pub sigma_v: TimeFn,
    pub sigma_bar_v: TimeFn,
    pub gamma: f64,
    pub g: EndowmentFn,
    /// Claimed `sup |g|`.
    pub g_bound: f64,
    /// Claimed Lipschitz constant of `g` in `(v, s)`.
    pub g_lipschitz: f64,
    pub x0: f64,
    pub v0: f64,
    pub s0: f64,
    pub horizon: f64,
}

impl fmt::Debug for MarketModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarketModel")
            .field("mu_s(0)", &(self.mu_s)(0.0))
            .field("sigma_bar_s(0)", &(self.sigma_bar_s)(0.0))
            .field("mu_v(0)", &(self.mu_v)(0.0))
            .field("sigma_v(0)", &(self.sigma_v)(0.0))
            .field("sigma_bar_v(0)", &(self.sigma_bar_v)(0.0))
            .field("gamma", &self.gamma)
            .field("x0", &self.x0)
            .field("v0", &self.v0)
            .field("s0", &self.s0)
            .field("horizon", &self.horizon)
            .finish()
    }
}

fn constant(c: f64) -> TimeFn {
    Arc::new(move |_| c)
}

impl MarketModel {
    /// Constant coefficients, no endowment, `x0 = 0`, `v0 = s0 = 1`.
    pub fn constant(mu_s: f64, sigma_bar_s: f64, mu_v: f64, sigma_v: f64, sigma_bar_v: f64, gamma: f64, horizon: f64) -> Self {
        Self {
            mu_s: constant(mu_s),
            sigma_bar_s: constant(sigma_bar_s),
            mu_v: constant(mu_v),
            sigma_v: constant(sigma_v),
            sigma_bar_v: constant(sigma_bar_v),
            gamma,
            g: Arc::new(|_, _| 0.0),
            g_bound: 0.0,
            g_lipschitz: 0.0,
            x0: 0.0,
            v0: 1.0,
            s0: 1.0,
            horizon,
        }
    }

    pub fn with_endowment(mut self, g: impl Fn(f64, f64) -> f64 + Send + Sync + 'static, bound: f64, lipschitz: f64) -> Self {
        self.g = Arc::new(g);
        self.g_bound = bound;
        self.g_lipschitz = lipschitz;
        self
    }

    pub fn with_initial(mut self, x0: f64, v0: f64, s0: f64) -> Self {
        self.x0 = x0;
        self.v0 = v0;
        self.s0 = s0;
        self
    }

    /// Market price of risk `μ^S / σ̄^S`.
    pub fn market_price_of_risk(&self, t: f64) -> f64 {
        (self.mu_s)(t) / (self.sigma_bar_s)(t)
    }

    /// Drift of `Y` in `dY = -h dt + Z dB`: `-(μ^S)² / (2γ (σ̄^S)²)`.
    pub fn backward_drift(&self, t: f64) -> f64 {
        let l = self.market_price_of_risk(t);
        -l * l / (2.0 * self.gamma)
    }

    /// `((γ/2) Z^V, μ^S / σ̄^S)`, the integrand of `N` against `(B^V, B̄)`.
    pub fn girsanov_integrand(&self, t: f64, z: &[f64], out: &mut [f64]) {
        out[0] = 0.5 * self.gamma * z[0];
        out[1] = self.market_price_of_risk(t);
    }

    /// `-Z̄ + μ^S / (γ (σ̄^S)²)`.
    pub fn optimal_strategy(&self, t: f64, z: &[f64]) -> f64 {
        let s = (self.sigma_bar_s)(t);
        -z[1] + (self.mu_s)(t) / (self.gamma * s * s)
    }

    /// Driver of the quadratic BSDE under `P`, `dY = f dt + Z dW`.
    pub fn quadratic_driver(&self, t: f64, z: &[f64]) -> f64 {
        0.5 * self.gamma * z[0] * z[0] + self.market_price_of_risk(t) * z[1] + self.backward_drift(t)
    }

    /// `-exp(-γ(x + y))`.
    pub fn utility_value(&self, x: f64, y: f64) -> f64 {
        -(-self.gamma * (x + y)).exp()
    }

    /// Left-point sum of `μ^S` over the grid.
    pub fn integrated_drift(&self, grid: &TimeGrid) -> f64 {
        (0..grid.steps()).map(|k| (self.mu_s)(grid.time(k)) * grid.dt(k)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("horizon must be positive"));
        }
        if !self.x0.is_finite() {
            return Err(invalid("x0 must be finite"));
        }
        if !(self.v0 > 0.0 && self.s0 > 0.0 && self.v0.is_finite() && self.s0.is_finite()) {
            return Err(invalid("v0 and s0 must be positive"));
        }
        let mut inf_sigma = f64::INFINITY;
        for i in 0..SAMPLE_TIMES {
            let t = self.horizon * i as f64 / (SAMPLE_TIMES - 1) as f64;
            for (name, f) in [
                ("mu_s", &self.mu_s),
                ("sigma_bar_s", &self.sigma_bar_s),
                ("mu_v", &self.mu_v),
                ("sigma_v", &self.sigma_v),
                ("sigma_bar_v", &self.sigma_bar_v),
            ] {
                let v = f(t);
                if !v.is_finite() {
                    return Err(invalid(format!("{name} is not finite at t={t}")));
                }
            }
            inf_sigma = inf_sigma.min((self.sigma_bar_s)(t).abs());
        }
        if !(inf_sigma > 1e-12) {
            return Err(invalid("sigma_bar_s must stay away from zero"));
        }
        if !(self.g_bound >= 0.0 && self.g_bound.is_finite() && self.g_lipschitz >= 0.0 && self.g_lipschitz.is_finite()) {
            return Err(invalid("endowment bound and Lipschitz constant must be finite and non-negative"));
        }
        self.check_endowment()
    }

    fn check_endowment(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e11_d0e5);
        let (vmax, smax) = (5.0 * self.v0, 5.0 * self.s0);
        let slack = |b: f64| b * (1.0 + 1e-9) + 1e-12;
        for i in 0..512 {
            let (v, s) = (rng.random_range(0.0..=vmax), rng.random_range(0.0..=smax));
            let (v2, s2) = if i % 2 == 1 {
                (v + rng.random_range(-1e-3..=1e-3), s + rng.random_range(-1e-3..=1e-3))
            } else {
                (rng.random_range(0.0..=vmax), rng.random_range(0.0..=smax))
            };
            let (a, b) = ((self.g)(v, s), (self.g)(v2.max(0.0), s2.max(0.0)));
            if !(a.is_finite() && b.is_finite()) {
                return Err(invalid(format!("endowment is not finite at ({v}, {s})")));
            }
            if a.abs() > slack(self.g_bound) {
                return Err(invalid(format!("endowment exceeds its bound {}: |g({v}, {s})| = {}", self.g_bound, a.abs())));
            }
            let gap = (v - v2.max(0.0)).hypot(s - s2.max(0.0));
            if (a - b).abs() > slack(self.g_lipschitz * gap) {
                return Err(invalid(format!("endowment violates its Lipschitz constant {}", self.g_lipschitz)));
            }
        }
        Ok(())
    }
}

/// The linear FBSDE in `(ln V, ln S)` together with its start.
#[derive(Debug, Clone)]
pub struct PortfolioFbsde {
    pub coeffs: CoefficientSet,
    /// `(ln v0, ln s0)`.
    pub start: Vec<f64>,
}

/// Encodes
///
/// ```text
/// d ln V = [μ^V - ((σ^V)² + (σ̄^V)²)/2 - σ^V (γ/2) Z^V - σ̄^V μ^S/σ̄^S] dt + σ^V dB^V + σ̄^V dB̄,
/// d ln S = -(σ̄^S)²/2 dt + σ̄^S dB̄,
/// dY     = -(μ^S)²/(2γ(σ̄^S)²) dt + Z^V dB^V + Z̄ dB̄,   Y_T = g(V_T, S_T).
/// ```
pub fn build_portfolio_fbsde(model: &MarketModel) -> Result<PortfolioFbsde> {
    model.validate()?;
    let start = vec![model.v0.ln(), model.s0.ln()];
    let mut sup_coupling: f64 = 0.0;
    for i in 0..SAMPLE_TIMES {
        let t = model.horizon * i as f64 / (SAMPLE_TIMES - 1) as f64;
        sup_coupling = sup_coupling.max((model.sigma_v)(t).abs() * 0.5 * model.gamma);
    }
    let c1 = sup_coupling.max(C1_FLOOR);
    // |∇ g(e^a, e^b)| ≤ L_g |(e^a, e^b)| on the box around the start.
    let c2 = model.g_lipschitz * ((2.0 * (start[0] + LOG_RADIUS)).exp() + (2.0 * (start[1] + LOG_RADIUS)).exp()).sqrt();

    let (mh, mf, mphi, msig) = (model.clone(), model.clone(), model.clone(), model.clone());
    let coeffs = CoefficientSet::builder(1, 2)
        .driver(move |t, _y, _z, out| out[0] = -mh.backward_drift(t))
        .drift(move |t, _y, z, out| {
            let (sv, sbv, sbs) = ((mf.sigma_v)(t), (mf.sigma_bar_v)(t), (mf.sigma_bar_s)(t));
            out[0] = (mf.mu_v)(t) - 0.5 * (sv * sv + sbv * sbv) - sv * 0.5 * mf.gamma * z[0] - sbv * mf.market_price_of_risk(t);
            out[1] = -0.5 * sbs * sbs;
        })
        .terminal(move |x, out| out[0] = (mphi.g)(x[0].exp(), x[1].exp()))
        .diffusion(move |t, out| {
            out[0] = (msig.sigma_v)(t);
            out[1] = (msig.sigma_bar_v)(t);
            out[2] = 0.0;
            out[3] = (msig.sigma_bar_s)(t);
        })
        .constants(c1, c2, model.g_bound)
        .horizon(model.horizon)
        .check_region(start.clone(), LOG_RADIUS)
        .label("portfolio")
        .build()?;
    Ok(PortfolioFbsde { coeffs, start })
}

/// Per-step mean and standard deviation of a scalar ensemble process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub mean: f64,
    pub std_dev: f64,
}

#[derive(Debug, Clone)]
pub struct PortfolioSolution {
    /// Path mean of `Y_0`.
    pub y0: f64,
    pub y0_stderr: f64,
    /// `-exp(-γ(x0 + y0))`.
    pub value: f64,
    /// `π*_k` per path, `K` steps.
    pub pi_star: EnsembleProcess,
    pub weak_sol: WeakSolution,
    pub fde: FdeSolution,
    pub measure: MeasureChange,
    pub coeffs: CoefficientSet,
    pub start: Vec<f64>,
    pub optimality_report: Option<OptimalityReport>,
}

impl PortfolioSolution {
    pub fn pi_star_summary(&self) -> Vec<StepSummary> {
        (0..self.pi_star.times())
            .map(|k| {
                let e = Estimate::from_samples(self.pi_star.at(k));
                StepSummary { mean: e.mean, std_dev: e.std_dev }
            })
            .collect()
    }
}

/// Solves the linear FBSDE, moves it to `P`, and reads off `y0`, the value
/// and `π*`.
pub fn solve_portfolio(model: &MarketModel, grid: &TimeGrid, ensemble: &BrownianEnsemble, cfg: &SolverConfig) -> Result<PortfolioSolution> {
    if (grid.horizon() - model.horizon).abs() > 1e-12 * model.horizon.max(1.0) {
        return Err(invalid("grid horizon differs from the model horizon"));
    }
    let fbsde = build_portfolio_fbsde(model)?;
    let coeffs = fbsde.coeffs;
    let fde = solve_global(&coeffs, grid, &InitialState::Point(fbsde.start.clone()), ensemble, cfg)?;
    let paths = ensemble.num_paths();
    let m = model.clone();
    // The code's convention is N = -Σ θ ΔB, so θ is minus the integrand.
    let theta = move |t: f64, _y: &[f64], z: &[f64], out: &mut [f64]| {
        m.girsanov_integrand(t, z, out);
        out[0] = -out[0];
        out[1] = -out[1];
    };
    let measure = build_measure_change_with(&fde, ensemble, &vec![0.0; paths * 2], &theta, 2)?;
    let weak_sol = assemble_weak_solution_with(&fde, &measure, &coeffs, WeakTerminal::Forward)?;

    let y0_est = Estimate::from_samples(fde.y.at(0));
    let k = grid.steps();
    let mut pi_star = EnsembleProcess::zeros(k, paths, 1);
    for step in 0..k {
        let t = grid.time(step);
        let zs = fde.z.at(step);
        for (p, out) in pi_star.at_mut(step).iter_mut().enumerate() {
            *out = model.optimal_strategy(t, &zs[p * 2..p * 2 + 2]);
        }
    }
    Ok(PortfolioSolution {
        y0: y0_est.mean,
        y0_stderr: y0_est.std_err,
        value: model.utility_value(model.x0, y0_est.mean),
        pi_star,
        weak_sol,
        fde,
        measure,
        coeffs,
        start: fbsde.start,
        optimality_report: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    /// Constant offset added to `π*`.
    pub delta: f64,
    /// Weighted estimates of `E^P[U_{k+1} - U_k]`, one per step.
    pub drifts: Vec<Estimate>,
    /// `E^P[U_K]`.
    pub value: Estimate,
    /// Paired difference `E^P[U_K] - E^P[U*_K]`; zero for `π*` itself.
    pub gap_to_optimal: Estimate,
    /// Largest `drift / std_err` over steps.
    pub max_z: f64,
    /// Smallest `drift / std_err` over steps.
    pub min_z: f64,
}

impl StrategyReport {
    /// Every step drift within three standard errors of zero.
    pub fn is_martingale(&self) -> bool {
        self.drifts.iter().all(|e| e.mean.abs() <= 3.0 * e.std_err)
    }

    /// Every step drift below `+3σ`.
    pub fn is_supermartingale(&self) -> bool {
        self.drifts.iter().all(|e| e.mean <= 3.0 * e.std_err)
    }

    /// Every step drift below `-3σ`.
    pub fn strictly_decreasing(&self) -> bool {
        self.drifts.iter().all(|e| e.mean < -3.0 * e.std_err)
    }

    pub fn dominated(&self) -> bool {
        self.gap_to_optimal.mean <= 3.0 * self.gap_to_optimal.std_err
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityReport {
    /// `π*` first, then the perturbations in the order given.
    pub strategies: Vec<StrategyReport>,
    /// Weighted `E^P[S_T]`.
    pub asset_mean: Estimate,
    /// `s0 exp(Σ μ^S Δt)`.
    pub asset_expected: f64,
    pub evaluation_seed: u64,
    pub num_paths: usize,
}

impl OptimalityReport {
    pub fn optimal(&self) -> &StrategyReport {
        &self.strategies[0]
    }

    pub fn asset_z(&self) -> f64 {
        self.asset_mean.z_score(self.asset_expected)
    }
}

/// Replays the fitted maps on `fresh`, simulates wealth under `π*` and
/// `π* + δ`, and estimates the `P`-drift of `U = -exp(-γ(X + Y))` step by step.
///
/// Drifts are importance weighted with `E_{k+1}` and use the control variate
/// `U_k (-γ m + γ²(m² - |a|² Δt)/2)`, `m = a · ΔW`, whose `P`-mean is zero
/// exactly because `ΔW` is `N(0, Δt)` under `P`.
pub fn verify_martingale_optimality(
    psol: &PortfolioSolution,
    model: &MarketModel,
    perturbations: &[f64],
    fresh: &BrownianEnsemble,
) -> Result<OptimalityReport> {
    if fresh.seed() == psol.fde.seed {
        return Err(invalid("the evaluation ensemble must be independent of the solve ensemble"));
    }
    if fresh.dim() != 2 {
        return Err(invalid("the evaluation ensemble must be two-dimensional"));
    }
    let paths = fresh.num_paths();
    let start: Vec<f64> = (0..paths).flat_map(|_| psol.start.iter().copied()).collect();
    let replay = psol.fde.replay(&psol.coeffs, &start, fresh)?;
    let grid = &psol.fde.grid;
    let k = grid.steps();

    // Terminal weights of the evaluation paths, step by step.
    let mut logw = EnsembleProcess::zeros(k + 1, paths, 1);
    let mut theta = EnsembleProcess::zeros(k, paths, 2);
    for m in 0..k {
        let (t, dt) = (grid.time(m), grid.dt(m));
        let zm = replay.z.at(m);
        let th = theta.at_mut(m);
        for p in 0..paths {
            model.girsanov_integrand(t, &zm[p * 2..p * 2 + 2], &mut th[p * 2..p * 2 + 2]);
            th[p * 2] = -th[p * 2];
            th[p * 2 + 1] = -th[p * 2 + 1];
        }
        let th = theta.at(m);
        let (l0, l1) = logw.step_pair_mut(m);
        for p in 0..paths {
            let db = fresh.increment(p, m);
            let (a, b) = (th[p * 2], th[p * 2 + 1]);
            l1[p] = l0[p] - (a * db[0] + b * db[1]) - 0.5 * (a * a + b * b) * dt;
        }
    }

    let simulate = |delta: f64| -> Vec<Vec<f64>> {
        (0..paths)
            .into_par_iter()
            .map(|p| {
                let mut wealth = model.x0;
                let mut out = Vec::with_capacity(k);
                for m in 0..k {
                    let (t, dt) = (grid.time(m), grid.dt(m));
                    let z = replay.z.get(m, p);
                    let pi = model.optimal_strategy(t, z) + delta;
                    let (mu, sb) = ((model.mu_s)(t), (model.sigma_bar_s)(t));
                    let db = fresh.increment(p, m);
                    let th = theta.get(m, p);
                    let dw = [db[0] + th[0] * dt, db[1] + th[1] * dt];
                    let a = [z[0], pi * sb + z[1]];
                    let mart = a[0] * dw[0] + a[1] * dw[1];
                    let q = a[0] * a[0] + a[1] * a[1];
                    let u0 = model.utility_value(wealth, replay.y.get(m, p)[0]);
                    wealth += pi * (mu * dt + sb * dw[1]);
                    let u1 = model.utility_value(wealth, replay.y.get(m + 1, p)[0]);
                    let g = model.gamma;
                    let cv = u0 * (-g * mart + 0.5 * g * g * (mart * mart - q * dt));
                    out.push(logw.get(m + 1, p)[0].exp() * (u1 - u0 - cv));
                }
                out
            })
            .collect()
    };

    let u_start = model.utility_value(model.x0, replay.y.get(0, 0)[0]);
    let totals = |rows: &[Vec<f64>]| -> Vec<f64> { rows.iter().map(|r| u_start + pairwise_sum(r)).collect() };
    let column = |rows: &[Vec<f64>], m: usize| -> Vec<f64> { rows.iter().map(|r| r[m]).collect() };

    let base = simulate(0.0);
    let base_totals = totals(&base);
    let mut strategies = Vec::with_capacity(perturbations.len() + 1);
    for &delta in std::iter::once(&0.0).chain(perturbations) {
        let rows = if delta == 0.0 { base.clone() } else { simulate(delta) };
        let drifts: Vec<Estimate> = (0..k).map(|m| Estimate::from_samples(&column(&rows, m))).collect();
        let tot = totals(&rows);
        let gap: Vec<f64> = tot.iter().zip(&base_totals).map(|(a, b)| a - b).collect();
        let zs: Vec<f64> = drifts.iter().map(|e| if e.std_err > 0.0 { e.mean / e.std_err } else { 0.0 }).collect();
        strategies.push(StrategyReport {
            delta,
            value: Estimate::from_samples(&tot),
            gap_to_optimal: Estimate::from_samples(&gap),
            max_z: zs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min_z: zs.iter().copied().fold(f64::INFINITY, f64::min),
            drifts,
        });
    }

    let s_terminal: Vec<f64> = (0..paths).map(|p| replay.x.get(k, p)[1].exp()).collect();
    let w_terminal: Vec<f64> = logw.at(k).iter().map(|l| l.exp()).collect();
    Ok(OptimalityReport {
        strategies,
        asset_mean: weighted_estimate(&s_terminal, &w_terminal),
        asset_expected: model.s0 * model.integrated_drift(grid).exp(),
        evaluation_seed: fresh.seed(),
        num_paths: paths,
    })
}
