//! Change of measure that removes the drift of the forward equation, and the
//! weak solution of the quadratic BSDE read off under the new measure.
//!
//! With an `F`-adapted integrand `θ`,
//!
//! ```text
//! N_k   = -Σ_{j<k} <θ_j, ΔB_j>,     [N]_k = Σ_{j<k} |θ_j|² Δt_j,
//! E_k   = exp(N_k - [N]_k / 2),     W_k   = W_0 + B_k + Σ_{j<k} θ_j Δt_j.
//! ```
//!
//! Under `dP = E_K dQ` the increments of `W` are centered Gaussians with
//! variance `Δt`, conditionally on the past.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientSet;
use crate::error::{invalid, Error, Result};
use crate::grid::BrownianEnsemble;
use crate::process::EnsembleProcess;
use crate::regression::{density_targets, fit_conditional, fit_conditional_weighted, RegressionBasis};
use crate::solver::{FdeSolution, StateMode};
use crate::stats::{pairwise_sum, quantile, quantile_sorted, Estimate};

#[derive(Debug, Clone)]
pub struct MeasureChange {
    /// `N_k`, one value per path.
    pub n_process: EnsembleProcess,
    /// `[N]_k`.
    pub quadratic_variation: EnsembleProcess,
    /// `N_k - [N]_k / 2`.
    pub log_weights: EnsembleProcess,
    /// `E_K` per path.
    pub weights: Vec<f64>,
    /// Shifted paths `W`, `K+1` steps of dimension `d`.
    pub w: EnsembleProcess,
    /// The integrand `θ_k`, `K` steps.
    pub theta: EnsembleProcess,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub mean: f64,
    pub variance: f64,
    pub std_err: f64,
    pub max: f64,
    pub min: f64,
    pub effective_sample_size: f64,
    /// Share of total weight carried by paths above the 99.9th percentile.
    pub tail_mass_fraction: f64,
}

impl MeasureChange {
    pub fn num_paths(&self) -> usize {
        self.weights.len()
    }

    /// `E_k` for every path at step `k`.
    pub fn weights_at(&self, k: usize) -> Vec<f64> {
        self.log_weights.at(k).iter().map(|l| l.exp()).collect()
    }

    pub fn effective_sample_size(&self) -> f64 {
        effective_sample_size(&self.weights)
    }

    pub fn summary(&self) -> WeightSummary {
        let est = Estimate::from_samples(&self.weights);
        let mut sorted = self.weights.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let cut = quantile_sorted(&sorted, 0.999);
        let total = pairwise_sum(&sorted);
        let tail: Vec<f64> = sorted.iter().copied().filter(|&w| w > cut).collect();
        WeightSummary {
            mean: est.mean,
            variance: est.std_dev * est.std_dev,
            std_err: est.std_err,
            max: *sorted.last().unwrap_or(&f64::NAN),
            min: *sorted.first().unwrap_or(&f64::NAN),
            effective_sample_size: effective_sample_size(&self.weights),
            tail_mass_fraction: pairwise_sum(&tail) / total,
        }
    }
}

pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s = pairwise_sum(w);
    let sq: Vec<f64> = w.iter().map(|x| x * x).collect();
    s * s / pairwise_sum(&sq)
}

/// Unbiased estimate of `E^P[g]` from `g` sampled under `Q`: the mean of
/// `E_K g` with its standard error.
pub fn weighted_estimate(values: &[f64], weights: &[f64]) -> Estimate {
    let wg: Vec<f64> = values.iter().zip(weights).map(|(g, w)| g * w).collect();
    Estimate::from_samples(&wg)
}

/// Measure change with `θ = f(t, Y, Z)` and `W_0 = X_0`, which makes
/// `W = X` on every path when the diffusion is the identity.
pub fn build_measure_change(sol: &FdeSolution, coeffs: &CoefficientSet, ensemble: &BrownianEnsemble) -> Result<MeasureChange> {
    let start = sol.x.at(0).to_vec();
    build_measure_change_with(sol, ensemble, &start, &|t, y, z, out| coeffs.eval_f(t, y, z, out), coeffs.d)
}

/// `θ(t, Y, Z, out)` for one path.
pub type ThetaFn<'a> = &'a (dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Sync);

/// Measure change with an arbitrary integrand `θ(t, Y, Z)` of dimension `d`
/// and start `w0` (`paths * d`).
pub fn build_measure_change_with(
    sol: &FdeSolution,
    ensemble: &BrownianEnsemble,
    w0: &[f64],
    theta_fn: ThetaFn<'_>,
    d: usize,
) -> Result<MeasureChange> {
    let paths = sol.num_paths;
    if ensemble.grid() != &sol.grid || ensemble.num_paths() != paths || ensemble.seed() != sol.seed || ensemble.dim() != d {
        return Err(invalid("solution and ensemble do not match"));
    }
    if w0.len() != paths * d {
        return Err(invalid("start of W has the wrong length"));
    }
    let k = sol.steps();
    let mut theta = EnsembleProcess::zeros(k, paths, d);
    for m in 0..k {
        let t = sol.grid.time(m);
        let (ym, zm) = (sol.y.at(m), sol.z.at(m));
        let n = sol.n;
        let nd = sol.n * sol.d;
        theta
            .at_mut(m)
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(p, out)| theta_fn(t, &ym[p * n..(p + 1) * n], &zm[p * nd..(p + 1) * nd], out));
        if let Some(bad) = theta.at(m).iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!("integrand is not finite at step {m}, path {}", bad / d)));
        }
    }
    let mut n_proc = EnsembleProcess::zeros(k + 1, paths, 1);
    let mut qv = EnsembleProcess::zeros(k + 1, paths, 1);
    let mut logw = EnsembleProcess::zeros(k + 1, paths, 1);
    let mut w = EnsembleProcess::zeros(k + 1, paths, d);
    w.at_mut(0).copy_from_slice(w0);
    for m in 0..k {
        let dt = sol.grid.dt(m);
        let th = theta.at(m);
        let (n0, n1) = n_proc.step_pair_mut(m);
        let (q0, q1) = qv.step_pair_mut(m);
        let (w_0, w_1) = w.step_pair_mut(m);
        for p in 0..paths {
            let db = ensemble.increment(p, m);
            let tp = &th[p * d..(p + 1) * d];
            let mut dot = 0.0;
            let mut sq = 0.0;
            for c in 0..d {
                dot += tp[c] * db[c];
                sq += tp[c] * tp[c];
                w_1[p * d + c] = w_0[p * d + c] + db[c] + tp[c] * dt;
            }
            n1[p] = n0[p] - dot;
            q1[p] = q0[p] + sq * dt;
        }
    }
    for (l, (nv, q)) in logw.as_mut_slice().iter_mut().zip(n_proc.as_slice().iter().zip(qv.as_slice())) {
        *l = nv - 0.5 * q;
    }
    let weights: Vec<f64> = logw.at(k).iter().map(|l| l.exp()).collect();
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidState("a terminal weight is not a positive finite number".into()));
    }
    Ok(MeasureChange { n_process: n_proc, quadratic_variation: qv, log_weights: logw, weights, w, theta, seed: sol.seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakResidual {
    /// `sqrt(Σ E_K R² / Σ E_K)`.
    pub weighted_rms: f64,
    pub unweighted_rms: f64,
    pub max_abs: f64,
}

/// Which terminal value closes the weak integral equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeakTerminal {
    /// `φ(W_K)`; equal to `φ(X_K)` when `W = X`.
    Shifted,
    /// `φ(X_K)`, for problems where the forward state is not `W` itself.
    Forward,
}

/// The triple `(Y, Z, W)` with weights and the residual of the integral
/// equation `Y_0 = terminal + Σ (h + Z θ) Δt - Σ Z ΔW`.
#[derive(Debug, Clone)]
pub struct WeakSolution {
    pub y: EnsembleProcess,
    pub z: EnsembleProcess,
    pub w: EnsembleProcess,
    pub weights: Vec<f64>,
    pub residual: WeakResidual,
    pub per_path_residual: Vec<f64>,
}

impl WeakSolution {
    pub fn write_csv<W: Write>(&self, grid: &crate::grid::TimeGrid, mut out: W, max_paths: usize) -> Result<()> {
        let (n, nd, d) = (self.y.dim(), self.z.dim(), self.w.dim());
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((0..n).map(|r| format!("Y{r}")));
        header.extend((0..nd).map(|r| format!("Z{r}")));
        header.extend((0..d).map(|r| format!("W{r}")));
        writeln!(out, "{}", header.join(","))?;
        let k = grid.steps();
        for p in 0..self.weights.len().min(max_paths) {
            for m in 0..=k {
                let mut row = vec![p.to_string(), m.to_string(), format!("{:?}", grid.time(m))];
                row.extend(self.y.get(m, p).iter().map(|v| format!("{v:?}")));
                if m < k {
                    row.extend(self.z.get(m, p).iter().map(|v| format!("{v:?}")));
                } else {
                    row.extend(std::iter::repeat_n(String::new(), nd));
                }
                row.extend(self.w.get(m, p).iter().map(|v| format!("{v:?}")));
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

pub fn assemble_weak_solution(sol: &FdeSolution, mc: &MeasureChange, coeffs: &CoefficientSet) -> Result<WeakSolution> {
    assemble_weak_solution_with(sol, mc, coeffs, WeakTerminal::Shifted)
}

pub fn assemble_weak_solution_with(
    sol: &FdeSolution,
    mc: &MeasureChange,
    coeffs: &CoefficientSet,
    terminal: WeakTerminal,
) -> Result<WeakSolution> {
    let (n, d, k, paths) = (sol.n, sol.d, sol.steps(), sol.num_paths);
    if mc.theta.times() != k || mc.num_paths() != paths || mc.seed != sol.seed {
        return Err(invalid("measure change and solution do not share grid and paths"));
    }
    if terminal == WeakTerminal::Shifted && mc.w.dim() != d {
        return Err(invalid("W and X have different dimensions"));
    }
    let dw_dim = mc.w.dim();
    let residuals: Vec<f64> = (0..paths)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], vec![0.0; n]),
            |(hb, tb), p| {
                let mut acc = vec![0.0; n];
                for m in 0..k {
                    let (t, dt) = (sol.grid.time(m), sol.grid.dt(m));
                    let (y, z) = (sol.y.get(m, p), sol.z.get(m, p));
                    coeffs.eval_h(t, y, z, hb);
                    let th = mc.theta.get(m, p);
                    let (w0, w1) = (mc.w.get(m, p), mc.w.get(m + 1, p));
                    for r in 0..n {
                        let mut zt = 0.0;
                        let mut zdw = 0.0;
                        for c in 0..dw_dim {
                            zt += z[r * dw_dim + c] * th[c];
                            zdw += z[r * dw_dim + c] * (w1[c] - w0[c]);
                        }
                        acc[r] += -hb[r] * dt - zt * dt + zdw;
                    }
                }
                match terminal {
                    WeakTerminal::Shifted => coeffs.eval_phi(mc.w.get(k, p), tb),
                    WeakTerminal::Forward => coeffs.eval_phi(sol.x.get(k, p), tb),
                }
                let y0 = sol.y.get(0, p);
                let mut s = 0.0;
                for r in 0..n {
                    let e = y0[r] - tb[r] + acc[r];
                    s += e * e;
                }
                s.sqrt()
            },
        )
        .collect();
    let wr: Vec<f64> = residuals.iter().zip(&mc.weights).map(|(r, w)| w * r * r).collect();
    let sq: Vec<f64> = residuals.iter().map(|r| r * r).collect();
    let residual = WeakResidual {
        weighted_rms: (pairwise_sum(&wr) / pairwise_sum(&mc.weights)).sqrt(),
        unweighted_rms: (pairwise_sum(&sq) / paths as f64).sqrt(),
        max_abs: residuals.iter().fold(0.0, |a, &b| a.max(b)),
    };
    Ok(WeakSolution {
        y: sol.y.clone(),
        z: sol.z.clone(),
        w: mc.w.clone(),
        weights: mc.weights.clone(),
        residual,
        per_path_residual: residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZInvarianceReport {
    /// Largest absolute difference between the two surfaces.
    pub max_discrepancy: f64,
    /// Step where the largest difference occurred.
    pub worst_step: usize,
    pub per_step: Vec<f64>,
    pub effective_sample_size: f64,
}

/// Weights used for the `P` regression in [`check_z_invariance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZWeighting {
    /// `E_K`: the states are reweighted to their `P` law as well.
    Terminal,
    /// `E_{k+1} / E_k`: the one-step density, which gives the same conditional
    /// expectation while leaving the law of the conditioning state at `Q`.
    OneStep,
}

/// Re-estimates `Z` under `P` by weighted regression of
/// `(ΔY + (h + Z θ) Δt) ΔW / Δt` and compares it with the stored `Q` fits on a
/// grid covering two standard deviations of the state around its mean, at
/// steps `1..K`.
pub fn check_z_invariance(
    sol: &FdeSolution,
    mc: &MeasureChange,
    coeffs: &CoefficientSet,
    basis: &RegressionBasis,
    weighting: ZWeighting,
) -> Result<ZInvarianceReport> {
    if sol.state_mode != StateMode::Markov {
        return Err(invalid("Z invariance is checked on Markov solutions only"));
    }
    let (n, d, k, paths) = (sol.n, sol.d, sol.steps(), sol.num_paths);
    let basis = basis.with_state_dim(d);
    let ess = mc.effective_sample_size();
    let required = basis.nominal_dimension() * crate::regression::PATHS_PER_FUNCTION;
    if !(ess >= required as f64) {
        return Err(Error::InsufficientWeight { ess, required });
    }
    let dw = mc.w.dim();
    let mut per_step = vec![0.0; k];
    let mut dm = vec![0.0; paths * n];
    let mut dwk = vec![0.0; paths * dw];
    let mut hb = vec![0.0; n];
    for (m, slot) in per_step.iter_mut().enumerate().skip(1) {
        let (t, dt) = (sol.grid.time(m), sol.grid.dt(m));
        for p in 0..paths {
            let (y0, y1, z) = (sol.y.get(m, p), sol.y_next(m, p), sol.z.get(m, p));
            coeffs.eval_h(t, y0, z, &mut hb);
            let th = mc.theta.get(m, p);
            for r in 0..n {
                let zt: f64 = (0..dw).map(|c| z[r * dw + c] * th[c]).sum();
                dm[p * n + r] = y1[r] - y0[r] + (hb[r] + zt) * dt;
            }
            let (w0, w1) = (mc.w.get(m, p), mc.w.get(m + 1, p));
            for c in 0..dw {
                dwk[p * dw + c] = w1[c] - w0[c];
            }
        }
        let targets = density_targets(&dm, n, &dwk, dw, dt)?;
        let states = sol.x.at(m);
        let wts: Vec<f64> = match weighting {
            ZWeighting::Terminal => mc.weights.clone(),
            ZWeighting::OneStep => {
                let (l0, l1) = (mc.log_weights.at(m), mc.log_weights.at(m + 1));
                l0.iter().zip(l1).map(|(a, b)| (b - a).exp()).collect()
            }
        };
        let p_fit = fit_conditional_weighted(states, &targets, n * dw, &wts, &basis, m)?;
        let q_fit = &sol.z_fits[m];
        let mut worst = 0.0_f64;
        for point in central_grid(states, d, 2.0, 9) {
            let a = p_fit.evaluate(&point);
            let b = q_fit.evaluate(&point);
            for (u, v) in a.iter().zip(&b) {
                worst = worst.max((u - v).abs());
            }
        }
        *slot = worst;
    }
    let (worst_step, max_discrepancy) =
        per_step.iter().copied().enumerate().fold((0, 0.0), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    Ok(ZInvarianceReport { max_discrepancy, worst_step, per_step, effective_sample_size: ess })
}

/// Tensor grid of `points` per coordinate over `mean ± radius·sd`.
pub fn central_grid(states: &[f64], d: usize, radius: f64, points: usize) -> Vec<Vec<f64>> {
    let paths = states.len() / d;
    let mut axes = Vec::with_capacity(d);
    for c in 0..d {
        let col: Vec<f64> = (0..paths).map(|p| states[p * d + c]).collect();
        let e = Estimate::from_samples(&col);
        let lo = e.mean - radius * e.std_dev;
        let hi = e.mean + radius * e.std_dev;
        let axis: Vec<f64> = if points == 1 || e.std_dev == 0.0 {
            vec![e.mean]
        } else {
            (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
        };
        axes.push(axis);
    }
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmoProbe {
    pub step: usize,
    pub t: f64,
    pub mean: f64,
    pub p99: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmoReport {
    pub probes: Vec<BmoProbe>,
    /// Largest 99th percentile over the probes.
    pub sup_p99: f64,
    pub sup_max: f64,
}

/// Regression estimate of `E[[N]_K - [N]_k | X_k]` at each probe step.
pub fn bmo_diagnostic(sol: &FdeSolution, mc: &MeasureChange, probe_steps: &[usize], basis: &RegressionBasis) -> Result<BmoReport> {
    let k = sol.steps();
    let d = sol.d;
    let basis = basis.with_state_dim(d);
    let qk = mc.quadratic_variation.at(k);
    let mut probes = Vec::with_capacity(probe_steps.len());
    for &s in probe_steps {
        if s > k {
            return Err(invalid(format!("probe step {s} is beyond the grid")));
        }
        let remaining: Vec<f64> = qk.iter().zip(mc.quadratic_variation.at(s)).map(|(a, b)| a - b).collect();
        let states = sol.x.at(s);
        let fit = fit_conditional(states, &remaining, 1, &basis, s)?;
        let mut fitted = vec![0.0; sol.num_paths];
        fit.evaluate_many(states, &mut fitted);
        probes.push(BmoProbe {
            step: s,
            t: sol.grid.time(s),
            mean: pairwise_sum(&fitted) / fitted.len() as f64,
            p99: quantile(&fitted, 0.99),
            max: fitted.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
        });
    }
    let sup_p99 = probes.iter().map(|p| p.p99).fold(0.0, f64::max);
    let sup_max = probes.iter().map(|p| p.max).fold(0.0, f64::max);
    Ok(BmoReport { probes, sup_p99, sup_max })
}
