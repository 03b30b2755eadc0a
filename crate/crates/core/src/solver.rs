//! Picard iteration for the functional differential equation in `(V, X)` and
//! concatenation of window solutions into a global FBSDE solution.
//!
//! One Picard step on a window, given `(Y, Z)` on the grid:
//!
//! ```text
//! V_{m+1} = V_m + h(t_m, Y_m, Z_m) dt
//! X_{m+1} = X_m + f(t_m, Y_m, Z_m) dt + sigma(t_m) dB_m
//! Y_m     = E[T(X_end) + V_end - V_m | state_m]
//! Z_m     = E[(M_{m+1} - M_m) dB_m | state_m] / dt,   M = Y + V
//! ```
//!
//! with `T` the window's terminal map. Once the iterates settle, the fitted
//! maps are run forward once more so that `X` satisfies its Euler recursion
//! exactly and `Y`, `Z` are the fitted maps evaluated along the final paths.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientSet;
use crate::error::{invalid, Error, Result};
use crate::grid::{contraction_windows_split, derive_seed, path_rng, BrownianEnsemble, ContractionBudget, TimeGrid};
use crate::process::EnsembleProcess;
use crate::regression::{density_targets, fit_conditional_values, BasisKind, FittedConditional, RegressionBasis, SparseRow};
use crate::stats::{pairwise_sum, rms};

/// What the regressions condition on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateMode {
    /// `X_k` alone; valid when the coefficients do not depend on the path.
    Markov,
    /// `(X_k, V_k)`, with `V` measured from the start of the window.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitialGuess {
    /// `Y ≡ T(start)`, `Z ≡ 0`.
    Terminal,
    /// `Y ≡ c` in every component, `Z ≡ 0`.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialState {
    Point(Vec<f64>),
    /// Independent uniform draws in `center ± half_width` per coordinate, so
    /// that the fitted maps at `t = 0` cover a region rather than a point.
    Dispersed {
        center: Vec<f64>,
        half_width: f64,
    },
}

impl InitialState {
    pub fn dim(&self) -> usize {
        match self {
            InitialState::Point(x) => x.len(),
            InitialState::Dispersed { center, .. } => center.len(),
        }
    }

    /// Start states for every path (`paths * d`), drawn from a sub-stream of
    /// `seed` when dispersed.
    pub fn sample(&self, paths: usize, seed: u64) -> Vec<f64> {
        match self {
            InitialState::Point(x) => x.repeat(paths),
            InitialState::Dispersed { center, half_width } => {
                let s = derive_seed(seed, "initial-state");
                let d = center.len();
                let mut out = vec![0.0; paths * d];
                out.par_chunks_mut(d).enumerate().for_each(|(p, row)| {
                    let mut rng = path_rng(s, p);
                    for (v, c) in row.iter_mut().zip(center) {
                        *v = c + half_width * (2.0 * rng.random::<f64>() - 1.0);
                    }
                });
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub basis: BasisKind,
    pub tol: f64,
    pub max_iter: usize,
    pub state_mode: StateMode,
    /// Run windows that violate the contraction bound anyway.
    pub force: bool,
    /// Gradient bound of the decoupling field. Falls back on the terminal
    /// Lipschitz constant when absent.
    pub c4: Option<f64>,
    pub initial_guess: InitialGuess,
    /// Optional bound applied to every fitted `Y`.
    pub clip: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            basis: BasisKind::Polynomial { degree: 3 },
            tol: 1e-4,
            max_iter: 50,
            state_mode: StateMode::Markov,
            force: false,
            c4: None,
            initial_guess: InitialGuess::Terminal,
            clip: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(invalid("tolerance must be positive"));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be at least 1"));
        }
        if let Some(c4) = self.c4 {
            if !(c4.is_finite() && c4 >= 0.0) {
                return Err(invalid("c4 must be finite and non-negative"));
            }
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(invalid("clip bound must be positive"));
            }
        }
        RegressionBasis::new(self.basis, 1).map(|_| ())
    }

    pub fn state_dim(&self, coeffs: &CoefficientSet) -> usize {
        match self.state_mode {
            StateMode::Markov => coeffs.d,
            StateMode::Joint => coeffs.d + coeffs.n,
        }
    }

    pub fn regression_basis(&self, coeffs: &CoefficientSet) -> RegressionBasis {
        RegressionBasis { kind: self.basis, state_dim: self.state_dim(coeffs) }
    }

    pub fn budget(&self, coeffs: &CoefficientSet) -> Result<ContractionBudget> {
        ContractionBudget::new(coeffs.c1, self.c4.unwrap_or(coeffs.c2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    pub window: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub iterations: usize,
    /// `max_{path, step} |Ψ^{j+1} - Ψ^j|` for every iteration.
    pub distances: Vec<f64>,
    pub converged: bool,
    /// Largest ratio of consecutive distances, 0 with fewer than two.
    pub empirical_factor: f64,
}

impl PicardReport {
    fn factor(distances: &[f64]) -> f64 {
        distances.windows(2).filter(|w| w[0] > 0.0).map(|w| w[1] / w[0]).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub terminal_rms: f64,
    pub backward_dynamics_rms: f64,
    pub forward_dynamics_max: f64,
}

/// Terminal condition of a window.
#[derive(Clone, Copy)]
pub enum TerminalMap<'a> {
    Phi(&'a CoefficientSet),
    /// Left-endpoint fit of the following window. In joint mode it is
    /// evaluated with `V = 0`, since `V` restarts on every window.
    Fitted(&'a FittedConditional),
}

impl TerminalMap<'_> {
    fn eval_all(&self, x: &[f64], d: usize, n: usize, out: &mut [f64]) {
        match self {
            TerminalMap::Phi(c) => {
                out.par_chunks_mut(n).zip(x.par_chunks(d)).for_each(|(o, xi)| c.eval_phi(xi, o));
            }
            TerminalMap::Fitted(fit) => {
                let sd = fit.basis.state_dim;
                out.par_chunks_mut(n).zip(x.par_chunks(d)).for_each_init(
                    || (SparseRow::default(), vec![0.0; sd]),
                    |(row, st), (o, xi)| {
                        st[..d].copy_from_slice(xi);
                        st[d..].fill(0.0);
                        fit.evaluate_with(st, row, o);
                    },
                );
            }
        }
    }
}

/// Left-endpoint Euler step shared by the Picard map, the final assembly and
/// the residual check, so that the forward residual is exactly zero.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_step(
    c: &CoefficientSet,
    t: f64,
    dt: f64,
    sigma: &[f64],
    y: &[f64],
    z: &[f64],
    v: &[f64],
    x: &[f64],
    db: &[f64],
    buf: &mut [f64],
    v_next: &mut [f64],
    x_next: &mut [f64],
) {
    let (n, d) = (c.n, c.d);
    let (hb, fb) = buf.split_at_mut(n);
    c.eval_h(t, y, z, hb);
    c.eval_f(t, y, z, &mut fb[..d]);
    for r in 0..n {
        v_next[r] = v[r] + hb[r] * dt;
    }
    for i in 0..d {
        let mut noise = 0.0;
        for j in 0..d {
            noise += sigma[i * d + j] * db[j];
        }
        x_next[i] = x[i] + fb[i] * dt + noise;
    }
}

/// Solution of one window (or of the whole horizon after gluing).
#[derive(Debug, Clone)]
pub struct WindowSolution {
    pub v: EnsembleProcess,
    pub x: EnsembleProcess,
    pub y: EnsembleProcess,
    pub z: EnsembleProcess,
    pub y_fits: Vec<FittedConditional>,
    pub z_fits: Vec<FittedConditional>,
    pub report: PicardReport,
}

struct WindowCtx<'a> {
    c: &'a CoefficientSet,
    k0: usize,
    kw: usize,
    times: Vec<f64>,
    dts: Vec<f64>,
    sigmas: Vec<Vec<f64>>,
    /// `ΔB` cross-sections for the window's steps.
    db: Vec<Vec<f64>>,
    paths: usize,
    mode: StateMode,
    basis: RegressionBasis,
    clip: Option<f64>,
}

impl<'a> WindowCtx<'a> {
    fn new(c: &'a CoefficientSet, grid: &TimeGrid, k0: usize, k1: usize, ens: &BrownianEnsemble, cfg: &SolverConfig) -> Self {
        let kw = k1 - k0;
        let d = c.d;
        let sigmas = (k0..k1)
            .map(|k| {
                let mut s = vec![0.0; d * d];
                c.diffusion(grid.time(k), &mut s);
                s
            })
            .collect();
        Self {
            c,
            k0,
            kw,
            times: (k0..=k1).map(|k| grid.time(k)).collect(),
            dts: (k0..k1).map(|k| grid.dt(k)).collect(),
            sigmas,
            db: (k0..k1).map(|k| ens.cross_section(k)).collect(),
            paths: ens.num_paths(),
            mode: cfg.state_mode,
            basis: cfg.regression_basis(c),
            clip: cfg.clip,
        }
    }

    /// Conditioning states at local step `m`.
    fn states<'b>(&self, x: &'b EnsembleProcess, v: &EnsembleProcess, m: usize, buf: &'b mut Vec<f64>) -> &'b [f64] {
        match self.mode {
            StateMode::Markov => x.at(m),
            StateMode::Joint => {
                let (d, n) = (self.c.d, self.c.n);
                buf.clear();
                buf.reserve(self.paths * (d + n));
                for p in 0..self.paths {
                    buf.extend_from_slice(x.get(m, p));
                    buf.extend_from_slice(v.get(m, p));
                }
                buf
            }
        }
    }

    fn clip(&self, y: &mut [f64]) {
        if let Some(b) = self.clip {
            for v in y {
                *v = v.clamp(-b, b);
            }
        }
    }

    /// One application of the Euler part of the Picard map.
    fn euler(&self, start: &[f64], y: &EnsembleProcess, z: &EnsembleProcess, v: &mut EnsembleProcess, x: &mut EnsembleProcess) {
        let (n, d) = (self.c.n, self.c.d);
        v.at_mut(0).fill(0.0);
        x.at_mut(0).copy_from_slice(start);
        for m in 0..self.kw {
            self.step(m, y.at(m), z.at(m), v, x, n, d);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn step(&self, m: usize, ym: &[f64], zm: &[f64], v: &mut EnsembleProcess, x: &mut EnsembleProcess, n: usize, d: usize) {
        let (t, dt, sigma, db) = (self.times[m], self.dts[m], &self.sigmas[m], &self.db[m]);
        let c = self.c;
        let (vm, vn) = v.step_pair_mut(m);
        let (xm, xn) = x.step_pair_mut(m);
        vn.par_chunks_mut(n).zip(xn.par_chunks_mut(d)).enumerate().for_each_init(
            || vec![0.0; n + d],
            |buf, (p, (vo, xo))| {
                forward_step(
                    c,
                    t,
                    dt,
                    sigma,
                    &ym[p * n..(p + 1) * n],
                    &zm[p * n * d..(p + 1) * n * d],
                    &vm[p * n..(p + 1) * n],
                    &xm[p * d..(p + 1) * d],
                    &db[p * d..(p + 1) * d],
                    buf,
                    vo,
                    xo,
                )
            },
        );
    }

    /// Regression part of the Picard map: refits `Y` and `Z` from `(V, X)`.
    fn fit(
        &self,
        terminal: &TerminalMap,
        v: &EnsembleProcess,
        x: &EnsembleProcess,
        y: &mut EnsembleProcess,
        z: &mut EnsembleProcess,
    ) -> Result<(Vec<FittedConditional>, Vec<FittedConditional>)> {
        let (n, d, kw, paths) = (self.c.n, self.c.d, self.kw, self.paths);
        terminal.eval_all(x.at(kw), d, n, y.at_mut(kw));
        let xi: Vec<f64> = y.at(kw).iter().zip(v.at(kw)).map(|(a, b)| a + b).collect();
        let mut buf = Vec::new();
        let mut y_fits = Vec::with_capacity(kw);
        for m in 0..kw {
            let target: Vec<f64> = xi.iter().zip(v.at(m)).map(|(a, b)| a - b).collect();
            let states = self.states(x, v, m, &mut buf);
            let (fit, values) = fit_conditional_values(states, &target, n, &self.basis, self.k0 + m)?;
            let ym = y.at_mut(m);
            ym.copy_from_slice(&values);
            self.clip(ym);
            y_fits.push(fit);
        }
        let mut z_fits = Vec::with_capacity(kw);
        let mut dm = vec![0.0; paths * n];
        for m in 0..kw {
            let (ya, yb, va, vb) = (y.at(m), y.at(m + 1), v.at(m), v.at(m + 1));
            for i in 0..paths * n {
                dm[i] = (yb[i] + vb[i]) - (ya[i] + va[i]);
            }
            let targets = density_targets(&dm, n, &self.db[m], d, self.dts[m])?;
            let states = self.states(x, v, m, &mut buf);
            let (fit, values) = fit_conditional_values(states, &targets, n * d, &self.basis, self.k0 + m)?;
            z.at_mut(m).copy_from_slice(&values);
            z_fits.push(fit);
        }
        Ok((y_fits, z_fits))
    }

    /// Runs the fitted maps forward from `start`.
    fn assemble(
        &self,
        start: &[f64],
        terminal: &TerminalMap,
        y_fits: &[FittedConditional],
        z_fits: &[FittedConditional],
    ) -> (EnsembleProcess, EnsembleProcess, EnsembleProcess, EnsembleProcess) {
        let (n, d, kw, paths) = (self.c.n, self.c.d, self.kw, self.paths);
        let mut v = EnsembleProcess::zeros(kw + 1, paths, n);
        let mut x = EnsembleProcess::zeros(kw + 1, paths, d);
        let mut y = EnsembleProcess::zeros(kw + 1, paths, n);
        let mut z = EnsembleProcess::zeros(kw, paths, n * d);
        x.at_mut(0).copy_from_slice(start);
        let mut buf = Vec::new();
        for m in 0..kw {
            let states = self.states(&x, &v, m, &mut buf).to_vec();
            y_fits[m].evaluate_many(&states, y.at_mut(m));
            self.clip(y.at_mut(m));
            z_fits[m].evaluate_many(&states, z.at_mut(m));
            self.step(m, y.at(m), z.at(m), &mut v, &mut x, n, d);
        }
        terminal.eval_all(x.at(kw), d, n, y.at_mut(kw));
        (v, x, y, z)
    }
}

fn sup_distance(v1: &EnsembleProcess, x1: &EnsembleProcess, v0: &EnsembleProcess, x0: &EnsembleProcess) -> f64 {
    let (n, d) = (v1.dim(), x1.dim());
    let (va, vb, xa, xb) = (v1.as_slice(), v0.as_slice(), x1.as_slice(), x0.as_slice());
    let cells = va.len() / n;
    (0..cells)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for r in 0..n {
                let e = va[i * n + r] - vb[i * n + r];
                s += e * e;
            }
            for r in 0..d {
                let e = xa[i * d + r] - xb[i * d + r];
                s += e * e;
            }
            s.sqrt()
        })
        .reduce(|| 0.0, f64::max)
}

/// Lipschitz constant assumed for a terminal map when checking the
/// contraction bound.
fn terminal_lipschitz(c: &CoefficientSet, terminal: &TerminalMap, cfg: &SolverConfig) -> f64 {
    match terminal {
        TerminalMap::Phi(_) => c.c2,
        TerminalMap::Fitted(_) => cfg.c4.unwrap_or(c.c2),
    }
}

/// Solves the window `[t_{k0}, t_{k1}]` of `grid` by Picard iteration.
#[allow(clippy::too_many_arguments)]
pub fn picard_window(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    k0: usize,
    k1: usize,
    terminal: TerminalMap,
    start: &[f64],
    ensemble: &BrownianEnsemble,
    cfg: &SolverConfig,
    window_index: usize,
) -> Result<WindowSolution> {
    cfg.validate()?;
    if !(k0 < k1 && k1 <= grid.steps()) {
        return Err(invalid(format!("bad window [{k0}, {k1}]")));
    }
    check_ensemble(coeffs, grid, ensemble)?;
    let (n, d, paths) = (coeffs.n, coeffs.d, ensemble.num_paths());
    if start.len() != paths * d {
        return Err(invalid("start states do not match the ensemble"));
    }
    let budget = ContractionBudget::new(coeffs.c1, terminal_lipschitz(coeffs, &terminal, cfg))?;
    let length = grid.time(k1) - grid.time(k0);
    if !cfg.force && !budget.admits(length) {
        return Err(Error::Precondition(format!(
            "window [{:.6}, {:.6}] of length {length:.6} exceeds the contraction bound {:.6}",
            grid.time(k0),
            grid.time(k1),
            budget.max_mesh()
        )));
    }
    let ctx = WindowCtx::new(coeffs, grid, k0, k1, ensemble, cfg);
    let kw = k1 - k0;

    // Ψ^(0): V = 0 and X = start + Σ σ dB.
    let mut y = EnsembleProcess::zeros(kw + 1, paths, n);
    let mut z = EnsembleProcess::zeros(kw, paths, n * d);
    match cfg.initial_guess {
        InitialGuess::Terminal => {
            let mut ys = vec![0.0; paths * n];
            terminal.eval_all(start, d, n, &mut ys);
            for m in 0..=kw {
                y.at_mut(m).copy_from_slice(&ys);
            }
        }
        InitialGuess::Constant(c) => y.as_mut_slice().fill(c),
    }
    let mut v = EnsembleProcess::zeros(kw + 1, paths, n);
    let mut x = EnsembleProcess::zeros(kw + 1, paths, d);
    ctx.euler(start, &y, &z, &mut v, &mut x);
    let (mut y_fits, mut z_fits) = ctx.fit(&terminal, &v, &x, &mut y, &mut z)?;

    let mut report = PicardReport {
        window: window_index,
        t_start: grid.time(k0),
        t_end: grid.time(k1),
        iterations: 0,
        distances: Vec::new(),
        converged: false,
        empirical_factor: 0.0,
    };
    let mut v_new = v.clone();
    let mut x_new = x.clone();
    for _ in 0..cfg.max_iter {
        ctx.euler(start, &y, &z, &mut v_new, &mut x_new);
        let dist = sup_distance(&v_new, &x_new, &v, &x);
        std::mem::swap(&mut v, &mut v_new);
        std::mem::swap(&mut x, &mut x_new);
        (y_fits, z_fits) = ctx.fit(&terminal, &v, &x, &mut y, &mut z)?;
        report.iterations += 1;
        report.distances.push(dist);
        if !dist.is_finite() {
            break;
        }
        if dist <= cfg.tol {
            report.converged = true;
            break;
        }
    }
    report.empirical_factor = PicardReport::factor(&report.distances);
    if !report.converged {
        return Err(Error::Diverged { window: window_index, report: Box::new(report) });
    }
    let (v, x, y, z) = ctx.assemble(start, &terminal, &y_fits, &z_fits);
    Ok(WindowSolution { v, x, y, z, y_fits, z_fits, report })
}

fn check_ensemble(coeffs: &CoefficientSet, grid: &TimeGrid, ensemble: &BrownianEnsemble) -> Result<()> {
    if ensemble.grid() != grid {
        return Err(invalid("ensemble was sampled on a different grid"));
    }
    if ensemble.dim() != coeffs.d {
        return Err(invalid(format!("ensemble dimension {} does not match d = {}", ensemble.dim(), coeffs.d)));
    }
    Ok(())
}

/// Global solution on the whole grid.
#[derive(Debug, Clone)]
pub struct FdeSolution {
    pub grid: TimeGrid,
    /// `(first_step, end_step)` of every window.
    pub windows: Vec<(usize, usize)>,
    pub v: EnsembleProcess,
    pub x: EnsembleProcess,
    pub y: EnsembleProcess,
    pub z: EnsembleProcess,
    /// Fitted `Y` maps at steps `0..K`.
    pub phi_fits: Vec<FittedConditional>,
    /// Fitted `Z` maps at steps `0..K`.
    pub z_fits: Vec<FittedConditional>,
    pub iteration_log: Vec<PicardReport>,
    /// Window-local `V` at each window's right end, per path.
    pub window_end_v: Vec<Vec<f64>>,
    /// `Y` at each window's right end as its own solve saw it (the terminal
    /// map), per path. Differs from `y` at a seam, where `y` holds the next
    /// window's fit.
    pub window_end_y: Vec<Vec<f64>>,
    pub residuals: Option<ResidualReport>,
    pub seed: u64,
    pub num_paths: usize,
    pub state_mode: StateMode,
    pub n: usize,
    pub d: usize,
}

impl FdeSolution {
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// Fitted `Y(t_k, x)`. `v` is the window-local `V` and is read in joint
    /// mode only.
    pub fn y_at(&self, k: usize, x: &[f64], v: &[f64]) -> Vec<f64> {
        self.phi_fits[k].evaluate(&self.state_vec(x, v))
    }

    pub fn z_at(&self, k: usize, x: &[f64], v: &[f64]) -> Vec<f64> {
        self.z_fits[k].evaluate(&self.state_vec(x, v))
    }

    fn state_vec(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        match self.state_mode {
            StateMode::Markov => x.to_vec(),
            StateMode::Joint => {
                let mut s = x.to_vec();
                s.extend_from_slice(v);
                s
            }
        }
    }

    /// Index of the window that contains step `k` (`k < K`).
    /// `Y_{k+1}` as seen from step `k`: the stored value, except across a
    /// seam, where it is the terminal map of the window containing `k`.
    pub fn y_next(&self, k: usize, path: usize) -> &[f64] {
        let i = self.window_of(k);
        if self.windows[i].1 == k + 1 {
            let n = self.n;
            &self.window_end_y[i][path * n..(path + 1) * n]
        } else {
            self.y.get(k + 1, path)
        }
    }

    pub fn window_of(&self, k: usize) -> usize {
        self.windows.iter().position(|&(a, b)| k >= a && k < b).unwrap_or(self.windows.len() - 1)
    }

    /// `Σ_{j<i}` of the window-end values of `V`, per path, summed in window order.
    pub fn offset(&self, i: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.num_paths * self.n];
        for end in &self.window_end_v[..i] {
            for (a, e) in acc.iter_mut().zip(end) {
                *a += e;
            }
        }
        acc
    }

    /// Writes `path, step, t, V.., X.., Y.., Z..` rows for the first
    /// `max_paths` paths. `Z` is empty at the last step.
    pub fn write_csv<W: Write>(&self, mut w: W, max_paths: usize) -> Result<()> {
        let (n, d) = (self.n, self.d);
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((0..n).map(|r| format!("V{r}")));
        header.extend((0..d).map(|r| format!("X{r}")));
        header.extend((0..n).map(|r| format!("Y{r}")));
        for r in 0..n {
            header.extend((0..d).map(|c| format!("Z{r}{c}")));
        }
        writeln!(w, "{}", header.join(","))?;
        let k_max = self.steps();
        for p in 0..self.num_paths.min(max_paths) {
            for k in 0..=k_max {
                let mut row = vec![p.to_string(), k.to_string(), format!("{:?}", self.grid.time(k))];
                row.extend(self.v.get(k, p).iter().map(|x| format!("{x:?}")));
                row.extend(self.x.get(k, p).iter().map(|x| format!("{x:?}")));
                row.extend(self.y.get(k, p).iter().map(|x| format!("{x:?}")));
                if k < k_max {
                    row.extend(self.z.get(k, p).iter().map(|x| format!("{x:?}")));
                } else {
                    row.extend(std::iter::repeat_n(String::new(), n * d));
                }
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }

    /// Iteration log, residuals, seed and a caller-supplied config echo.
    pub fn sidecar(&self, config_echo: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "num_paths": self.num_paths,
            "steps": self.steps(),
            "windows": self.windows,
            "iteration_log": self.iteration_log,
            "residuals": self.residuals,
            "config": config_echo,
        })
    }
}

/// Paths generated by running the fitted maps forward on another ensemble.
#[derive(Debug, Clone)]
pub struct Replay {
    pub x: EnsembleProcess,
    pub y: EnsembleProcess,
    pub z: EnsembleProcess,
}

impl FdeSolution {
    /// Runs the stored maps forward from `start` on `ensemble`, which must
    /// live on the same grid. `Y_K = φ(X_K)`.
    pub fn replay(&self, coeffs: &CoefficientSet, start: &[f64], ensemble: &BrownianEnsemble) -> Result<Replay> {
        check_ensemble(coeffs, &self.grid, ensemble)?;
        let (n, d, k, paths) = (self.n, self.d, self.steps(), ensemble.num_paths());
        if start.len() != paths * d {
            return Err(invalid("start states do not match the ensemble"));
        }
        let mut v = EnsembleProcess::zeros(k + 1, paths, n);
        let mut x = EnsembleProcess::zeros(k + 1, paths, d);
        let mut y = EnsembleProcess::zeros(k + 1, paths, n);
        let mut z = EnsembleProcess::zeros(k, paths, n * d);
        x.at_mut(0).copy_from_slice(start);
        let mut sigma = vec![0.0; d * d];
        let mut offset = vec![0.0; paths * n];
        let mut states = Vec::new();
        for m in 0..k {
            if self.windows.iter().any(|&(a, _)| a == m) {
                offset.copy_from_slice(v.at(m));
            }
            states.clear();
            match self.state_mode {
                StateMode::Markov => states.extend_from_slice(x.at(m)),
                StateMode::Joint => {
                    for p in 0..paths {
                        states.extend_from_slice(x.get(m, p));
                        states.extend(v.get(m, p).iter().zip(&offset[p * n..(p + 1) * n]).map(|(a, b)| a - b));
                    }
                }
            }
            self.phi_fits[m].evaluate_many(&states, y.at_mut(m));
            self.z_fits[m].evaluate_many(&states, z.at_mut(m));
            let (t, dt) = (self.grid.time(m), self.grid.dt(m));
            coeffs.diffusion(t, &mut sigma);
            let (ym, zm) = (y.at(m), z.at(m));
            let (vm, vn) = v.step_pair_mut(m);
            let (xm, xn) = x.step_pair_mut(m);
            vn.par_chunks_mut(n).zip(xn.par_chunks_mut(d)).enumerate().for_each_init(
                || vec![0.0; n + d],
                |buf, (p, (vo, xo))| {
                    forward_step(
                        coeffs,
                        t,
                        dt,
                        &sigma,
                        &ym[p * n..(p + 1) * n],
                        &zm[p * n * d..(p + 1) * n * d],
                        &vm[p * n..(p + 1) * n],
                        &xm[p * d..(p + 1) * d],
                        ensemble.increment(p, m),
                        buf,
                        vo,
                        xo,
                    )
                },
            );
        }
        TerminalMap::Phi(coeffs).eval_all(x.at(k), d, n, y.at_mut(k));
        Ok(Replay { x, y, z })
    }
}

/// Builds the window maps backward (last window first) on drift-free training
/// states, then solves the windows forward from the actual start states and
/// glues them.
pub fn solve_global(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    initial: &InitialState,
    ensemble: &BrownianEnsemble,
    cfg: &SolverConfig,
) -> Result<FdeSolution> {
    cfg.validate()?;
    check_ensemble(coeffs, grid, ensemble)?;
    if initial.dim() != coeffs.d {
        return Err(invalid("initial state has the wrong dimension"));
    }
    if let InitialState::Point(x) = initial {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("initial state must be finite"));
        }
    }
    let (n, d, paths) = (coeffs.n, coeffs.d, ensemble.num_paths());
    let windows = contraction_windows_split(grid, cfg.budget(coeffs)?, ContractionBudget::new(coeffs.c1, coeffs.c2)?, cfg.force)?;
    let start0 = initial.sample(paths, ensemble.seed());

    // Backward sweep: left-endpoint maps of windows 1..N, used as terminal
    // maps of their predecessors.
    let nw = windows.len();
    let mut left_maps: Vec<Option<FittedConditional>> = vec![None; nw];
    if nw > 1 {
        let training = drift_free_states(coeffs, grid, &start0, ensemble);
        for i in (1..nw).rev() {
            let (k0, k1) = windows[i];
            let terminal = match &left_maps.get(i + 1).and_then(|m| m.as_ref()) {
                Some(f) => TerminalMap::Fitted(f),
                None => TerminalMap::Phi(coeffs),
            };
            let sol = picard_window(coeffs, grid, k0, k1, terminal, training.at(k0), ensemble, cfg, i)?;
            left_maps[i] = Some(sol.y_fits.into_iter().next().expect("window has a step"));
        }
    }

    // Forward pass.
    let k = grid.steps();
    let mut v = EnsembleProcess::zeros(k + 1, paths, n);
    let mut x = EnsembleProcess::zeros(k + 1, paths, d);
    let mut y = EnsembleProcess::zeros(k + 1, paths, n);
    let mut z = EnsembleProcess::zeros(k, paths, n * d);
    let mut phi_fits = Vec::with_capacity(k);
    let mut z_fits = Vec::with_capacity(k);
    let mut iteration_log = Vec::with_capacity(nw);
    let mut window_end_v: Vec<Vec<f64>> = Vec::with_capacity(nw);
    let mut window_end_y: Vec<Vec<f64>> = Vec::with_capacity(nw);
    let mut offset = vec![0.0; paths * n];
    x.at_mut(0).copy_from_slice(&start0);
    for (i, &(k0, k1)) in windows.iter().enumerate() {
        let terminal = match left_maps.get(i + 1).and_then(|m| m.as_ref()) {
            Some(f) => TerminalMap::Fitted(f),
            None => TerminalMap::Phi(coeffs),
        };
        let start = x.at(k0).to_vec();
        let w = picard_window(coeffs, grid, k0, k1, terminal, &start, ensemble, cfg, i)?;
        for m in 0..=(k1 - k0) {
            let kk = k0 + m;
            // The right end belongs to the next window, except at T.
            if m == k1 - k0 && k1 < k {
                x.at_mut(kk).copy_from_slice(w.x.at(m));
                for ((g, l), o) in v.at_mut(kk).iter_mut().zip(w.v.at(m)).zip(&offset) {
                    *g = l + o;
                }
                continue;
            }
            x.at_mut(kk).copy_from_slice(w.x.at(m));
            y.at_mut(kk).copy_from_slice(w.y.at(m));
            for ((g, l), o) in v.at_mut(kk).iter_mut().zip(w.v.at(m)).zip(&offset) {
                *g = l + o;
            }
            if m < k1 - k0 {
                z.at_mut(kk).copy_from_slice(w.z.at(m));
            }
        }
        let end = w.v.at(k1 - k0).to_vec();
        for (o, e) in offset.iter_mut().zip(&end) {
            *o += e;
        }
        window_end_v.push(end);
        window_end_y.push(w.y.at(k1 - k0).to_vec());
        phi_fits.extend(w.y_fits);
        z_fits.extend(w.z_fits);
        iteration_log.push(w.report);
    }
    let mut sol = FdeSolution {
        grid: grid.clone(),
        windows,
        v,
        x,
        y,
        z,
        phi_fits,
        z_fits,
        iteration_log,
        window_end_v,
        window_end_y,
        residuals: None,
        seed: ensemble.seed(),
        num_paths: paths,
        state_mode: cfg.state_mode,
        n,
        d,
    };
    sol.residuals = Some(check_fbsde_residual(&sol, coeffs, ensemble)?);
    Ok(sol)
}

/// `X̂_k = X_0 + Σ_{m<k} σ(t_m) ΔB_m`.
pub(crate) fn drift_free_states(c: &CoefficientSet, grid: &TimeGrid, start: &[f64], ens: &BrownianEnsemble) -> EnsembleProcess {
    let (d, paths) = (c.d, ens.num_paths());
    let mut x = EnsembleProcess::zeros(grid.steps() + 1, paths, d);
    x.at_mut(0).copy_from_slice(start);
    let mut sigma = vec![0.0; d * d];
    for k in 0..grid.steps() {
        c.diffusion(grid.time(k), &mut sigma);
        let (prev, next) = x.step_pair_mut(k);
        for p in 0..paths {
            let db = ens.increment(p, k);
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..d {
                    s += sigma[i * d + j] * db[j];
                }
                next[p * d + i] = prev[p * d + i] + s;
            }
        }
    }
    x
}

/// Discrete residuals of the FBSDE along the stored paths.
pub fn check_fbsde_residual(sol: &FdeSolution, coeffs: &CoefficientSet, ensemble: &BrownianEnsemble) -> Result<ResidualReport> {
    if ensemble.grid() != &sol.grid
        || ensemble.num_paths() != sol.num_paths
        || ensemble.dim() != coeffs.d
        || ensemble.seed() != sol.seed
        || sol.n != coeffs.n
        || sol.d != coeffs.d
    {
        return Err(invalid("solution, coefficients and ensemble do not match"));
    }
    let (n, d, paths, k) = (coeffs.n, coeffs.d, sol.num_paths, sol.steps());
    let mut fwd_max = 0.0_f64;
    let mut bwd_sq = Vec::with_capacity(k);
    let mut sigma = vec![0.0; d * d];
    for m in 0..k {
        let (t, dt) = (sol.grid.time(m), sol.grid.dt(m));
        coeffs.diffusion(t, &mut sigma);
        let per_path: Vec<(f64, f64)> = (0..paths)
            .into_par_iter()
            .map_init(
                || (vec![0.0; n + d], vec![0.0; n], vec![0.0; d], vec![0.0; n]),
                |(buf, vn, xn, hb), p| {
                    let y = sol.y.get(m, p);
                    let z = sol.z.get(m, p);
                    let db = ensemble.increment(p, m);
                    forward_step(coeffs, t, dt, &sigma, y, z, sol.v.get(m, p), sol.x.get(m, p), db, buf, vn, xn);
                    let fx = xn.iter().zip(sol.x.get(m + 1, p)).fold(0.0_f64, |a, (u, w)| a.max((u - w).abs()));
                    coeffs.eval_h(t, y, z, hb);
                    let y1 = sol.y.get(m + 1, p);
                    let mut s = 0.0;
                    for r in 0..n {
                        let mut zdb = 0.0;
                        for c in 0..d {
                            zdb += z[r * d + c] * db[c];
                        }
                        let e = y1[r] - y[r] + hb[r] * dt - zdb;
                        s += e * e;
                    }
                    (fx, s)
                },
            )
            .collect();
        for &(fx, _) in &per_path {
            fwd_max = fwd_max.max(fx);
        }
        let s: Vec<f64> = per_path.iter().map(|p| p.1).collect();
        bwd_sq.push(pairwise_sum(&s));
    }
    let backward = (pairwise_sum(&bwd_sq) / (paths * k * n) as f64).sqrt();
    let mut term = vec![0.0; n];
    let tr: Vec<f64> = (0..paths)
        .flat_map(|p| {
            coeffs.eval_phi(sol.x.get(k, p), &mut term);
            sol.y.get(k, p).iter().zip(&term).map(|(a, b)| a - b).collect::<Vec<_>>()
        })
        .collect();
    Ok(ResidualReport { terminal_rms: rms(&tr), backward_dynamics_rms: backward, forward_dynamics_max: fwd_max })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub gap_y: f64,
    pub gap_z: f64,
    /// `max(gap_y, gap_z)`.
    pub gap: f64,
    pub tol: f64,
}

/// Solves twice on the same noise from `Y^(0) ≡ +1` and `Y^(0) ≡ -1` and
/// reports the largest pathwise difference of the results.
pub fn empirical_pathwise_uniqueness(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    initial: &InitialState,
    ensemble: &BrownianEnsemble,
    cfg: &SolverConfig,
) -> Result<UniquenessReport> {
    let mut a = cfg.clone();
    a.initial_guess = InitialGuess::Constant(1.0);
    let mut b = cfg.clone();
    b.initial_guess = InitialGuess::Constant(-1.0);
    let sa = solve_global(coeffs, grid, initial, ensemble, &a)?;
    let sb = solve_global(coeffs, grid, initial, ensemble, &b)?;
    Ok(pathwise_gap(&sa, &sb, cfg.tol))
}

/// Largest pathwise difference of two solutions on the same noise.
pub fn pathwise_gap(a: &FdeSolution, b: &FdeSolution, tol: f64) -> UniquenessReport {
    let gap_y = a.y.max_abs_diff(&b.y);
    let gap_z = a.z.max_abs_diff(&b.z);
    UniquenessReport { gap_y, gap_z, gap: gap_y.max(gap_z), tol }
}
