//! Least-squares Monte Carlo estimates of conditional expectations and of
//! martingale-representation densities.
//!
//! A fit has two stages. First a data-dependent *frame* is built from the
//! conditioning states (standardization for polynomials, quantile knots for
//! the piecewise-linear basis). Then the normal equations are accumulated in
//! fixed-size row chunks, summed in chunk order and solved with a small ridge.
//! The chunking keeps the floating-point reduction order independent of the
//! number of worker threads.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DMatrixView, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stats::pairwise_sum;

/// Rows per accumulation chunk. Fixed so that results are bit-stable.
const CHUNK: usize = 4096;
/// Ridge strength relative to the largest eigenvalue of the Gram matrix.
pub const RIDGE_FACTOR: f64 = 1e-8;
/// Eigenvalue ratio below which a design is flagged as rank deficient.
const RANK_TOL: f64 = 1e-12;
/// Largest polynomial degree accepted.
pub const MAX_DEGREE: usize = 24;
const SQRT_INT: [f64; MAX_DEGREE + 1] = sqrt_table(false);
const INV_SQRT_INT: [f64; MAX_DEGREE + 1] = sqrt_table(true);

const fn sqrt_table(inverse: bool) -> [f64; MAX_DEGREE + 1] {
    // Newton iterations; const fn cannot call f64::sqrt.
    let mut t = [0.0; MAX_DEGREE + 1];
    let mut k = 1;
    while k <= MAX_DEGREE {
        let v = k as f64;
        let mut r = v;
        let mut i = 0;
        while i < 60 {
            r = 0.5 * (r + v / r);
            i += 1;
        }
        t[k] = if inverse { 1.0 / r } else { r };
        k += 1;
    }
    t
}
/// Minimum paths per basis function.
pub const PATHS_PER_FUNCTION: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    /// Polynomials of bounded total degree in the standardized state.
    Polynomial { degree: usize },
    /// Tensor-product hat functions on per-dimension quantile knots.
    PiecewiseLinear { bins: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    pub state_dim: usize,
}

impl RegressionBasis {
    pub fn polynomial(degree: usize, state_dim: usize) -> Result<Self> {
        Self::new(BasisKind::Polynomial { degree }, state_dim)
    }

    pub fn piecewise_linear(bins: usize, state_dim: usize) -> Result<Self> {
        Self::new(BasisKind::PiecewiseLinear { bins }, state_dim)
    }

    pub fn new(kind: BasisKind, state_dim: usize) -> Result<Self> {
        let p = match kind {
            BasisKind::Polynomial { degree } => degree,
            BasisKind::PiecewiseLinear { bins } => bins,
        };
        if p == 0 {
            return Err(invalid("basis order must be at least 1"));
        }
        if matches!(kind, BasisKind::Polynomial { degree } if degree > MAX_DEGREE) {
            return Err(invalid(format!("polynomial degree is capped at {MAX_DEGREE}")));
        }
        if state_dim == 0 {
            return Err(invalid("state dimension must be at least 1"));
        }
        Ok(Self { kind, state_dim })
    }

    /// Same kind and order on a state of another dimension.
    pub fn with_state_dim(&self, state_dim: usize) -> Self {
        Self { kind: self.kind, state_dim }
    }

    /// Number of basis functions before data-dependent pruning.
    pub fn nominal_dimension(&self) -> usize {
        match self.kind {
            BasisKind::Polynomial { degree } => binomial(degree + self.state_dim, self.state_dim),
            BasisKind::PiecewiseLinear { bins } => (bins + 1).pow(self.state_dim as u32),
        }
    }

    pub fn descriptor(&self) -> String {
        match self.kind {
            BasisKind::Polynomial { degree } => format!("polynomial {degree} {}", self.state_dim),
            BasisKind::PiecewiseLinear { bins } => format!("piecewise_linear {bins} {}", self.state_dim),
        }
    }

    fn parse_descriptor(s: &str) -> Result<Self> {
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::Parse(format!("bad basis descriptor {s:?}")));
        }
        let order = parse_num::<usize>(f[1])?;
        let dim = parse_num::<usize>(f[2])?;
        match f[0] {
            "polynomial" => Self::polynomial(order, dim),
            "piecewise_linear" => Self::piecewise_linear(order, dim),
            other => Err(Error::Parse(format!("unknown basis kind {other:?}"))),
        }
    }

    /// Builds the data-dependent frame from `states` (`paths * state_dim`).
    pub fn fit_frame(&self, states: &[f64]) -> Frame {
        let d = self.state_dim;
        let n = states.len() / d;
        let column = |c: usize| -> Vec<f64> { (0..n).map(|i| states[i * d + c]).collect() };
        match self.kind {
            BasisKind::Polynomial { degree } => {
                let mut center = vec![0.0; d];
                let mut scale = vec![0.0; d];
                let mut active = vec![false; d];
                for c in 0..d {
                    let col = column(c);
                    let m = pairwise_sum(&col) / n as f64;
                    let sq: Vec<f64> = col.iter().map(|x| (x - m) * (x - m)).collect();
                    let sd = (pairwise_sum(&sq) / n as f64).sqrt();
                    center[c] = m;
                    if sd > 1e-12 * (1.0 + m.abs()) {
                        scale[c] = sd;
                        active[c] = true;
                    } else {
                        scale[c] = 1.0;
                    }
                }
                if !active.iter().any(|&a| a) {
                    return Frame::Constant;
                }
                let exponents = monomials(degree, &active);
                Frame::Polynomial { center, scale, exponents, degree }
            }
            BasisKind::PiecewiseLinear { bins } => {
                let mut knots = Vec::with_capacity(d);
                for c in 0..d {
                    let mut col = column(c);
                    col.sort_by(|a, b| a.total_cmp(b));
                    let mut k: Vec<f64> = (0..=bins).map(|j| crate::stats::quantile_sorted(&col, j as f64 / bins as f64)).collect();
                    let span = col[n - 1] - col[0];
                    let eps = 1e-12 * (1.0 + span.abs() + col[0].abs());
                    k.dedup_by(|b, a| (*b - *a).abs() <= eps);
                    knots.push(k);
                }
                if knots.iter().all(|k| k.len() < 2) {
                    return Frame::Constant;
                }
                Frame::PiecewiseLinear { knots }
            }
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    let mut r: usize = 1;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

/// Exponent vectors of all monomials of total degree `<= degree` in the
/// active coordinates, graded order, constant first.
fn monomials(degree: usize, active: &[bool]) -> Vec<Vec<u8>> {
    let d = active.len();
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut cur = vec![0u8; d];
        fill(&mut out, &mut cur, 0, total, active);
    }
    fn fill(out: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, pos: usize, left: usize, active: &[bool]) {
        if pos == cur.len() {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        if !active[pos] {
            cur[pos] = 0;
            fill(out, cur, pos + 1, left, active);
            return;
        }
        for e in (0..=left).rev() {
            cur[pos] = e as u8;
            fill(out, cur, pos + 1, left - e, active);
        }
        cur[pos] = 0;
    }
    out
}

/// Data-dependent realization of a basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Frame {
    /// Every conditioning coordinate was constant; the fit is a plain average.
    Constant,
    Polynomial {
        center: Vec<f64>,
        scale: Vec<f64>,
        exponents: Vec<Vec<u8>>,
        degree: usize,
    },
    PiecewiseLinear {
        knots: Vec<Vec<f64>>,
    },
}

/// Nonzero basis values at one state.
#[derive(Debug, Default, Clone)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
    powers: Vec<f64>,
}

impl Frame {
    pub fn dimension(&self) -> usize {
        match self {
            Frame::Constant => 1,
            Frame::Polynomial { exponents, .. } => exponents.len(),
            Frame::PiecewiseLinear { knots } => knots.iter().map(|k| k.len()).product(),
        }
    }

    /// Basis values of a polynomial frame, all of them, in `out`.
    fn dense_row(&self, x: &[f64], out: &mut [f64], powers: &mut Vec<f64>) {
        let Frame::Polynomial { center, scale, exponents, degree } = self else {
            unreachable!("dense rows exist for polynomial frames only")
        };
        let d = center.len();
        let stride = degree + 1;
        powers.resize(d * stride, 0.0);
        for c in 0..d {
            let u = (x[c] - center[c]) / scale[c];
            let p = &mut powers[c * stride..(c + 1) * stride];
            // Normalized probabilists' Hermite polynomials: the same span as
            // monomials, far better conditioned.
            p[0] = 1.0;
            if stride > 1 {
                p[1] = u;
            }
            for e in 2..stride {
                p[e] = (u * p[e - 1] - SQRT_INT[e - 1] * p[e - 2]) * INV_SQRT_INT[e];
            }
        }
        if d == 1 {
            for (o, ex) in out.iter_mut().zip(exponents) {
                *o = powers[ex[0] as usize];
            }
            return;
        }
        if d == 2 {
            let (p0, p1) = powers.split_at(stride);
            for (o, ex) in out.iter_mut().zip(exponents) {
                *o = p0[ex[0] as usize] * p1[ex[1] as usize];
            }
            return;
        }
        for (o, ex) in out.iter_mut().zip(exponents) {
            *o = ex.iter().enumerate().map(|(c, &e)| powers[c * stride + e as usize]).product();
        }
    }

    /// Number of entries in every row produced by [`Frame::row`].
    pub fn row_width(&self) -> usize {
        match self {
            Frame::Constant => 1,
            Frame::Polynomial { exponents, .. } => exponents.len(),
            Frame::PiecewiseLinear { knots } => 1 << knots.iter().filter(|k| k.len() >= 2).count(),
        }
    }

    /// Coefficients that represent the constant function 1.
    pub fn unit(&self) -> Vec<f64> {
        match self {
            Frame::Constant => vec![1.0],
            Frame::Polynomial { exponents, .. } => {
                let mut u = vec![0.0; exponents.len()];
                u[0] = 1.0;
                u
            }
            Frame::PiecewiseLinear { .. } => vec![1.0; self.dimension()],
        }
    }

    pub fn row(&self, x: &[f64], row: &mut SparseRow) {
        row.idx.clear();
        row.val.clear();
        match self {
            Frame::Constant => {
                row.idx.push(0);
                row.val.push(1.0);
            }
            Frame::Polynomial { exponents, .. } => {
                let mut vals = std::mem::take(&mut row.val);
                vals.resize(exponents.len(), 0.0);
                self.dense_row(x, &mut vals, &mut row.powers);
                row.val = vals;
                row.idx.extend(0..exponents.len());
            }
            Frame::PiecewiseLinear { knots } => {
                row.idx.push(0);
                row.val.push(1.0);
                let mut stride = 1;
                for (c, k) in knots.iter().enumerate() {
                    if k.len() < 2 {
                        continue;
                    }
                    let (j, t) = locate(k, x[c]);
                    let len = row.idx.len();
                    for a in 0..len {
                        let (i0, v0) = (row.idx[a], row.val[a]);
                        row.idx[a] = i0 + j * stride;
                        row.val[a] = v0 * (1.0 - t);
                        row.idx.push(i0 + (j + 1) * stride);
                        row.val.push(v0 * t);
                    }
                    stride *= k.len();
                }
            }
        }
    }
}

/// Interval index `j` and local coordinate `t` of `x` among the knots, with
/// linear extrapolation beyond the end knots.
#[inline]
fn locate(knots: &[f64], x: f64) -> (usize, f64) {
    let m = knots.len();
    let j = match knots.partition_point(|&k| k <= x) {
        0 => 0,
        p if p >= m => m - 2,
        p => p - 1,
    };
    let t = (x - knots[j]) / (knots[j + 1] - knots[j]);
    (j, t)
}

/// One fitted map `state -> E[target | state]` at a time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedConditional {
    pub basis: RegressionBasis,
    pub frame: Frame,
    /// `dimension x outputs`, basis-function major.
    pub coefficients: Vec<f64>,
    pub outputs: usize,
    pub step_index: usize,
    /// Root-mean-square in-sample residual over all outputs (weighted when the
    /// fit was weighted).
    pub residual_l2: f64,
    pub rank_deficient: bool,
    pub ridge: f64,
}

impl FittedConditional {
    /// A map that returns `value` everywhere.
    pub fn constant(basis: RegressionBasis, value: &[f64], step_index: usize) -> Self {
        Self {
            basis,
            frame: Frame::Constant,
            coefficients: value.to_vec(),
            outputs: value.len(),
            step_index,
            residual_l2: 0.0,
            rank_deficient: false,
            ridge: 0.0,
        }
    }

    pub fn dimension(&self) -> usize {
        self.frame.dimension()
    }

    pub fn evaluate_with(&self, x: &[f64], row: &mut SparseRow, out: &mut [f64]) {
        self.frame.row(x, row);
        let q = self.outputs;
        out[..q].fill(0.0);
        for (&i, &v) in row.idx.iter().zip(&row.val) {
            let c = &self.coefficients[i * q..(i + 1) * q];
            for (o, cv) in out.iter_mut().zip(c) {
                *o += v * cv;
            }
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.outputs];
        self.evaluate_with(x, &mut SparseRow::default(), &mut out);
        out
    }

    /// Evaluates on `paths * state_dim` states into `paths * outputs` values.
    pub fn evaluate_many(&self, states: &[f64], out: &mut [f64]) {
        let d = self.basis.state_dim;
        let q = self.outputs;
        out.par_chunks_mut(q * CHUNK).zip(states.par_chunks(d * CHUNK)).for_each_init(SparseRow::default, |row, (o, s)| {
            for (oi, si) in o.chunks_mut(q).zip(s.chunks(d)) {
                self.evaluate_with(si, row, oi);
            }
        });
    }

    /// Plain-text record: step index, basis descriptor, frame, coefficients,
    /// residual and solver flags, one field per line.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "step_index {}", self.step_index);
        let _ = writeln!(s, "basis {}", self.basis.descriptor());
        let _ = writeln!(s, "outputs {}", self.outputs);
        match &self.frame {
            Frame::Constant => {
                let _ = writeln!(s, "frame constant");
            }
            Frame::Polynomial { center, scale, exponents, .. } => {
                let _ = writeln!(s, "frame polynomial {}", exponents.len());
                let _ = writeln!(s, "center {}", join(center));
                let _ = writeln!(s, "scale {}", join(scale));
                for e in exponents {
                    let ex: Vec<String> = e.iter().map(|v| v.to_string()).collect();
                    let _ = writeln!(s, "monomial {}", ex.join(" "));
                }
            }
            Frame::PiecewiseLinear { knots } => {
                let _ = writeln!(s, "frame piecewise_linear {}", knots.len());
                for k in knots {
                    let _ = writeln!(s, "knots {}", join(k));
                }
            }
        }
        let _ = writeln!(s, "coefficients {}", join(&self.coefficients));
        let _ = writeln!(s, "residual_l2 {:?}", self.residual_l2);
        let _ = writeln!(s, "ridge {:?}", self.ridge);
        let _ = writeln!(s, "rank_deficient {}", self.rank_deficient);
        s
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| Error::Parse(format!("missing {key}")))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' ').or(if r.is_empty() { Some("") } else { None }))
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("expected {key}, found {line:?}")))
        };
        let floats = |s: &str| -> Result<Vec<f64>> { s.split_whitespace().map(parse_num::<f64>).collect() };
        let step_index = parse_num(&field("step_index")?)?;
        let basis = RegressionBasis::parse_descriptor(&field("basis")?)?;
        let outputs = parse_num(&field("outputs")?)?;
        let frame_line = field("frame")?;
        let fparts: Vec<&str> = frame_line.split_whitespace().collect();
        let frame = match fparts.first().copied() {
            Some("constant") => Frame::Constant,
            Some("polynomial") => {
                let count: usize = parse_num(fparts.get(1).copied().unwrap_or(""))?;
                let center = floats(&field("center")?)?;
                let scale = floats(&field("scale")?)?;
                let mut exponents = Vec::with_capacity(count);
                for _ in 0..count {
                    let e: Vec<u8> = field("monomial")?.split_whitespace().map(parse_num::<u8>).collect::<Result<_>>()?;
                    exponents.push(e);
                }
                let degree = match basis.kind {
                    BasisKind::Polynomial { degree } => degree,
                    _ => return Err(Error::Parse("frame does not match basis".into())),
                };
                Frame::Polynomial { center, scale, exponents, degree }
            }
            Some("piecewise_linear") => {
                let count: usize = parse_num(fparts.get(1).copied().unwrap_or(""))?;
                let knots = (0..count).map(|_| floats(&field("knots")?)).collect::<Result<_>>()?;
                Frame::PiecewiseLinear { knots }
            }
            _ => return Err(Error::Parse(format!("bad frame line {frame_line:?}"))),
        };
        let coefficients = floats(&field("coefficients")?)?;
        if coefficients.len() != frame.dimension() * outputs {
            return Err(Error::Parse("coefficient count does not match basis dimension".into()));
        }
        let residual_l2 = parse_num(&field("residual_l2")?)?;
        let ridge = parse_num(&field("ridge")?)?;
        let rank_deficient = parse_num(&field("rank_deficient")?)?;
        Ok(Self { basis, frame, coefficients, outputs, step_index, residual_l2, rank_deficient, ridge })
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse::<T>().map_err(|e| Error::Parse(format!("{s:?}: {e}")))
}

/// Least-squares projection of `targets` (`paths * outputs`) onto the basis
/// evaluated at `states` (`paths * state_dim`).
pub fn fit_conditional(
    states: &[f64],
    targets: &[f64],
    outputs: usize,
    basis: &RegressionBasis,
    step_index: usize,
) -> Result<FittedConditional> {
    fit_impl(states, targets, outputs, None, basis, step_index).map(|(f, _)| f)
}

/// [`fit_conditional`] that also returns the fitted values at `states`,
/// which saves evaluating the basis a second time.
pub fn fit_conditional_values(
    states: &[f64],
    targets: &[f64],
    outputs: usize,
    basis: &RegressionBasis,
    step_index: usize,
) -> Result<(FittedConditional, Vec<f64>)> {
    fit_impl(states, targets, outputs, None, basis, step_index)
}

/// Weighted least squares with per-path weights.
pub fn fit_conditional_weighted(
    states: &[f64],
    targets: &[f64],
    outputs: usize,
    weights: &[f64],
    basis: &RegressionBasis,
    step_index: usize,
) -> Result<FittedConditional> {
    fit_impl(states, targets, outputs, Some(weights), basis, step_index).map(|(f, _)| f)
}

/// Regresses `ΔM_r ΔB_c / Δt` on the state. The result has `n * d` outputs,
/// row `r` of the `n x d` density first.
#[allow(clippy::too_many_arguments)]
pub fn extract_density(
    martingale_increment: &[f64],
    n: usize,
    brownian_increment: &[f64],
    d: usize,
    dt: f64,
    states: &[f64],
    basis: &RegressionBasis,
    step_index: usize,
) -> Result<FittedConditional> {
    let targets = density_targets(martingale_increment, n, brownian_increment, d, dt)?;
    fit_conditional(states, &targets, n * d, basis, step_index)
}

pub(crate) fn density_targets(dm: &[f64], n: usize, db: &[f64], d: usize, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(invalid("time step must be positive"));
    }
    if dm.len() / n != db.len() / d {
        return Err(invalid("martingale and Brownian increments have different path counts"));
    }
    let paths = dm.len() / n;
    let mut targets = vec![0.0; paths * n * d];
    for p in 0..paths {
        for r in 0..n {
            for c in 0..d {
                targets[p * n * d + r * d + c] = dm[p * n + r] * db[p * d + c] / dt;
            }
        }
    }
    Ok(targets)
}

fn fit_impl(
    states: &[f64],
    targets: &[f64],
    outputs: usize,
    weights: Option<&[f64]>,
    basis: &RegressionBasis,
    step_index: usize,
) -> Result<(FittedConditional, Vec<f64>)> {
    let d = basis.state_dim;
    if outputs == 0 {
        return Err(invalid("at least one output is required"));
    }
    if !states.len().is_multiple_of(d) || !targets.len().is_multiple_of(outputs) {
        return Err(invalid("state or target length is not a multiple of its width"));
    }
    let n = states.len() / d;
    if targets.len() / outputs != n {
        return Err(invalid(format!("state and target path counts differ ({n} vs {})", targets.len() / outputs)));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(invalid("weight count does not match path count"));
        }
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(invalid("weights must be finite and non-negative"));
        }
    }
    let frame = basis.fit_frame(states);
    let p = frame.dimension();
    if n < PATHS_PER_FUNCTION * p {
        return Err(invalid(format!("{n} paths are too few for {p} basis functions (need {})", PATHS_PER_FUNCTION * p)));
    }
    let q = outputs;
    let wsum = match weights {
        Some(w) => pairwise_sum(w),
        None => n as f64,
    };
    if !(wsum > 0.0) {
        return Err(invalid("weights sum to zero"));
    }
    // Weighted mean of every output. The regression runs on centered targets
    // and the mean is added back along the constant direction, so constant
    // targets are reproduced without ridge shrinkage.
    let mut means = vec![0.0; q];
    for (o, m) in means.iter_mut().enumerate() {
        let col: Vec<f64> = match weights {
            Some(w) => (0..n).map(|i| w[i] * targets[i * q + o]).collect(),
            None => (0..n).map(|i| targets[i * q + o]).collect(),
        };
        *m = pairwise_sum(&col) / wsum;
    }

    let design = Design::build(&frame, states, d);
    let (coefficients, ridge, rank_deficient) = if matches!(frame, Frame::Constant) {
        (means.clone(), 0.0, false)
    } else {
        let (gram, rhs) = accumulate(&design, p, targets, q, &means, weights);
        let (sol, ridge, deficient) = ridge_solve(gram, rhs, p, q)?;
        let unit = frame.unit();
        let mut c = sol;
        for i in 0..p {
            for o in 0..q {
                c[i * q + o] += unit[i] * means[o];
            }
        }
        (c, ridge, deficient)
    };

    let mut fitted =
        FittedConditional { basis: *basis, frame, coefficients, outputs: q, step_index, residual_l2: 0.0, rank_deficient, ridge };
    let values = design.evaluate(&fitted.coefficients, q);
    fitted.residual_l2 = residual_rms(&values, targets, q, weights, wsum);
    Ok((fitted, values))
}

type Partial = (Vec<f64>, Vec<f64>);

/// Basis values of every path, stored once per fit. Rows have a fixed width;
/// dense rows (polynomial frames) carry no index.
struct Design {
    width: usize,
    dense: bool,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Design {
    fn build(frame: &Frame, states: &[f64], d: usize) -> Self {
        let n = states.len() / d;
        let width = frame.row_width();
        let mut val = vec![0.0; n * width];
        if let Frame::Polynomial { .. } = frame {
            val.par_chunks_mut(width * CHUNK).zip(states.par_chunks(d * CHUNK)).for_each_init(Vec::new, |powers, (vc, sc)| {
                for (vv, x) in vc.chunks_mut(width).zip(sc.chunks(d)) {
                    frame.dense_row(x, vv, powers);
                }
            });
            return Self { width, dense: true, idx: Vec::new(), val };
        }
        let mut idx = vec![0usize; n * width];
        idx.par_chunks_mut(width * CHUNK).zip(val.par_chunks_mut(width * CHUNK)).zip(states.par_chunks(d * CHUNK)).for_each_init(
            SparseRow::default,
            |row, ((ic, vc), sc)| {
                for ((ii, vv), x) in ic.chunks_mut(width).zip(vc.chunks_mut(width)).zip(sc.chunks(d)) {
                    frame.row(x, row);
                    ii.copy_from_slice(&row.idx);
                    vv.copy_from_slice(&row.val);
                }
            },
        );
        Self { width, dense: false, idx, val }
    }

    fn rows(&self) -> usize {
        self.val.len() / self.width.max(1)
    }

    #[inline]
    fn index(&self, i: usize, a: usize) -> usize {
        if self.dense {
            a
        } else {
            self.idx[i * self.width + a]
        }
    }

    fn evaluate(&self, coefficients: &[f64], q: usize) -> Vec<f64> {
        let w = self.width;
        let mut out = vec![0.0; self.rows() * q];
        out.par_chunks_mut(q * CHUNK).enumerate().for_each(|(c, oc)| {
            for (r, o) in oc.chunks_mut(q).enumerate() {
                let i = c * CHUNK + r;
                if self.dense {
                    let row = &self.val[i * w..(i + 1) * w];
                    for (o_idx, ov) in o.iter_mut().enumerate() {
                        *ov = row.iter().enumerate().map(|(a, v)| v * coefficients[a * q + o_idx]).sum();
                    }
                    continue;
                }
                for (a, &v) in self.val[i * w..(i + 1) * w].iter().enumerate() {
                    let j = self.index(i, a);
                    for (ov, cv) in o.iter_mut().zip(&coefficients[j * q..(j + 1) * q]) {
                        *ov += v * cv;
                    }
                }
            }
        });
        out
    }
}

fn accumulate(design: &Design, p: usize, targets: &[f64], q: usize, means: &[f64], weights: Option<&[f64]>) -> Partial {
    let n = design.rows();
    let m = design.width;
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<Partial> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            if design.dense {
                return dense_block(&design.val[lo * m..hi * m], m, &targets[lo * q..hi * q], q, means, weights.map(|w| &w[lo..hi]));
            }
            let mut g = vec![0.0; p * p];
            let mut b = vec![0.0; p * q];
            let mut yc = vec![0.0; q];
            for i in lo..hi {
                let w = weights.map_or(1.0, |w| w[i]);
                if w == 0.0 {
                    continue;
                }
                let val = &design.val[i * m..(i + 1) * m];
                for o in 0..q {
                    yc[o] = targets[i * q + o] - means[o];
                }
                let idx = &design.idx[i * m..(i + 1) * m];
                for a in 0..m {
                    let ia = idx[a];
                    let wa = w * val[a];
                    let grow = &mut g[ia * p..(ia + 1) * p];
                    for (&jb, &vb) in idx.iter().zip(val) {
                        grow[jb] += wa * vb;
                    }
                    for (bo, yo) in b[ia * q..(ia + 1) * q].iter_mut().zip(&yc) {
                        *bo += wa * yo;
                    }
                }
            }
            (g, b)
        })
        .collect();
    let mut g = vec![0.0; p * p];
    let mut b = vec![0.0; p * q];
    for (pg, pb) in partials {
        for (x, y) in g.iter_mut().zip(pg) {
            *x += y;
        }
        for (x, y) in b.iter_mut().zip(pb) {
            *x += y;
        }
    }
    (g, b)
}

/// Gram matrix and right-hand side of one block of dense rows, through
/// blocked matrix products.
fn dense_block(val: &[f64], m: usize, targets: &[f64], q: usize, means: &[f64], weights: Option<&[f64]>) -> Partial {
    let rows = val.len() / m;
    let a = DMatrixView::from_slice_with_strides(val, rows, m, m, 1);
    // Weighted transpose, m x rows.
    let awt = DMatrix::from_fn(m, rows, |j, i| weights.map_or(1.0, |w| w[i]) * val[i * m + j]);
    let yc = DMatrix::from_fn(rows, q, |i, o| targets[i * q + o] - means[o]);
    let mut g = DMatrix::<f64>::zeros(m, m);
    g.gemm(1.0, &awt, &a, 0.0);
    let mut b = DMatrix::<f64>::zeros(m, q);
    b.gemm(1.0, &awt, &yc, 0.0);
    // Row-major copies.
    (g.transpose().as_slice().to_vec(), b.transpose().as_slice().to_vec())
}

fn ridge_solve(gram: Vec<f64>, rhs: Vec<f64>, p: usize, q: usize) -> Result<(Vec<f64>, f64, bool)> {
    let g = DMatrix::from_row_slice(p, p, &gram);
    let eig = SymmetricEigen::new(g.clone());
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lmax > 0.0) {
        // All centered rows vanish: the projection is zero.
        return Ok((vec![0.0; p * q], 0.0, true));
    }
    let ridge = RIDGE_FACTOR * lmax;
    let deficient = lmin <= RANK_TOL * lmax;
    let mut a = g;
    for i in 0..p {
        a[(i, i)] += ridge;
    }
    let b = DMatrix::from_row_slice(p, q, &rhs);
    let sol = match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => {
            // Fall back on the eigen-decomposition when rounding breaks
            // positive definiteness.
            let inv = DVector::from_iterator(p, eig.eigenvalues.iter().map(|l| 1.0 / (l.max(0.0) + ridge)));
            let v = &eig.eigenvectors;
            v * DMatrix::from_diagonal(&inv) * v.transpose() * b
        }
    };
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        for o in 0..q {
            out[i * q + o] = sol[(i, o)];
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidState("regression produced non-finite coefficients".into()));
    }
    Ok((out, ridge, deficient))
}

fn residual_rms(values: &[f64], targets: &[f64], q: usize, weights: Option<&[f64]>, wsum: f64) -> f64 {
    let sq: Vec<f64> = values
        .chunks(q)
        .zip(targets.chunks(q))
        .enumerate()
        .map(|(i, (v, t))| {
            let s: f64 = v.iter().zip(t).map(|(a, b)| (b - a) * (b - a)).sum();
            weights.map_or(1.0, |w| w[i]) * s
        })
        .collect();
    (pairwise_sum(&sq) / (wsum * q as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_uniform_grid, sample_ensemble};
    use proptest::prelude::*;

    fn bt_pairs(paths: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let g = build_uniform_grid(1.0, 2).unwrap();
        let e = sample_ensemble(&g, paths, 1, seed).unwrap();
        let bt: Vec<f64> = (0..paths).map(|p| e.increment(p, 0)[0]).collect();
        let b_end: Vec<f64> = (0..paths).map(|p| e.increment(p, 0)[0] + e.increment(p, 1)[0]).collect();
        (bt, b_end)
    }

    /// Raw monomial coefficients `(c0, c1, c2)` of a 1-D quadratic fit, read
    /// off its values at -1, 0 and 1.
    fn raw_quadratic(f: &FittedConditional) -> [f64; 3] {
        let (a, b, c) = (f.evaluate(&[-1.0])[0], f.evaluate(&[0.0])[0], f.evaluate(&[1.0])[0]);
        [b, (c - a) / 2.0, (a + c) / 2.0 - b]
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(3, &[true, true]).len(), 10);
        assert_eq!(monomials(2, &[true, false]).len(), 3);
        assert_eq!(RegressionBasis::polynomial(3, 2).unwrap().nominal_dimension(), 10);
        assert_eq!(RegressionBasis::piecewise_linear(4, 2).unwrap().nominal_dimension(), 25);
    }

    #[test]
    fn basis_rejects_zero_order() {
        assert!(RegressionBasis::polynomial(0, 1).is_err());
        assert!(RegressionBasis::piecewise_linear(3, 0).is_err());
    }

    #[test]
    fn constant_target_is_reproduced() {
        let (bt, _) = bt_pairs(1000, 1);
        for basis in [RegressionBasis::polynomial(3, 1).unwrap(), RegressionBasis::piecewise_linear(8, 1).unwrap()] {
            let f = fit_conditional(&bt, &vec![1.0; 1000], 1, &basis, 0).unwrap();
            assert!(f.residual_l2 < 1e-14);
            assert!((f.evaluate(&[0.3])[0] - 1.0).abs() < 1e-14);
            assert!((f.evaluate(&[5.0])[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn martingale_projection_is_identity() {
        let (bt, b_end) = bt_pairs(100_000, 11);
        let f = fit_conditional(&bt, &b_end, 1, &RegressionBasis::polynomial(2, 1).unwrap(), 1).unwrap();
        let [c0, c1, c2] = raw_quadratic(&f);
        assert!((c1 - 1.0).abs() < 0.02, "{c1}");
        assert!(c0.abs() < 0.02 && c2.abs() < 0.02, "{c0} {c2}");
    }

    #[test]
    fn squared_brownian_projection() {
        let (bt, b_end) = bt_pairs(100_000, 12);
        let sq: Vec<f64> = b_end.iter().map(|x| x * x).collect();
        let f = fit_conditional(&bt, &sq, 1, &RegressionBasis::polynomial(2, 1).unwrap(), 1).unwrap();
        let [c0, c1, c2] = raw_quadratic(&f);
        assert!((c2 - 1.0).abs() < 0.05, "{c2}");
        assert!((c0 - 0.5).abs() < 0.05, "{c0}");
        assert!(c1.abs() < 0.05);
    }

    #[test]
    fn density_of_brownian_motion_is_one() {
        let (bt, b_end) = bt_pairs(100_000, 13);
        let db: Vec<f64> = b_end.iter().zip(&bt).map(|(a, b)| a - b).collect();
        let basis = RegressionBasis::polynomial(2, 1).unwrap();
        let z = extract_density(&db, 1, &db, 1, 0.5, &bt, &basis, 1).unwrap();
        for x in [-1.0, 0.0, 1.0] {
            assert!((z.evaluate(&[x])[0] - 1.0).abs() < 0.05);
        }
        let zero = extract_density(&vec![0.0; db.len()], 1, &db, 1, 0.5, &bt, &basis, 1).unwrap();
        assert!(zero.coefficients.iter().all(|c| c.abs() < 0.05));
    }

    #[test]
    fn density_of_squared_brownian_motion() {
        let (bt, b_end) = bt_pairs(100_000, 14);
        // M = B^2 - t, increment from t=0.5 to 1
        let dm: Vec<f64> = b_end.iter().zip(&bt).map(|(b1, b0)| (b1 * b1 - 1.0) - (b0 * b0 - 0.5)).collect();
        let db: Vec<f64> = b_end.iter().zip(&bt).map(|(a, b)| a - b).collect();
        let z = extract_density(&dm, 1, &db, 1, 0.5, &bt, &RegressionBasis::polynomial(2, 1).unwrap(), 1).unwrap();
        let [_, c1, _] = raw_quadratic(&z);
        // Over a finite step the target is 2 B_t + ΔB, so the slope is exactly 2.
        assert!((c1 - 2.0).abs() < 0.1, "{c1}");
    }

    #[test]
    fn too_few_paths_is_rejected() {
        let (bt, b_end) = bt_pairs(50, 3);
        let r = fit_conditional(&bt, &b_end, 1, &RegressionBasis::polynomial(5, 1).unwrap(), 0);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn degenerate_state_averages() {
        let states = vec![0.5; 200];
        let targets: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let f = fit_conditional(&states, &targets, 1, &RegressionBasis::piecewise_linear(10, 1).unwrap(), 0).unwrap();
        assert_eq!(f.frame, Frame::Constant);
        assert!((f.evaluate(&[0.5])[0] - 99.5).abs() < 1e-12);
        assert_eq!(f.ridge, 0.0);
    }

    #[test]
    fn duplicated_column_is_flagged() {
        // Two identical state coordinates make the design singular.
        let (bt, b_end) = bt_pairs(20_000, 4);
        let states: Vec<f64> = bt.iter().flat_map(|&x| [x, x]).collect();
        let f = fit_conditional(&states, &b_end, 1, &RegressionBasis::polynomial(1, 2).unwrap(), 0).unwrap();
        assert!(f.rank_deficient);
        assert!(f.ridge > 0.0);
        assert!((f.evaluate(&[0.4, 0.4])[0] - 0.4).abs() < 0.05);
    }

    #[test]
    fn hat_basis_interpolates_piecewise_linear_targets() {
        let xs: Vec<f64> = (0..2000).map(|i| -2.0 + 4.0 * i as f64 / 1999.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
        let f = fit_conditional(&xs, &ys, 1, &RegressionBasis::piecewise_linear(7, 1).unwrap(), 0).unwrap();
        for x in [-3.0, -1.234, 0.0, 1.9, 2.5] {
            assert!((f.evaluate(&[x])[0] - (3.0 * x - 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn record_roundtrip() {
        let (bt, b_end) = bt_pairs(2000, 5);
        for basis in [RegressionBasis::polynomial(3, 1).unwrap(), RegressionBasis::piecewise_linear(6, 1).unwrap()] {
            let f = fit_conditional(&bt, &b_end, 1, &basis, 7).unwrap();
            let back = FittedConditional::from_record(&f.to_record()).unwrap();
            assert_eq!(back, f);
        }
        assert!(FittedConditional::from_record("step_index x\n").is_err());
    }

    #[test]
    fn evaluate_many_matches_pointwise() {
        let (bt, b_end) = bt_pairs(10_000, 6);
        let f = fit_conditional(&bt, &b_end, 1, &RegressionBasis::piecewise_linear(10, 1).unwrap(), 0).unwrap();
        let mut out = vec![0.0; bt.len()];
        f.evaluate_many(&bt, &mut out);
        for i in (0..bt.len()).step_by(997) {
            assert_eq!(out[i], f.evaluate(&bt[i..i + 1])[0]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fit_is_linear_in_the_target(a in -3.0..3.0f64, b in -3.0..3.0f64, seed in 0u64..1000, bins in 2usize..12) {
            let (bt, b_end) = bt_pairs(3000, seed);
            let t2: Vec<f64> = b_end.iter().map(|x| x.sin()).collect();
            let mix: Vec<f64> = b_end.iter().zip(&t2).map(|(x, y)| a * x + b * y).collect();
            let basis = RegressionBasis::piecewise_linear(bins, 1).unwrap();
            let f1 = fit_conditional(&bt, &b_end, 1, &basis, 0).unwrap();
            let f2 = fit_conditional(&bt, &t2, 1, &basis, 0).unwrap();
            let fm = fit_conditional(&bt, &mix, 1, &basis, 0).unwrap();
            for i in 0..fm.coefficients.len() {
                let lin = a * f1.coefficients[i] + b * f2.coefficients[i];
                prop_assert!((fm.coefficients[i] - lin).abs() < 1e-8 * (1.0 + lin.abs()));
            }
        }

        #[test]
        fn basis_values_are_finite_everywhere(x in -1e6..1e6f64, deg in 1usize..6, bins in 1usize..20) {
            let (bt, _) = bt_pairs(500, 9);
            let mut row = SparseRow::default();
            for basis in [RegressionBasis::polynomial(deg, 1).unwrap(), RegressionBasis::piecewise_linear(bins, 1).unwrap()] {
                basis.fit_frame(&bt).row(&[x], &mut row);
                prop_assert!(row.val.iter().all(|v| v.is_finite()));
            }
        }

        #[test]
        fn hat_rows_partition_unity(x in -10.0..10.0f64, y in -10.0..10.0f64, bins in 1usize..9) {
            let (bt, b_end) = bt_pairs(400, 2);
            let states: Vec<f64> = bt.iter().zip(&b_end).flat_map(|(a, b)| [*a, *b]).collect();
            let frame = RegressionBasis::piecewise_linear(bins, 2).unwrap().fit_frame(&states);
            let mut row = SparseRow::default();
            frame.row(&[x, y], &mut row);
            let s: f64 = row.val.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(row.idx.iter().all(|&i| i < frame.dimension()));
        }
    }
}
