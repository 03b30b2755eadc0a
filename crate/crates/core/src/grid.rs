//! Time discretization, contraction-compliant partitions and Brownian
//! increment ensembles.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Ordered time points `0 = t_0 < t_1 < ... < t_K = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(invalid("step count must be at least 1"));
        }
        let dt = horizon / steps as f64;
        let mut points: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
        points[steps] = horizon;
        Ok(Self { points })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid("a grid needs at least two points"));
        }
        if points[0] != 0.0 {
            return Err(invalid("grid must start at 0"));
        }
        if points.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(invalid("grid points must be finite and strictly increasing"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.points[k]
    }

    #[inline]
    pub fn dt(&self, k: usize) -> f64 {
        self.points[k + 1] - self.points[k]
    }

    pub fn mesh(&self) -> f64 {
        self.points.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Inserts the midpoint of every step.
    pub fn refine(&self) -> TimeGrid {
        let mut points = Vec::with_capacity(2 * self.points.len() - 1);
        for w in self.points.windows(2) {
            points.push(w[0]);
            points.push(0.5 * (w[0] + w[1]));
        }
        points.push(self.horizon());
        TimeGrid { points }
    }

    /// Index of the grid point equal to `t` (within rounding).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * self.horizon();
        self.points.iter().position(|p| (p - t).abs() <= tol)
    }
}

pub fn build_uniform_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::uniform(horizon, steps)
}

/// Lipschitz constant of the coefficients and the gradient bound of the
/// decoupling field (or the terminal Lipschitz constant on a single interval).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionBudget {
    pub c1: f64,
    pub c_grad: f64,
}

impl ContractionBudget {
    pub fn new(c1: f64, c_grad: f64) -> Result<Self> {
        if !(c1.is_finite() && c1 > 0.0) {
            return Err(invalid(format!("c1 must be positive, got {c1}")));
        }
        if !(c_grad.is_finite() && c_grad >= 0.0) {
            return Err(invalid(format!("gradient bound must be non-negative, got {c_grad}")));
        }
        Ok(Self { c1, c_grad })
    }

    /// `1/(8 c1 (1 + c_grad)) ∧ 1`, the admissible square root of a window length.
    pub fn sqrt_mesh_bound(&self) -> f64 {
        (1.0 / (8.0 * self.c1 * (1.0 + self.c_grad))).min(1.0)
    }

    pub fn max_mesh(&self) -> f64 {
        let b = self.sqrt_mesh_bound();
        b * b
    }

    pub fn admits(&self, length: f64) -> bool {
        length.sqrt() <= self.sqrt_mesh_bound() * (1.0 + 1e-12)
    }
}

/// Coarsest uniform grid on `[0, horizon]` whose every step is a contraction window.
pub fn build_contraction_partition(horizon: f64, budget: ContractionBudget) -> Result<TimeGrid> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(invalid(format!("horizon must be positive, got {horizon}")));
    }
    let ratio = horizon / budget.max_mesh();
    let mut steps = (ratio * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    while !budget.admits(horizon / steps as f64) {
        steps += 1;
    }
    TimeGrid::uniform(horizon, steps)
}

/// Groups the steps of `grid` into consecutive windows that each satisfy the
/// contraction budget. Returns `(first_step, last_step_exclusive)` pairs.
///
/// Fails when a single grid step is already longer than the budget allows,
/// unless `force` is set, in which case every step becomes its own window.
pub fn contraction_windows(grid: &TimeGrid, budget: ContractionBudget, force: bool) -> Result<Vec<(usize, usize)>> {
    let bound = budget.max_mesh();
    if !budget.admits(grid.mesh()) && !force {
        return Err(Error::Precondition(format!("grid mesh {:.6} exceeds the contraction bound {:.6}", grid.mesh(), bound)));
    }
    let mut windows = Vec::new();
    let mut start = 0;
    while start < grid.steps() {
        let mut end = start + 1;
        while end < grid.steps() && budget.admits(grid.time(end + 1) - grid.time(start)) {
            end += 1;
        }
        windows.push((start, end));
        start = end;
    }
    Ok(windows)
}

/// Like [`contraction_windows`], but the last window, whose terminal map is
/// `φ` itself, is held to `terminal` while the others use `interior`.
pub fn contraction_windows_split(
    grid: &TimeGrid,
    interior: ContractionBudget,
    terminal: ContractionBudget,
    force: bool,
) -> Result<Vec<(usize, usize)>> {
    let k = grid.steps();
    let horizon = grid.horizon();
    let mut first = k - 1;
    while first > 0 && terminal.admits(horizon - grid.time(first - 1)) {
        first -= 1;
    }
    if !terminal.admits(horizon - grid.time(first)) && !force {
        return Err(Error::Precondition(format!(
            "last grid step {:.6} exceeds the terminal contraction bound {:.6}",
            grid.dt(k - 1),
            terminal.max_mesh()
        )));
    }
    if first == 0 {
        return Ok(vec![(0, k)]);
    }
    let head = TimeGrid::from_points(grid.points()[..=first].to_vec())?;
    let mut windows = contraction_windows(&head, interior, force)?;
    windows.push((first, k));
    Ok(windows)
}

/// Independent seed for a named sub-stream of a master seed.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-path random stream: path `i` is reproducible without generating paths
/// `0..i` first.
pub(crate) fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Gaussian increments `ΔB` for `num_paths` paths of a `dim`-dimensional
/// Brownian motion on a grid. Stored path-major, step-minor, dimension innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianEnsemble {
    grid: TimeGrid,
    num_paths: usize,
    dim: usize,
    seed: u64,
    increments: Vec<f64>,
}

const ENSEMBLE_MAGIC: &str = "FDEB1";

impl BrownianEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn num_paths(&self) -> usize {
        self.num_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// `ΔB_k` on `path`, a `dim`-slice.
    #[inline]
    pub fn increment(&self, path: usize, k: usize) -> &[f64] {
        let base = (path * self.grid.steps() + k) * self.dim;
        &self.increments[base..base + self.dim]
    }

    pub fn path_increments(&self, path: usize) -> &[f64] {
        let w = self.grid.steps() * self.dim;
        &self.increments[path * w..(path + 1) * w]
    }

    pub fn raw(&self) -> &[f64] {
        &self.increments
    }

    /// `B_{t_k}` on `path` (with `B_0 = 0`).
    pub fn brownian_at(&self, path: usize, k: usize) -> Vec<f64> {
        let mut b = vec![0.0; self.dim];
        for m in 0..k {
            for (bc, dc) in b.iter_mut().zip(self.increment(path, m)) {
                *bc += dc;
            }
        }
        b
    }

    /// Copy of `ΔB_k` for all paths, `paths * dim` values.
    pub fn cross_section(&self, k: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_paths * self.dim);
        for p in 0..self.num_paths {
            out.extend_from_slice(self.increment(p, k));
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {} {} {} {}", ENSEMBLE_MAGIC, self.grid.steps(), self.num_paths, self.dim, self.seed)?;
        let pts: Vec<String> = self.grid.points().iter().map(|t| format!("{t:?}")).collect();
        writeln!(w, "{}", pts.join(" "))?;
        for p in 0..self.num_paths {
            let row: Vec<String> = self.path_increments(p).iter().map(|x| format!("{x:?}")).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next =
            |what: &str| -> Result<String> { lines.next().ok_or_else(|| Error::Parse(format!("missing {what}")))?.map_err(Error::from) };
        let header = next("header")?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != ENSEMBLE_MAGIC {
            return Err(Error::Parse(format!("bad ensemble header: {header:?}")));
        }
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("{s}: {e}")));
        let steps = parse_usize(fields[1])?;
        let num_paths = parse_usize(fields[2])?;
        let dim = parse_usize(fields[3])?;
        let seed = fields[4].parse::<u64>().map_err(|e| Error::Parse(format!("seed: {e}")))?;
        let parse_row = |line: String| -> Result<Vec<f64>> {
            line.split_whitespace().map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}")))).collect()
        };
        let points = parse_row(next("grid")?)?;
        if points.len() != steps + 1 {
            return Err(Error::Parse("grid length does not match step count".into()));
        }
        let grid = TimeGrid::from_points(points)?;
        let mut increments = Vec::with_capacity(num_paths * steps * dim);
        for p in 0..num_paths {
            let row = parse_row(next(&format!("path {p}"))?)?;
            if row.len() != steps * dim {
                return Err(Error::Parse(format!("path {p} has {} values", row.len())));
            }
            increments.extend(row);
        }
        Ok(Self { grid, num_paths, dim, seed, increments })
    }
}

pub fn sample_ensemble(grid: &TimeGrid, num_paths: usize, dim: usize, seed: u64) -> Result<BrownianEnsemble> {
    if num_paths == 0 || dim == 0 {
        return Err(invalid("num_paths and dim must be at least 1"));
    }
    let steps = grid.steps();
    let scales: Vec<f64> = (0..steps).map(|k| grid.dt(k).sqrt()).collect();
    let mut increments = vec![0.0; num_paths * steps * dim];
    increments.par_chunks_mut(steps * dim).enumerate().for_each(|(p, row)| {
        let mut rng = path_rng(seed, p);
        for (k, step) in row.chunks_mut(dim).enumerate() {
            for v in step {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = g * scales[k];
            }
        }
    });
    Ok(BrownianEnsemble { grid: grid.clone(), num_paths, dim, seed, increments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Estimate;

    #[test]
    fn uniform_grid_points() {
        let g = build_uniform_grid(1.0, 4).unwrap();
        assert_eq!(g.points(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(build_uniform_grid(1.0, 1).unwrap().points(), &[0.0, 1.0]);
        assert!((build_uniform_grid(0.5, 5).unwrap().mesh() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn uniform_grid_rejects_bad_input() {
        assert!(matches!(build_uniform_grid(0.0, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_uniform_grid(-1.0, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_uniform_grid(1.0, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn from_points_rejects_unordered() {
        assert!(TimeGrid::from_points(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeGrid::from_points(vec![0.1, 0.5]).is_err());
    }

    #[test]
    fn contraction_partition_examples() {
        let b = ContractionBudget::new(1.0, 0.0).unwrap();
        assert_eq!(build_contraction_partition(1.0, b).unwrap().steps(), 64);
        assert_eq!(build_contraction_partition(4.0, b).unwrap().steps(), 256);
        let loose = ContractionBudget::new(1.0 / 16.0, 1.0).unwrap();
        assert_eq!(loose.sqrt_mesh_bound(), 1.0);
        assert_eq!(build_contraction_partition(1.0, loose).unwrap().steps(), 1);
    }

    #[test]
    fn budget_rejects_bad_constants() {
        assert!(ContractionBudget::new(0.0, 1.0).is_err());
        assert!(ContractionBudget::new(1.0, -0.1).is_err());
    }

    #[test]
    fn windows_group_steps_within_bound() {
        let grid = build_uniform_grid(1.0, 64).unwrap();
        // bound 1/(8*0.3*2) squared ~ 0.0434 -> two steps of 1/64 per window
        let b = ContractionBudget::new(0.3, 1.0).unwrap();
        let w = contraction_windows(&grid, b, false).unwrap();
        assert_eq!(w.len(), 32);
        assert!(w.iter().all(|&(a, e)| e - a == 2));
        let coarse = build_uniform_grid(1.0, 4).unwrap();
        assert!(matches!(contraction_windows(&coarse, b, false), Err(Error::Precondition(_))));
        assert_eq!(contraction_windows(&coarse, b, true).unwrap().len(), 4);
    }

    #[test]
    fn last_window_uses_terminal_budget() {
        let grid = build_uniform_grid(1.0, 50).unwrap();
        // interior bound 0.25 (12 steps), terminal bound ~0.0333 (1 step)
        let interior = ContractionBudget::new(0.125, 1.0).unwrap();
        let terminal = ContractionBudget::new(0.125, 4.48).unwrap();
        let w = contraction_windows_split(&grid, interior, terminal, false).unwrap();
        assert_eq!(*w.last().unwrap(), (49, 50));
        assert_eq!(w[0], (0, 12));
        assert!(w.windows(2).all(|p| p[0].1 == p[1].0));
        let lax = ContractionBudget::new(1.0 / 16.0, 1.0).unwrap();
        assert_eq!(contraction_windows_split(&grid, interior, lax, false).unwrap(), vec![(0, 50)]);
    }

    #[test]
    fn ensemble_is_deterministic_and_path_addressable() {
        let g = build_uniform_grid(1.0, 3).unwrap();
        let a = sample_ensemble(&g, 50, 2, 7).unwrap();
        let b = sample_ensemble(&g, 50, 2, 7).unwrap();
        assert_eq!(a.raw(), b.raw());
        // path 10 of a longer ensemble is the same stream
        let c = sample_ensemble(&g, 200, 2, 7).unwrap();
        assert_eq!(a.path_increments(10), c.path_increments(10));
        let d = sample_ensemble(&g, 50, 2, 8).unwrap();
        assert_ne!(a.raw(), d.raw());
    }

    #[test]
    fn single_step_variance_matches_dt() {
        let g = build_uniform_grid(1.0, 1).unwrap();
        let e = sample_ensemble(&g, 100_000, 1, 2024).unwrap();
        let est = Estimate::from_samples(e.raw());
        let var = est.std_dev * est.std_dev;
        assert!((0.98..=1.02).contains(&var), "variance {var}");
        assert!(est.z_score(0.0).abs() <= 5.0);
    }

    #[test]
    fn serialization_roundtrip_is_bit_exact() {
        let g = build_uniform_grid(0.7, 5).unwrap();
        let e = sample_ensemble(&g, 17, 2, 99).unwrap();
        let mut buf = Vec::new();
        e.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"FDEB1 5 17 2 99\n"));
        let back = BrownianEnsemble::read_from(&buf[..]).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn serialization_rejects_bad_magic() {
        let bad = b"FDEB2 1 1 1 0\n0 1\n0.5\n";
        assert!(matches!(BrownianEnsemble::read_from(&bad[..]), Err(Error::Parse(_))));
    }

    #[test]
    fn derived_seeds_differ_by_name() {
        assert_ne!(derive_seed(1, "ensemble"), derive_seed(1, "evaluation"));
        assert_eq!(derive_seed(1, "ensemble"), derive_seed(1, "ensemble"));
    }
}
