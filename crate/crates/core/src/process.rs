//! Step-major storage for per-path processes.

use serde::{Deserialize, Serialize};

/// Values of a vector-valued process on every path at every stored time.
///
/// Layout is `[time][path][component]`, so the cross-section at one time is a
/// contiguous `paths * dim` slice. That is the shape regression wants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleProcess {
    times: usize,
    paths: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EnsembleProcess {
    pub fn zeros(times: usize, paths: usize, dim: usize) -> Self {
        Self { times, paths, dim, data: vec![0.0; times * paths * dim] }
    }

    pub fn filled(times: usize, paths: usize, dim: usize, value: f64) -> Self {
        Self { times, paths, dim, data: vec![value; times * paths * dim] }
    }

    pub fn times(&self) -> usize {
        self.times
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn at(&self, k: usize) -> &[f64] {
        let w = self.paths * self.dim;
        &self.data[k * w..(k + 1) * w]
    }

    #[inline]
    pub fn at_mut(&mut self, k: usize) -> &mut [f64] {
        let w = self.paths * self.dim;
        &mut self.data[k * w..(k + 1) * w]
    }

    /// Cross-sections `k` (read) and `k + 1` (write) at once.
    pub fn step_pair_mut(&mut self, k: usize) -> (&[f64], &mut [f64]) {
        let w = self.paths * self.dim;
        let (head, tail) = self.data.split_at_mut((k + 1) * w);
        (&head[k * w..], &mut tail[..w])
    }

    #[inline]
    pub fn get(&self, k: usize, path: usize) -> &[f64] {
        let base = (k * self.paths + path) * self.dim;
        &self.data[base..base + self.dim]
    }

    #[inline]
    pub fn get_mut(&mut self, k: usize, path: usize) -> &mut [f64] {
        let base = (k * self.paths + path) * self.dim;
        &mut self.data[base..base + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Largest absolute elementwise difference against another process of the
    /// same shape.
    pub fn max_abs_diff(&self, other: &EnsembleProcess) -> f64 {
        assert_eq!((self.times, self.paths, self.dim), (other.times, other.paths, other.dim));
        self.data.iter().zip(&other.data).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}
