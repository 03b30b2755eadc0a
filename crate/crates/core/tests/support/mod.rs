//! Reference solutions computed without the Monte Carlo machinery.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of the `n`-point Gauss rule for the standard normal law
/// (probabilists' Hermite weight, weights summing to one), by Golub-Welsch.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `E[g(x + sqrt(tau) G)]` for a standard normal `G`.
pub fn heat_expectation(g: impl Fn(f64) -> f64, x: f64, tau: f64) -> f64 {
    let (nodes, weights) = gauss_hermite(80);
    let s = tau.max(0.0).sqrt();
    nodes.iter().zip(&weights).map(|(u, w)| w * g(x + s * u)).sum()
}

/// Crank-Nicolson solve of `u_t + u_xx / 2 + a u = 0` backwards from
/// `u(T, .) = phi` on `[lo, hi]` with `intervals` cells and frozen boundary
/// values. Returns the nodes and `u(T - tau, .)`.
pub fn crank_nicolson_linear(
    a: f64,
    phi: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    intervals: usize,
    tau: f64,
    time_steps: usize,
) -> (Vec<f64>, Vec<f64>) {
    let h = (hi - lo) / intervals as f64;
    let xs: Vec<f64> = (0..=intervals).map(|i| lo + h * i as f64).collect();
    let mut u: Vec<f64> = xs.iter().map(|&x| phi(x)).collect();
    if tau <= 0.0 {
        return (xs, u);
    }
    let dt = tau / time_steps as f64;
    let m = intervals - 1;
    // Operator L u_i = (u_{i-1} - 2u_i + u_{i+1}) / (2h^2) + a u_i.
    let off = 0.5 / (h * h);
    let diag = -1.0 / (h * h) + a;
    let (sub, main, sup) = (-0.5 * dt * off, 1.0 - 0.5 * dt * diag, -0.5 * dt * off);
    for _ in 0..time_steps {
        let mut rhs: Vec<f64> = (1..=m).map(|j| u[j] + 0.5 * dt * (off * (u[j - 1] + u[j + 1]) + diag * u[j])).collect();
        rhs[0] -= sub * u[0];
        rhs[m - 1] -= sup * u[intervals];
        // Thomas algorithm.
        let mut c = vec![0.0; m];
        let mut d = vec![0.0; m];
        c[0] = sup / main;
        d[0] = rhs[0] / main;
        for i in 1..m {
            let den = main - sub * c[i - 1];
            c[i] = sup / den;
            d[i] = (rhs[i] - sub * d[i - 1]) / den;
        }
        u[m] = d[m - 1];
        for i in (0..m - 1).rev() {
            u[i + 1] = d[i] - c[i] * u[i + 2];
        }
    }
    (xs, u)
}

/// Linear interpolation on sorted nodes.
pub fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let j = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1);
    let t = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
    ys[j - 1] * (1.0 - t) + ys[j] * t
}

pub fn state_points() -> Vec<f64> {
    (0..=40).map(|i| -2.0 + 0.1 * i as f64).collect()
}
