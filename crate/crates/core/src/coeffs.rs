//! FBSDE coefficient sets with spot-checked Lipschitz and boundedness claims.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// `(t, y, z, out)`, with `z` the `n x d` density in row-major order.
pub type DriverFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(x, out)`.
pub type TerminalFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `(t, out)` with `out` the `d x d` diffusion matrix in row-major order.
pub type DiffusionFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// Data of the system
///
/// ```text
/// dX = f(t, Y, Z) dt + sigma(t) dB,   X_0 = x,
/// dY = -h(t, Y, Z) dt + Z dB,         Y_T = phi(X_T).
/// ```
///
/// `sigma` defaults to the identity.
#[derive(Clone)]
pub struct CoefficientSet {
    pub n: usize,
    pub d: usize,
    pub h: DriverFn,
    pub f: DriverFn,
    pub phi: TerminalFn,
    pub sigma: Option<DiffusionFn>,
    pub c1: f64,
    pub c2: f64,
    pub m_bound: f64,
    pub label: String,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("label", &self.label)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("c1", &self.c1)
            .field("c2", &self.c2)
            .field("m_bound", &self.m_bound)
            .field("diffusion", &self.sigma.is_some())
            .finish()
    }
}

impl CoefficientSet {
    pub fn builder(n: usize, d: usize) -> CoefficientSetBuilder {
        CoefficientSetBuilder::new(n, d)
    }

    #[inline]
    pub fn eval_h(&self, t: f64, y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.h)(t, y, z, out)
    }

    #[inline]
    pub fn eval_f(&self, t: f64, y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.f)(t, y, z, out)
    }

    #[inline]
    pub fn eval_phi(&self, x: &[f64], out: &mut [f64]) {
        (self.phi)(x, out)
    }

    /// Diffusion matrix at `t` into `out` (`d * d`).
    pub fn diffusion(&self, t: f64, out: &mut [f64]) {
        match &self.sigma {
            Some(s) => s(t, out),
            None => {
                out.fill(0.0);
                for i in 0..self.d {
                    out[i * self.d + i] = 1.0;
                }
            }
        }
    }

    pub fn has_identity_diffusion(&self) -> bool {
        self.sigma.is_none()
    }
}

pub struct CoefficientSetBuilder {
    n: usize,
    d: usize,
    h: Option<DriverFn>,
    f: Option<DriverFn>,
    phi: Option<TerminalFn>,
    sigma: Option<DiffusionFn>,
    c1: f64,
    c2: f64,
    m_bound: f64,
    horizon: f64,
    check_center: Option<Vec<f64>>,
    check_radius: f64,
    check_samples: usize,
    label: String,
}

impl CoefficientSetBuilder {
    fn new(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            h: None,
            f: None,
            phi: None,
            sigma: None,
            c1: f64::NAN,
            c2: f64::NAN,
            m_bound: f64::NAN,
            horizon: 1.0,
            check_center: None,
            check_radius: 5.0,
            check_samples: 256,
            label: String::from("fbsde"),
        }
    }

    pub fn driver(mut self, h: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.h = Some(Arc::new(h));
        self
    }

    pub fn drift(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.f = Some(Arc::new(f));
        self
    }

    pub fn terminal(mut self, phi: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.phi = Some(Arc::new(phi));
        self
    }

    pub fn diffusion(mut self, sigma: impl Fn(f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.sigma = Some(Arc::new(sigma));
        self
    }

    /// Lipschitz constant of `h` and `f`, Lipschitz constant of `phi`, and the
    /// bound on `|phi|`.
    pub fn constants(mut self, c1: f64, c2: f64, m_bound: f64) -> Self {
        self.c1 = c1;
        self.c2 = c2;
        self.m_bound = m_bound;
        self
    }

    /// Time range `[0, horizon]` used by the spot checks.
    pub fn horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    /// Box of radius `radius` around `center` in which `phi` is spot-checked.
    /// Needed for terminal functions that are Lipschitz only locally.
    pub fn check_region(mut self, center: Vec<f64>, radius: f64) -> Self {
        self.check_center = Some(center);
        self.check_radius = radius;
        self
    }

    pub fn check_samples(mut self, samples: usize) -> Self {
        self.check_samples = samples;
        self
    }

    pub fn label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn build(self) -> Result<CoefficientSet> {
        let (n, d) = (self.n, self.d);
        if n == 0 || d == 0 {
            return Err(invalid("dimensions n and d must be at least 1"));
        }
        for (name, v) in [("c1", self.c1), ("c2", self.c2), ("m_bound", self.m_bound)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.c1 > 0.0) {
            return Err(invalid("c1 must be positive"));
        }
        let h = self.h.ok_or_else(|| invalid("driver h is missing"))?;
        let f = self.f.ok_or_else(|| invalid("drift f is missing"))?;
        let phi = self.phi.ok_or_else(|| invalid("terminal phi is missing"))?;
        let center = self.check_center.unwrap_or_else(|| vec![0.0; d]);
        if center.len() != d {
            return Err(invalid("check region center has the wrong dimension"));
        }
        let set = CoefficientSet { n, d, h, f, phi, sigma: self.sigma, c1: self.c1, c2: self.c2, m_bound: self.m_bound, label: self.label };
        spot_check(&set, self.horizon, &center, self.check_radius, self.check_samples)?;
        Ok(set)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn within(lhs: f64, bound: f64) -> bool {
    lhs <= bound * (1.0 + 1e-9) + 1e-12
}

/// Random pairs, half of them close together so that local slopes are probed.
fn spot_check(c: &CoefficientSet, horizon: f64, center: &[f64], radius: f64, samples: usize) -> Result<()> {
    let (n, d) = (c.n, c.d);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0ef);
    let draw = |len: usize, r: f64, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..len).map(|_| rng.random_range(-r..=r)).collect() };
    let mut a = vec![0.0; n.max(d)];
    let mut b = vec![0.0; n.max(d)];
    for i in 0..samples {
        let near = i % 2 == 1;
        let t = rng.random_range(0.0..=horizon.max(0.0));
        let y = draw(n, radius, &mut rng);
        let z = draw(n * d, radius, &mut rng);
        let (y2, z2) = if near {
            let dy = draw(n, 1e-3, &mut rng);
            let dz = draw(n * d, 1e-3, &mut rng);
            (y.iter().zip(&dy).map(|(u, v)| u + v).collect::<Vec<_>>(), z.iter().zip(&dz).map(|(u, v)| u + v).collect::<Vec<_>>())
        } else {
            (draw(n, radius, &mut rng), draw(n * d, radius, &mut rng))
        };
        let gap = dist(&y, &y2) + dist(&z, &z2);
        for (name, func, width) in [("h", &c.h, n), ("f", &c.f, d)] {
            func(t, &y, &z, &mut a[..width]);
            func(t, &y2, &z2, &mut b[..width]);
            if a[..width].iter().chain(&b[..width]).any(|v| !v.is_finite()) {
                return Err(invalid(format!("{name} returned a non-finite value at t={t}")));
            }
            let lhs = dist(&a[..width], &b[..width]);
            if !within(lhs, c.c1 * gap) {
                return Err(invalid(format!("{name} violates the Lipschitz bound c1={}: |Δ{name}|={lhs:.6e} > c1·{gap:.6e}", c.c1)));
            }
        }
        let x: Vec<f64> = draw(d, radius, &mut rng).iter().zip(center).map(|(u, m)| u + m).collect();
        let x2: Vec<f64> = if near {
            x.iter().map(|v| v + rng.random_range(-1e-3..=1e-3)).collect()
        } else {
            draw(d, radius, &mut rng).iter().zip(center).map(|(u, m)| u + m).collect()
        };
        c.eval_phi(&x, &mut a[..n]);
        c.eval_phi(&x2, &mut b[..n]);
        let (pa, pb) = (norm(&a[..n]), norm(&b[..n]));
        if !(pa.is_finite() && pb.is_finite()) {
            return Err(invalid("phi returned a non-finite value"));
        }
        if !within(pa.max(pb), c.m_bound) {
            return Err(invalid(format!("phi violates the bound M={}: |phi|={:.6e}", c.m_bound, pa.max(pb))));
        }
        let lhs = dist(&a[..n], &b[..n]);
        let gap = dist(&x, &x2);
        if !within(lhs, c.c2 * gap) {
            return Err(invalid(format!("phi violates the Lipschitz bound c2={}: |Δphi|={lhs:.6e} > c2·{gap:.6e}", c.c2)));
        }
    }
    Ok(())
}
