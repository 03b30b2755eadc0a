//! Recombining Rademacher lattice for exact small-scale expectations.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const MAX_DEPTH: usize = 20;

/// Each step moves every coordinate by `±√Δt` with probability 1/2,
/// independently across coordinates. Level `k` has `(k+1)^dim` nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeOracle {
    pub depth: usize,
    pub dt: f64,
    pub root: Vec<f64>,
}

impl TreeOracle {
    pub fn new(depth: usize, dt: f64, root: Vec<f64>) -> Result<Self> {
        if depth > MAX_DEPTH {
            return Err(invalid(format!("tree depth {depth} exceeds {MAX_DEPTH}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("tree step must be positive"));
        }
        if root.is_empty() {
            return Err(invalid("tree needs at least one dimension"));
        }
        if (depth + 1).checked_pow(root.len() as u32).is_none_or(|n| n > 10_000_000) {
            return Err(invalid("tree has too many nodes"));
        }
        Ok(Self { depth, dt, root })
    }

    pub fn dim(&self) -> usize {
        self.root.len()
    }

    pub fn nodes_at(&self, k: usize) -> usize {
        (k + 1).pow(self.dim() as u32)
    }

    /// Probability of each of the `2^dim` branches.
    pub fn branch_probability(&self) -> f64 {
        0.5_f64.powi(self.dim() as i32)
    }

    /// State of node `index` at level `k`; the first coordinate varies slowest.
    pub fn state(&self, k: usize, index: usize) -> Vec<f64> {
        let d = self.dim();
        let mut x = vec![0.0; d];
        let mut rem = index;
        let s = self.dt.sqrt();
        for c in (0..d).rev() {
            let j = rem % (k + 1);
            rem /= k + 1;
            x[c] = self.root[c] + s * (2.0 * j as f64 - k as f64);
        }
        x
    }
}

/// `E[payoff(state_depth) | node]` for every node at level `step_index`, by
/// backward induction.
pub fn oracle_conditional(tree: &TreeOracle, payoff: &dyn Fn(&[f64]) -> f64, step_index: usize) -> Result<Vec<f64>> {
    if tree.depth > MAX_DEPTH {
        return Err(invalid(format!("tree depth {} exceeds {MAX_DEPTH}", tree.depth)));
    }
    if step_index > tree.depth {
        return Err(invalid("step index beyond tree depth"));
    }
    let d = tree.dim();
    let n = tree.depth;
    let mut values: Vec<f64> = (0..tree.nodes_at(n)).map(|i| payoff(&tree.state(n, i))).collect();
    let p = tree.branch_probability();
    for k in (step_index..n).rev() {
        let w_next = k + 2;
        let mut next = vec![0.0; tree.nodes_at(k)];
        for (i, v) in next.iter_mut().enumerate() {
            // digits of i in base k+1
            let mut digits = vec![0usize; d];
            let mut rem = i;
            for c in (0..d).rev() {
                digits[c] = rem % (k + 1);
                rem /= k + 1;
            }
            let mut acc = 0.0;
            for mask in 0..(1usize << d) {
                let mut idx = 0;
                for (c, dg) in digits.iter().enumerate() {
                    idx = idx * w_next + dg + ((mask >> c) & 1);
                }
                acc += values[idx];
            }
            *v = acc * p;
        }
        values = next;
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_payoff() {
        let t = TreeOracle::new(6, 0.1, vec![0.0, 1.0]).unwrap();
        let v = oracle_conditional(&t, &|_| 1.0, 2).unwrap();
        assert_eq!(v.len(), 9);
        assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-14));
    }

    #[test]
    fn identity_is_a_martingale() {
        let t = TreeOracle::new(2, 0.5, vec![0.0]).unwrap();
        for k in 0..=2 {
            let v = oracle_conditional(&t, &|x| x[0], k).unwrap();
            for (i, vi) in v.iter().enumerate() {
                assert!((vi - t.state(k, i)[0]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn half_normal_mean() {
        let t = TreeOracle::new(10, 0.1, vec![0.0]).unwrap();
        let v = oracle_conditional(&t, &|x| x[0].max(0.0), 0).unwrap();
        assert!((v[0] - 0.3989422804014327).abs() < 0.05, "{}", v[0]);
    }

    #[test]
    fn squared_increment_has_variance_dt() {
        let t = TreeOracle::new(4, 0.25, vec![0.3]).unwrap();
        let v = oracle_conditional(&t, &|x| x[0] * x[0], 0).unwrap();
        assert!((v[0] - (0.09 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn depth_overflow_is_rejected() {
        assert!(TreeOracle::new(21, 0.1, vec![0.0]).is_err());
        let t = TreeOracle { depth: 25, dt: 0.1, root: vec![0.0] };
        assert!(oracle_conditional(&t, &|_| 0.0, 0).is_err());
    }
}
