//! Monte Carlo solver for forward-backward SDEs written as a functional
//! differential equation in the pair `(V, X)`.
//!
//! The backward pair `(Y, Z)` is never time-stepped on its own. It is read off
//! from `(V, X)` through conditional expectations,
//!
//! ```text
//! Y_t = E[phi(X_T) + V_T | F_t] - V_t,
//! int_t^T Z dB = phi(X_T) + V_T - E[phi(X_T) + V_T | F_t],
//! ```
//!
//! and `(V, X)` is found by Picard iteration on short windows that are glued
//! together afterwards. On top of the FBSDE solver sit the Girsanov pass that
//! turns the strong FBSDE solution into a weak solution of a quadratic BSDE
//! system, and the exponential-utility portfolio problem built from it.
//!
//! Module map:
//!
//! * [`grid`]: time grids, contraction-compliant partitions, Brownian ensembles.
//! * [`regression`]: least-squares conditional expectations and `Z` extraction.
//! * [`tree`]: exact lattice expectations used as a brute-force oracle.
//! * [`coeffs`]: validated FBSDE coefficient sets.
//! * [`solver`]: Picard windows, global concatenation and residual checks.
//! * [`girsanov`]: measure change, weak-solution assembly and diagnostics.
//! * [`portfolio`]: market model, optimal strategy and martingale optimality.
//! * [`fixtures`]: the shipped test problems.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coeffs;
pub mod error;
pub mod fixtures;
pub mod girsanov;
pub mod grid;
pub mod portfolio;
pub mod process;
pub mod regression;
pub mod solver;
pub mod stats;
pub mod tree;

pub use coeffs::{CoefficientSet, CoefficientSetBuilder};
pub use error::{Error, Result};
pub use girsanov::{MeasureChange, WeakSolution};
pub use grid::{BrownianEnsemble, ContractionBudget, TimeGrid};
pub use portfolio::{MarketModel, PortfolioSolution};
pub use process::EnsembleProcess;
pub use regression::{BasisKind, FittedConditional, RegressionBasis};
pub use solver::{FdeSolution, PicardReport, SolverConfig};
pub use tree::TreeOracle;
