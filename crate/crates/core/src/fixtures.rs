//! Test problems with known answers, shared by the tests, the CLI and the
//! acceptance suite.

use crate::coeffs::CoefficientSet;
use crate::error::Result;
use crate::grid::TimeGrid;
use crate::portfolio::MarketModel;
use crate::regression::BasisKind;
use crate::solver::{InitialState, SolverConfig};

/// Lipschitz constant used when `h` and `f` do not depend on `(y, z)`.
pub const DECOUPLED_C1: f64 = 1.0 / 16.0;

/// An FBSDE with its grid, start law and solver settings.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub coeffs: CoefficientSet,
    pub grid: TimeGrid,
    pub initial: InitialState,
    pub config: SolverConfig,
}

fn grid64() -> TimeGrid {
    TimeGrid::uniform(1.0, 64).expect("valid grid")
}

/// `h = f = 0`, `φ ≡ 1`: `Y ≡ 1`, `Z ≡ 0`.
pub fn trivial() -> Result<Fixture> {
    let coeffs = CoefficientSet::builder(1, 1)
        .driver(|_, _, _, o| o[0] = 0.0)
        .drift(|_, _, _, o| o[0] = 0.0)
        .terminal(|_, o| o[0] = 1.0)
        .constants(DECOUPLED_C1, 0.0, 1.0)
        .label("trivial")
        .build()?;
    Ok(Fixture { name: "trivial", coeffs, grid: grid64(), initial: InitialState::Point(vec![0.0]), config: SolverConfig::default() })
}

/// `h ≡ c`, `f = 0`, `φ ≡ 0`: `Y_t = c (T - t)`, `V_t = c t`.
pub fn constant_driver(c: f64) -> Result<Fixture> {
    let coeffs = CoefficientSet::builder(1, 1)
        .driver(move |_, _, _, o| o[0] = c)
        .drift(|_, _, _, o| o[0] = 0.0)
        .terminal(|_, o| o[0] = 0.0)
        .constants(DECOUPLED_C1, 0.0, 0.0)
        .label("constant-driver")
        .build()?;
    Ok(Fixture {
        name: "constant-driver",
        coeffs,
        grid: grid64(),
        initial: InitialState::Point(vec![0.0]),
        config: SolverConfig::default(),
    })
}

/// `h = f = 0`, `φ = tanh`: `Y(t, x) = E[tanh(x + B_{T-t})]`.
pub fn heat_tanh() -> Result<Fixture> {
    let coeffs = CoefficientSet::builder(1, 1)
        .driver(|_, _, _, o| o[0] = 0.0)
        .drift(|_, _, _, o| o[0] = 0.0)
        .terminal(|x, o| o[0] = x[0].tanh())
        .constants(DECOUPLED_C1, 1.0, 1.0)
        .label("heat-tanh")
        .build()?;
    let config = SolverConfig { basis: BasisKind::Polynomial { degree: 11 }, c4: Some(0.0), ..SolverConfig::default() };
    Ok(Fixture {
        name: "heat-tanh",
        coeffs,
        grid: grid64(),
        initial: InitialState::Dispersed { center: vec![0.0], half_width: 2.5 },
        config,
    })
}

/// `h = a y`, `f = 0`, `φ = sin` with `a = 1/2`: `Y(t, x) = sin x` for every `t`.
pub fn linear_sin() -> Result<Fixture> {
    let a = 0.5;
    let coeffs = CoefficientSet::builder(1, 1)
        .driver(move |_, y, _, o| o[0] = a * y[0])
        .drift(|_, _, _, o| o[0] = 0.0)
        .terminal(|x, o| o[0] = x[0].sin())
        .constants(a, 1.0, 1.0)
        .label("linear-sin")
        .build()?;
    let config = SolverConfig { basis: BasisKind::Polynomial { degree: 7 }, c4: Some(1.0), ..SolverConfig::default() };
    Ok(Fixture {
        name: "linear-sin",
        coeffs,
        grid: grid64(),
        initial: InitialState::Dispersed { center: vec![0.0], half_width: 2.5 },
        config,
    })
}

/// `f ≡ c`, `h = 0`, `φ(x) = clamp(x, ±6)`: `X = x + c t + B`, `Z ≈ 1`.
pub fn constant_drift(c: f64) -> Result<Fixture> {
    let coeffs = CoefficientSet::builder(1, 1)
        .driver(|_, _, _, o| o[0] = 0.0)
        .drift(move |_, _, _, o| o[0] = c)
        .terminal(|x, o| o[0] = x[0].clamp(-6.0, 6.0))
        .constants(DECOUPLED_C1, 1.0, 6.0)
        .label("constant-drift")
        .build()?;
    let config = SolverConfig { c4: Some(1.0), ..SolverConfig::default() };
    Ok(Fixture {
        name: "constant-drift",
        coeffs,
        grid: grid64(),
        initial: InitialState::Dispersed { center: vec![0.0], half_width: 1.0 },
        config,
    })
}

/// Fully coupled: `h = y/4`, `f = 0.3 cos y + 0.2 z`, `φ = tanh`.
///
/// Piecewise-linear basis: the drift spreads `X` over roughly `[-4.5, 6]`, and
/// a global polynomial fit of `Y` blows up on the few paths out there, which
/// then feeds `θ = f(Y, Z)`.
pub fn coupled() -> Result<Fixture> {
    let coeffs = CoefficientSet::builder(1, 1)
        .driver(|_, y, _, o| o[0] = 0.25 * y[0])
        .drift(|_, y, z, o| o[0] = 0.3 * y[0].cos() + 0.2 * z[0])
        .terminal(|x, o| o[0] = x[0].tanh())
        .constants(0.3, 1.0, 1.0)
        .label("coupled")
        .build()?;
    let config = SolverConfig { basis: BasisKind::PiecewiseLinear { bins: 12 }, c4: Some(1.0), ..SolverConfig::default() };
    Ok(Fixture { name: "coupled", coeffs, grid: grid64(), initial: InitialState::Dispersed { center: vec![0.0], half_width: 1.0 }, config })
}

/// The FBSDE fixtures run by the verification suite.
pub fn fbsde_fixtures() -> Result<Vec<Fixture>> {
    Ok(vec![trivial()?, constant_driver(0.5)?, heat_tanh()?, linear_sin()?, constant_drift(0.5)?, coupled()?])
}

/// `μ^S = 0.1`, `σ̄^S = 0.2`, `γ = 1`, `T = 1`, no endowment, no `V` noise.
pub fn merton_market() -> MarketModel {
    MarketModel::constant(0.1, 0.2, 0.0, 0.0, 0.0, 1.0, 1.0)
}

/// Merton market with a correlated nontradeable asset and the bounded
/// endowment `g(v, s) = tanh(v - s) / 2`.
pub fn portfolio_market() -> MarketModel {
    MarketModel::constant(0.1, 0.2, 0.05, 0.25, 0.15, 1.0, 1.0).with_endowment(
        |v, s| 0.5 * (v - s).tanh(),
        0.5,
        0.5 * std::f64::consts::SQRT_2,
    )
}

/// Solver settings for the portfolio fixture.
pub fn portfolio_config() -> SolverConfig {
    SolverConfig { c4: Some(1.0), ..SolverConfig::default() }
}

pub fn portfolio_grid() -> TimeGrid {
    TimeGrid::uniform(1.0, 50).expect("valid grid")
}

/// Coarse grid for the martingale-optimality check: ten per-step drift tests
/// per strategy.
pub fn optimality_grid() -> TimeGrid {
    TimeGrid::uniform(1.0, 10).expect("valid grid")
}

/// No investment opportunity: `μ^S = 0`, no endowment.
pub fn flat_market() -> MarketModel {
    MarketModel::constant(0.0, 0.2, 0.0, 0.0, 0.0, 1.0, 1.0)
}
