//! Pipelines for the single-problem runs.

use std::time::Instant;

use fbsde::fixtures::{self, Fixture};
use fbsde::girsanov::{assemble_weak_solution, build_measure_change, check_z_invariance, MeasureChange, ZWeighting};
use fbsde::grid::{build_contraction_partition, derive_seed, sample_ensemble};
use fbsde::portfolio::{solve_portfolio, verify_martingale_optimality, MarketModel, OptimalityReport, PortfolioSolution};
use fbsde::solver::{empirical_pathwise_uniqueness, solve_global, FdeSolution, SolverConfig};
use fbsde::{BrownianEnsemble, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{Endowment, ExperimentConfig, FixtureSpec, MarketSpec, Problem, Steps};
use crate::output::OutputDir;
use crate::report::RunReport;
use crate::RunError;

pub(crate) struct Seeds {
    pub master: u64,
    pub ensemble: u64,
    pub evaluation: u64,
    pub perturbations: u64,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            ensemble: derive_seed(master, "ensemble"),
            evaluation: derive_seed(master, "evaluation-ensemble"),
            perturbations: derive_seed(master, "perturbations"),
        }
    }

    pub fn json(&self) -> serde_json::Value {
        json!({
            "master": self.master,
            "ensemble": self.ensemble,
            "evaluation-ensemble": self.evaluation,
            "perturbations": self.perturbations,
        })
    }
}

/// Named fixture with the config's grid and solver overrides applied.
pub(crate) fn fixture(spec: &FixtureSpec, cfg: &ExperimentConfig) -> Result<Fixture, RunError> {
    let mut fx = match spec.name.as_str() {
        "trivial" => fixtures::trivial(),
        "constant-driver" => fixtures::constant_driver(spec.c.unwrap_or(0.5)),
        "heat-tanh" => fixtures::heat_tanh(),
        "linear-sin" => fixtures::linear_sin(),
        "constant-drift" => fixtures::constant_drift(spec.c.unwrap_or(0.5)),
        "coupled" => fixtures::coupled(),
        other => return Err(RunError::Config(crate::config::ConfigError { line: None, message: format!("unknown fixture `{other}`") })),
    }?;
    fx.config = solver_config(fx.config, cfg);
    let horizon = cfg.grid.horizon.unwrap_or(fx.grid.horizon());
    fx.grid = grid_for(horizon, cfg.grid.steps, fx.grid.steps(), || budget(&fx.config, &fx.coeffs, cfg))?;
    Ok(fx)
}

pub(crate) fn solver_config(mut base: SolverConfig, cfg: &ExperimentConfig) -> SolverConfig {
    let s = &cfg.solver;
    if let Some(b) = s.basis {
        base.basis = b;
    }
    if let Some(t) = s.tol {
        base.tol = t;
    }
    if let Some(m) = s.max_iter {
        base.max_iter = m;
    }
    if s.c4.is_some() {
        base.c4 = s.c4;
    }
    if s.clip.is_some() {
        base.clip = s.clip;
    }
    base.force |= s.force;
    base
}

fn budget(s: &SolverConfig, coeffs: &fbsde::CoefficientSet, cfg: &ExperimentConfig) -> fbsde::Result<fbsde::ContractionBudget> {
    let b = s.budget(coeffs)?;
    match cfg.grid.c1 {
        Some(c1) => fbsde::ContractionBudget::new(c1, s.c4.unwrap_or(coeffs.c2)),
        None => Ok(b),
    }
}

fn grid_for(
    horizon: f64,
    steps: Option<Steps>,
    default_steps: usize,
    budget: impl FnOnce() -> fbsde::Result<fbsde::ContractionBudget>,
) -> Result<TimeGrid, RunError> {
    Ok(match steps {
        None => TimeGrid::uniform(horizon, default_steps)?,
        Some(Steps::Fixed { steps }) => TimeGrid::uniform(horizon, steps)?,
        Some(Steps::Auto) => build_contraction_partition(horizon, budget()?)?,
    })
}

pub(crate) fn market_model(m: &MarketSpec) -> MarketModel {
    let base =
        MarketModel::constant(m.mu_s, m.sigma_bar_s, m.mu_v, m.sigma_v, m.sigma_bar_v, m.gamma, m.horizon).with_initial(m.x0, m.v0, m.s0);
    match m.endowment {
        Endowment::None => base,
        Endowment::Constant { value } => base.with_endowment(move |_, _| value, value.abs(), 0.0),
        Endowment::TanhSpread { scale } => {
            base.with_endowment(move |v, s| scale * (v - s).tanh(), scale.abs(), scale.abs() * std::f64::consts::SQRT_2)
        }
    }
}

/// Solves one fixture and records the contraction and residual checks.
pub(crate) fn solve_checked(
    fx: &Fixture,
    ens: &BrownianEnsemble,
    cfg: &SolverConfig,
    initial_guess_label: &str,
    tol: &crate::config::Tolerances,
    report: &mut RunReport,
) -> Result<FdeSolution, fbsde::Error> {
    let t0 = Instant::now();
    let sol = solve_global(&fx.coeffs, &fx.grid, &fx.initial, ens, cfg)?;
    let secs = t0.elapsed().as_secs_f64();
    report.time(format!("solve {} ({initial_guess_label})", fx.name), secs);
    record_contraction(&sol, fx.name, tol, report);
    report.runtime(&format!("solve {}", fx.name), secs, 60.0);
    Ok(sol)
}

pub(crate) fn record_contraction(sol: &FdeSolution, subject: &str, tol: &crate::config::Tolerances, report: &mut RunReport) {
    let max_factor = sol.iteration_log.iter().map(|r| r.empirical_factor).fold(0.0, f64::max);
    let max_iter = sol.iteration_log.iter().map(|r| r.iterations).max().unwrap_or(0);
    let converged = sol.iteration_log.iter().all(|r| r.converged);
    report.at_most("contraction", subject, "max empirical Picard factor", max_factor, tol.picard_factor);
    report.push(
        "contraction",
        subject,
        "max iterations to tolerance",
        max_iter as f64,
        tol.max_iterations as f64,
        converged && max_iter <= tol.max_iterations,
        format!("{} windows", sol.windows.len()),
    );
    if let Some(r) = sol.residuals {
        report.at_most("equivalence", subject, "backward residual rms", r.backward_dynamics_rms, tol.backward_residual);
        report.push(
            "equivalence",
            subject,
            "forward residual max",
            r.forward_dynamics_max,
            0.0,
            r.forward_dynamics_max == 0.0,
            String::new(),
        );
    }
}

pub(crate) fn picard_rows(name: &str, sol: &FdeSolution, out: &mut String) {
    for r in &sol.iteration_log {
        out.push_str(&format!(
            "{name},{},{:?},{:?},{},{:?},{}\n",
            r.window,
            r.t_start,
            r.t_end,
            r.iterations,
            r.empirical_factor,
            r.distances.iter().map(|d| format!("{d:?}")).collect::<Vec<_>>().join(";")
        ));
    }
}

pub(crate) const PICARD_HEADER: &str = "fixture,window,t_start,t_end,iterations,factor,distances\n";

pub(crate) fn record_weights(mc: &MeasureChange, subject: &str, sigmas: f64, report: &mut RunReport) {
    let s = mc.summary();
    let z = (s.mean - 1.0) / s.std_err.max(f64::MIN_POSITIVE);
    report.push(
        "girsanov",
        subject,
        "terminal weight mean z-score",
        z.abs(),
        sigmas,
        z.abs() <= sigmas || (s.mean == 1.0 && s.std_err == 0.0),
        format!("mean {:.6} se {:.2e} ess {:.0}", s.mean, s.std_err, s.effective_sample_size),
    );
    report.push("girsanov", subject, "all weights positive", s.min, 0.0, s.min > 0.0, String::new());
    report.at_most("girsanov", subject, "tail mass above 99.9th percentile", s.tail_mass_fraction, 0.01);
}

/// Perturbation offsets from the config plus any drawn from the named stream.
pub(crate) fn perturbations(cfg: &ExperimentConfig, seeds: &Seeds) -> Vec<f64> {
    let mut out = cfg.optimality.perturbations.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.perturbations);
    for _ in 0..cfg.optimality.random_perturbations {
        let size: f64 = rng.random_range(0.25..1.5);
        out.push(if rng.random::<bool>() { size } else { -size });
    }
    out
}

pub(crate) fn record_optimality(rep: &OptimalityReport, subject: &str, report: &mut RunReport, asserted: bool) {
    if !asserted {
        return;
    }
    let opt = rep.optimal();
    let worst = opt.max_z.abs().max(opt.min_z.abs());
    report.push("optimality", subject, "pi* step drift |z| max", worst, 3.0, opt.is_martingale(), String::new());
    for s in &rep.strategies[1..] {
        report.push(
            "optimality",
            subject,
            &format!("delta {:+} step drift z max", s.delta),
            s.max_z,
            -3.0,
            s.strictly_decreasing() && s.is_supermartingale(),
            String::new(),
        );
        let gz = s.gap_to_optimal.mean / s.gap_to_optimal.std_err.max(f64::MIN_POSITIVE);
        report.push(
            "optimality",
            subject,
            &format!("delta {:+} value gap z", s.delta),
            gz,
            3.0,
            s.dominated(),
            format!("gap {:.3e}", s.gap_to_optimal.mean),
        );
    }
    report.at_most("optimality", subject, "asset mean under P |z|", rep.asset_z().abs(), 3.0);
}

pub(crate) fn drift_rows(subject: &str, grid: &TimeGrid, rep: &OptimalityReport, out: &mut String) {
    for s in &rep.strategies {
        for (k, e) in s.drifts.iter().enumerate() {
            out.push_str(&format!("{subject},{:?},{k},{:?},{:?},{:?}\n", s.delta, grid.time(k), e.mean, e.std_err));
        }
    }
}

pub(crate) const DRIFT_HEADER: &str = "subject,delta,step,t,drift,std_err\n";

pub(crate) fn optimality_json(rep: &OptimalityReport) -> serde_json::Value {
    json!({
        "strategies": rep.strategies.iter().map(|s| json!({
            "delta": s.delta,
            "drifts": s.drifts.iter().map(|e| json!({"mean": e.mean, "std_err": e.std_err})).collect::<Vec<_>>(),
            "value": {"mean": s.value.mean, "std_err": s.value.std_err},
            "gap_to_optimal": {"mean": s.gap_to_optimal.mean, "std_err": s.gap_to_optimal.std_err},
            "martingale": s.is_martingale(),
            "supermartingale": s.is_supermartingale(),
            "dominated": s.dominated(),
        })).collect::<Vec<_>>(),
        "asset_mean": {"mean": rep.asset_mean.mean, "std_err": rep.asset_mean.std_err},
        "asset_expected": rep.asset_expected,
        "evaluation_seed": rep.evaluation_seed,
        "num_paths": rep.num_paths,
    })
}

pub fn run_fbsde(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<RunReport, RunError> {
    let seeds = Seeds::new(cfg.seed);
    let mut report = RunReport::new(cfg.problem.name(), serde_json::to_value(cfg).unwrap_or_default(), seeds.json());
    let spec = cfg.fixture.as_ref().expect("fixture problems carry a fixture");
    let fx = fixture(spec, cfg)?;
    let ens = sample_ensemble(&fx.grid, cfg.paths, fx.coeffs.d, seeds.ensemble)?;
    let sol = solve_checked(&fx, &ens, &fx.config, "configured guess", &cfg.tolerances, &mut report).map_err(RunError::Solver)?;
    if cfg.solver.uniqueness {
        let t0 = Instant::now();
        let u = empirical_pathwise_uniqueness(&fx.coeffs, &fx.grid, &fx.initial, &ens, &fx.config)?;
        report.time("uniqueness", t0.elapsed().as_secs_f64());
        report.at_most("uniqueness", fx.name, "antipodal-guess pathwise gap", u.gap, cfg.tolerances.uniqueness_factor * u.tol);
    }
    report.summarize("windows", json!(sol.windows));
    report.summarize("residuals", json!(sol.residuals));
    report.summarize("y0_mean", json!(fbsde::stats::mean(sol.y.at(0))));

    let mut picard = String::from(PICARD_HEADER);
    picard_rows(fx.name, &sol, &mut picard);
    out.write("picard.csv", picard.as_bytes())?;
    out.write_with("solution.csv", |w| sol.write_csv(w, cfg.output.csv_paths))?;
    out.write_json("solution.json", &sol.sidecar(report.config.clone()))?;

    if cfg.problem == Problem::QbsdeWeak {
        weak_stage(&fx, &sol, &ens, cfg, &mut report, out)?;
    }
    Ok(report)
}

fn weak_stage(
    fx: &Fixture,
    sol: &FdeSolution,
    ens: &BrownianEnsemble,
    cfg: &ExperimentConfig,
    report: &mut RunReport,
    out: &mut OutputDir,
) -> Result<(), RunError> {
    let t0 = Instant::now();
    let mc = build_measure_change(sol, &fx.coeffs, ens)?;
    let weak = assemble_weak_solution(sol, &mc, &fx.coeffs)?;
    record_weights(&mc, fx.name, cfg.tolerances.weight_sigmas, report);
    report.at_most("weak-residual", fx.name, "weighted rms residual", weak.residual.weighted_rms, cfg.tolerances.weak_residual);
    let basis = fx.config.regression_basis(&fx.coeffs);
    let zinv = check_z_invariance(sol, &mc, &fx.coeffs, &basis, ZWeighting::OneStep)?;
    report.at_most("z-invariance", fx.name, "max surface discrepancy", zinv.max_discrepancy, cfg.tolerances.z_invariance);
    report.time("weak solution", t0.elapsed().as_secs_f64());
    out.write_with("weak_solution.csv", |w| weak.write_csv(&fx.grid, w, cfg.output.csv_paths))?;
    out.write_json(
        "weak_solution.json",
        &json!({
            "weights": mc.summary(),
            "residual": weak.residual,
            "z_invariance": zinv,
            "config": report.config,
        }),
    )?;
    Ok(())
}

/// Constant-coefficient market with a constant (or no) endowment: the
/// closed-form answer is known.
fn merton_reference(m: &MarketSpec) -> Option<f64> {
    let k = match m.endowment {
        Endowment::None => 0.0,
        Endowment::Constant { value } => value,
        Endowment::TanhSpread { .. } => return None,
    };
    let lambda = m.mu_s / m.sigma_bar_s;
    Some(k + lambda * lambda * m.horizon / (2.0 * m.gamma))
}

pub fn run_portfolio(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<RunReport, RunError> {
    let seeds = Seeds::new(cfg.seed);
    let mut report = RunReport::new(cfg.problem.name(), serde_json::to_value(cfg).unwrap_or_default(), seeds.json());
    let spec = cfg.market.as_ref().expect("portfolio runs carry a market");
    let model = market_model(spec);
    model.validate()?;
    let scfg = solver_config(fixtures::portfolio_config(), cfg);
    let horizon = cfg.grid.horizon.unwrap_or(spec.horizon);
    let grid = grid_for(horizon, cfg.grid.steps, 50, || {
        let f = fbsde::portfolio::build_portfolio_fbsde(&model)?;
        budget(&scfg, &f.coeffs, cfg)
    })?;
    let ens = sample_ensemble(&grid, cfg.paths, 2, seeds.ensemble)?;
    let t0 = Instant::now();
    let psol = solve_portfolio(&model, &grid, &ens, &scfg).map_err(RunError::Solver)?;
    report.time("solve", t0.elapsed().as_secs_f64());
    check_portfolio(&psol, spec, cfg, "portfolio", &mut report);

    let mut drift_csv = String::from(DRIFT_HEADER);
    let mut optimality = serde_json::Value::Null;
    if cfg.optimality.enabled {
        let t0 = Instant::now();
        let opt_grid = match cfg.optimality.steps {
            Some(s) if s != grid.steps() => Some(TimeGrid::uniform(horizon, s)?),
            _ => None,
        };
        let owned;
        let (osol, ogrid) = match &opt_grid {
            Some(g) => {
                let e = sample_ensemble(g, cfg.paths, 2, seeds.ensemble)?;
                owned = solve_portfolio(&model, g, &e, &scfg).map_err(RunError::Solver)?;
                (&owned, g)
            }
            None => (&psol, &grid),
        };
        let fresh = sample_ensemble(ogrid, cfg.evaluation_paths(), 2, seeds.evaluation)?;
        let rep = verify_martingale_optimality(osol, &model, &perturbations(cfg, &seeds), &fresh)?;
        record_optimality(&rep, "portfolio", &mut report, true);
        drift_rows("portfolio", ogrid, &rep, &mut drift_csv);
        optimality = optimality_json(&rep);
        report.time("optimality", t0.elapsed().as_secs_f64());
    }

    let pis = psol.pi_star_summary();
    let results = json!({
        "y0": psol.y0,
        "y0_stderr": psol.y0_stderr,
        "value": psol.value,
        "pi_star_summary": pis,
        "drift_table": optimality,
        "weights": psol.measure.summary(),
        "weak_residual": psol.weak_sol.residual,
        "config": report.config,
        "seeds": report.seeds,
    });
    report.summarize("y0", json!(psol.y0));
    report.summarize("value", json!(psol.value));
    out.write_json("results.json", &results)?;
    out.write("drift_table.csv", drift_csv.as_bytes())?;
    if cfg.output.csv_paths > 0 {
        let mut pi = String::from("path,step,t,pi\n");
        for p in 0..cfg.paths.min(cfg.output.csv_paths) {
            for k in 0..grid.steps() {
                pi.push_str(&format!("{p},{k},{:?},{:?}\n", grid.time(k), psol.pi_star.get(k, p)[0]));
            }
        }
        out.write("pi_star.csv", pi.as_bytes())?;
        out.write_with("weak_solution.csv", |w| psol.weak_sol.write_csv(&grid, w, cfg.output.csv_paths))?;
    }
    Ok(report)
}

/// Checks shared by the portfolio run and the suite.
pub(crate) fn check_portfolio(psol: &PortfolioSolution, spec: &MarketSpec, cfg: &ExperimentConfig, subject: &str, report: &mut RunReport) {
    let tol = &cfg.tolerances;
    report.push(
        "portfolio",
        subject,
        "y0 standard error",
        psol.y0_stderr,
        tol.y0 / 3.0,
        psol.y0_stderr < tol.y0 / 3.0,
        format!("y0 {:.6}", psol.y0),
    );
    report.push("portfolio", subject, "value negative", psol.value, 0.0, psol.value < 0.0, String::new());
    report.at_most("weak-residual", subject, "weighted rms residual", psol.weak_sol.residual.weighted_rms, tol.weak_residual);
    record_weights(&psol.measure, subject, tol.weight_sigmas, report);
    if let Some(y_ref) = merton_reference(spec) {
        let v_ref = -(-spec.gamma * (spec.x0 + y_ref)).exp();
        let pi_ref = spec.mu_s / (spec.gamma * spec.sigma_bar_s * spec.sigma_bar_s);
        let pi_err = psol.pi_star.as_slice().iter().map(|p| (p - pi_ref).abs()).fold(0.0, f64::max);
        report.push(
            "merton",
            subject,
            "|y0 - closed form|",
            (psol.y0 - y_ref).abs(),
            tol.y0,
            (psol.y0 - y_ref).abs() <= tol.y0,
            format!("closed form {y_ref:.6}"),
        );
        report.push(
            "merton",
            subject,
            "|value - closed form|",
            (psol.value - v_ref).abs(),
            tol.y0,
            (psol.value - v_ref).abs() <= tol.y0,
            format!("closed form {v_ref:.6}"),
        );
        report.at_most("merton", subject, "max_k |pi*_k - closed form|", pi_err, tol.pi_star);
    }
}

pub(crate) fn check_problem(cfg: &ExperimentConfig) -> Result<(), RunError> {
    if cfg.problem == Problem::Portfolio {
        market_model(cfg.market.as_ref().expect("portfolio runs carry a market")).validate()?;
    }
    Ok(())
}
