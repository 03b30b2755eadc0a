//! Flat `key = value` experiment configs with `[section]` headers.
//!
//! ```text
//! # comment
//! problem = portfolio
//! seed = 42
//!
//! [market]
//! gamma = 1.0
//! ```
//!
//! Keys before the first header belong to the unnamed top section. Every key
//! must be consumed by the problem it configures; leftovers are reported with
//! their line so typos do not pass silently.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use fbsde::regression::MAX_DEGREE;
use fbsde::BasisKind;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line: Some(line), message: message.into() }
    }

    fn global(message: impl Into<String>) -> Self {
        Self { line: None, message: message.into() }
    }
}

type Key = (String, String);

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed but untyped config: values keyed by `(section, key)`.
#[derive(Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<Key, Entry>,
    used: RefCell<BTreeSet<Key>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::at(line, "section header is missing its closing `]`"))?.trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                    return Err(ConfigError::at(line, format!("bad section name `{name}`")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) =
                content.split_once('=').ok_or_else(|| ConfigError::at(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::at(line, "empty key"));
            }
            if value.is_empty() {
                return Err(ConfigError::at(line, format!("`{key}` has no value")));
            }
            let k = (section.clone(), key.to_string());
            if let Some(prev) = entries.get(&k) {
                let Entry { line: first, .. } = prev;
                return Err(ConfigError::at(line, format!("`{}` is already set on line {first}", display_key(&k))));
            }
            entries.insert(k, Entry { value: value.to_string(), line });
        }
        Ok(Self { entries, used: RefCell::default() })
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        let k = (section.to_string(), key.to_string());
        let e = self.entries.get(&k);
        if e.is_some() {
            self.used.borrow_mut().insert(k);
        }
        e
    }

    pub fn has(&self, section: &str, key: &str) -> bool {
        self.entries.contains_key(&(section.to_string(), key.to_string()))
    }

    pub fn str(&self, section: &str, key: &str) -> Option<&str> {
        self.entry(section, key).map(|e| e.value.as_str())
    }

    pub fn require_str(&self, section: &str, key: &str) -> Result<&str, ConfigError> {
        self.str(section, key).ok_or_else(|| missing(section, key))
    }

    fn parsed<T: std::str::FromStr>(&self, section: &str, key: &str, what: &str) -> Result<Option<(T, usize)>, ConfigError> {
        match self.entry(section, key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(|v| Some((v, e.line))).map_err(|_| {
                ConfigError::at(e.line, format!("`{}` must be {what}, got `{}`", display_key(&(section.into(), key.into())), e.value))
            }),
        }
    }

    pub fn f64(&self, section: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.parsed::<f64>(section, key, "a number")? {
            Some((v, line)) if !v.is_finite() => Err(ConfigError::at(line, format!("`{key}` must be finite"))),
            other => Ok(other.map(|(v, _)| v)),
        }
    }

    pub fn require_f64(&self, section: &str, key: &str) -> Result<f64, ConfigError> {
        self.f64(section, key)?.ok_or_else(|| missing(section, key))
    }

    pub fn usize(&self, section: &str, key: &str) -> Result<Option<usize>, ConfigError> {
        Ok(self.parsed::<usize>(section, key, "a non-negative integer")?.map(|(v, _)| v))
    }

    pub fn u64(&self, section: &str, key: &str) -> Result<Option<u64>, ConfigError> {
        Ok(self.parsed::<u64>(section, key, "a non-negative integer")?.map(|(v, _)| v))
    }

    pub fn bool(&self, section: &str, key: &str) -> Result<Option<bool>, ConfigError> {
        Ok(self.parsed::<bool>(section, key, "`true` or `false`")?.map(|(v, _)| v))
    }

    pub fn f64_list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(e) = self.entry(section, key) else { return Ok(None) };
        e.value
            .split(',')
            .map(|s| {
                let s = s.trim();
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| ConfigError::at(e.line, format!("`{key}` must be a comma-separated list of numbers, bad item `{s}`")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    pub fn line_of(&self, section: &str, key: &str) -> Option<usize> {
        self.entries.get(&(section.to_string(), key.to_string())).map(|e| e.line)
    }

    /// Errors on the first key no getter asked for.
    pub fn check_all_used(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        match self.entries.iter().filter(|(k, _)| !used.contains(*k)).min_by_key(|(_, e)| e.line) {
            Some((k, e)) => Err(ConfigError::at(e.line, format!("unknown key `{}` for this problem", display_key(k)))),
            None => Ok(()),
        }
    }
}

fn display_key((section, key): &Key) -> String {
    if section.is_empty() {
        key.clone()
    } else {
        format!("{section}.{key}")
    }
}

fn missing(section: &str, key: &str) -> ConfigError {
    ConfigError::global(format!("missing required field `{}`", display_key(&(section.into(), key.into()))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    Fbsde,
    QbsdeWeak,
    Portfolio,
    VerifySuite,
}

impl Problem {
    pub fn name(self) -> &'static str {
        match self {
            Problem::Fbsde => "fbsde",
            Problem::QbsdeWeak => "qbsde-weak",
            Problem::Portfolio => "portfolio",
            Problem::VerifySuite => "verify-suite",
        }
    }

    fn parse(s: &str, line: usize) -> Result<Self, ConfigError> {
        match s {
            "fbsde" => Ok(Problem::Fbsde),
            "qbsde-weak" => Ok(Problem::QbsdeWeak),
            "portfolio" => Ok(Problem::Portfolio),
            "verify-suite" => Ok(Problem::VerifySuite),
            other => Err(ConfigError::at(line, format!("unknown problem `{other}` (fbsde, qbsde-weak, portfolio, verify-suite)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Steps {
    Fixed {
        steps: usize,
    },
    /// Coarsest uniform grid admitted by the contraction budget.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    pub horizon: Option<f64>,
    pub steps: Option<Steps>,
    /// Overrides the fixture's `C1` in the `auto` partition.
    pub c1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverSpec {
    pub basis: Option<BasisKind>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub c4: Option<f64>,
    pub force: bool,
    pub clip: Option<f64>,
    pub uniqueness: bool,
}

/// Named FBSDE fixture plus its parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureSpec {
    pub name: String,
    pub c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Endowment {
    None,
    Constant {
        value: f64,
    },
    /// `scale * tanh(v - s)`.
    TanhSpread {
        scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketSpec {
    pub mu_s: f64,
    pub sigma_bar_s: f64,
    pub mu_v: f64,
    pub sigma_v: f64,
    pub sigma_bar_v: f64,
    pub gamma: f64,
    pub horizon: f64,
    pub x0: f64,
    pub v0: f64,
    pub s0: f64,
    pub endowment: Endowment,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalitySpec {
    pub enabled: bool,
    pub perturbations: Vec<f64>,
    /// Extra offsets drawn from the `perturbations` sub-stream.
    pub random_perturbations: usize,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tolerances {
    pub picard_factor: f64,
    pub max_iterations: usize,
    pub backward_residual: f64,
    pub weak_residual: f64,
    pub z_invariance: f64,
    pub weight_sigmas: f64,
    pub oracle: f64,
    pub y0: f64,
    pub pi_star: f64,
    pub uniqueness_factor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            picard_factor: 0.6,
            max_iterations: 10,
            backward_residual: 1e-2,
            weak_residual: 1e-2,
            z_invariance: 0.05,
            weight_sigmas: 5.0,
            oracle: 0.02,
            y0: 0.01,
            pi_star: 0.05,
            uniqueness_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputSpec {
    /// Not echoed into reports, so identical runs in different directories
    /// produce identical bytes.
    #[serde(skip)]
    pub dir: PathBuf,
    /// Paths written to per-path CSVs.
    pub csv_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub seed: u64,
    pub paths: usize,
    pub eval_paths: Option<usize>,
    pub fixture: Option<FixtureSpec>,
    pub market: Option<MarketSpec>,
    pub grid: GridSpec,
    pub solver: SolverSpec,
    pub optimality: OptimalitySpec,
    pub tolerances: Tolerances,
    pub output: OutputSpec,
}

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_PATHS: usize = 100_000;

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw = RawConfig::parse(text)?;
        let cfg = Self::from_raw(&raw)?;
        raw.check_all_used()?;
        Ok(cfg)
    }

    /// The built-in verification suite at default size.
    pub fn default_suite() -> Self {
        Self::parse("problem = verify-suite\n").expect("built-in suite config parses")
    }

    /// Paths of the out-of-sample ensemble.
    pub fn evaluation_paths(&self) -> usize {
        self.eval_paths.unwrap_or(self.paths)
    }

    fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let problem_str = raw.require_str("", "problem")?;
        let problem = Problem::parse(problem_str, raw.line_of("", "problem").unwrap_or(0))?;
        let seed = raw.u64("", "seed")?.unwrap_or(DEFAULT_SEED);
        let paths = raw.usize("", "paths")?.unwrap_or(DEFAULT_PATHS);
        if paths < 2 {
            return Err(ConfigError::at(raw.line_of("", "paths").unwrap_or(0), "`paths` must be at least 2"));
        }
        let eval_paths = raw.usize("", "eval_paths")?;

        let fixture = match problem {
            Problem::Fbsde | Problem::QbsdeWeak => {
                let name = raw.require_str("model", "fixture")?.to_string();
                const KNOWN: [&str; 6] = ["trivial", "constant-driver", "heat-tanh", "linear-sin", "constant-drift", "coupled"];
                if !KNOWN.contains(&name.as_str()) {
                    return Err(ConfigError::at(
                        raw.line_of("model", "fixture").unwrap_or(0),
                        format!("unknown fixture `{name}` ({})", KNOWN.join(", ")),
                    ));
                }
                Some(FixtureSpec { name, c: raw.f64("model", "c")? })
            }
            _ => None,
        };

        let market = match problem {
            Problem::Portfolio => Some(market_spec(raw)?),
            _ => None,
        };

        let steps = match raw.str("grid", "steps") {
            None => None,
            Some("auto") => Some(Steps::Auto),
            Some(s) => match s.parse::<usize>() {
                Ok(n) if n > 0 => Some(Steps::Fixed { steps: n }),
                _ => {
                    return Err(ConfigError::at(
                        raw.line_of("grid", "steps").unwrap_or(0),
                        format!("`grid.steps` must be a positive integer or `auto`, got `{s}`"),
                    ))
                }
            },
        };
        let grid = GridSpec { horizon: raw.f64("grid", "horizon")?, steps, c1: raw.f64("grid", "c1")? };

        let basis = match raw.str("solver", "basis") {
            None => None,
            Some(s) => Some(parse_basis(s).map_err(|m| ConfigError::at(raw.line_of("solver", "basis").unwrap_or(0), m))?),
        };
        let solver = SolverSpec {
            basis,
            tol: raw.f64("solver", "tol")?,
            max_iter: raw.usize("solver", "max_iter")?,
            c4: raw.f64("solver", "c4")?,
            force: raw.bool("solver", "force")?.unwrap_or(false),
            clip: raw.f64("solver", "clip")?,
            uniqueness: raw.bool("solver", "uniqueness")?.unwrap_or(false),
        };
        if let Some(t) = solver.tol {
            if t <= 0.0 {
                return Err(ConfigError::at(raw.line_of("solver", "tol").unwrap_or(0), "`solver.tol` must be positive"));
            }
        }

        let optimality = OptimalitySpec {
            enabled: raw.bool("optimality", "enabled")?.unwrap_or(problem == Problem::Portfolio),
            perturbations: raw.f64_list("optimality", "perturbations")?.unwrap_or_else(|| vec![0.5, -0.5, 1.0, -1.0]),
            random_perturbations: raw.usize("optimality", "random_perturbations")?.unwrap_or(0),
            steps: raw.usize("optimality", "steps")?,
        };

        let d = Tolerances::default();
        let tolerances = Tolerances {
            picard_factor: raw.f64("tolerances", "picard_factor")?.unwrap_or(d.picard_factor),
            max_iterations: raw.usize("tolerances", "max_iterations")?.unwrap_or(d.max_iterations),
            backward_residual: raw.f64("tolerances", "backward_residual")?.unwrap_or(d.backward_residual),
            weak_residual: raw.f64("tolerances", "weak_residual")?.unwrap_or(d.weak_residual),
            z_invariance: raw.f64("tolerances", "z_invariance")?.unwrap_or(d.z_invariance),
            weight_sigmas: raw.f64("tolerances", "weight_sigmas")?.unwrap_or(d.weight_sigmas),
            oracle: raw.f64("tolerances", "oracle")?.unwrap_or(d.oracle),
            y0: raw.f64("tolerances", "y0")?.unwrap_or(d.y0),
            pi_star: raw.f64("tolerances", "pi_star")?.unwrap_or(d.pi_star),
            uniqueness_factor: raw.f64("tolerances", "uniqueness_factor")?.unwrap_or(d.uniqueness_factor),
        };

        let output = OutputSpec {
            dir: PathBuf::from(raw.str("output", "dir").unwrap_or("out")),
            csv_paths: raw.usize("output", "csv_paths")?.unwrap_or(100),
        };

        Ok(Self { problem, seed, paths, eval_paths, fixture, market, grid, solver, optimality, tolerances, output })
    }
}

fn market_spec(raw: &RawConfig) -> Result<MarketSpec, ConfigError> {
    let s = "market";
    let endowment = match raw.str(s, "endowment").unwrap_or("none") {
        "none" => Endowment::None,
        "constant" => Endowment::Constant { value: raw.require_f64(s, "endowment_value")? },
        "tanh-spread" => Endowment::TanhSpread { scale: raw.require_f64(s, "endowment_scale")? },
        other => {
            return Err(ConfigError::at(
                raw.line_of(s, "endowment").unwrap_or(0),
                format!("unknown endowment `{other}` (none, constant, tanh-spread)"),
            ))
        }
    };
    Ok(MarketSpec {
        mu_s: raw.require_f64(s, "mu_s")?,
        sigma_bar_s: raw.require_f64(s, "sigma_bar_s")?,
        mu_v: raw.f64(s, "mu_v")?.unwrap_or(0.0),
        sigma_v: raw.f64(s, "sigma_v")?.unwrap_or(0.0),
        sigma_bar_v: raw.f64(s, "sigma_bar_v")?.unwrap_or(0.0),
        gamma: raw.require_f64(s, "gamma")?,
        horizon: raw.f64(s, "horizon")?.unwrap_or(1.0),
        x0: raw.f64(s, "x0")?.unwrap_or(0.0),
        v0: raw.f64(s, "v0")?.unwrap_or(1.0),
        s0: raw.f64(s, "s0")?.unwrap_or(1.0),
        endowment,
    })
}

/// `poly:<degree>` or `pl:<bins>`.
pub fn parse_basis(s: &str) -> Result<BasisKind, String> {
    let (kind, order) = s.split_once(':').ok_or_else(|| format!("basis must look like `poly:3` or `pl:8`, got `{s}`"))?;
    let order: usize = order.trim().parse().map_err(|_| format!("basis order must be a positive integer, got `{order}`"))?;
    if order == 0 {
        return Err("basis order must be positive".into());
    }
    match kind.trim() {
        "poly" if order <= MAX_DEGREE => Ok(BasisKind::Polynomial { degree: order }),
        "poly" => Err(format!("polynomial degree is capped at {MAX_DEGREE}")),
        "pl" => Ok(BasisKind::PiecewiseLinear { bins: order }),
        other => Err(format!("unknown basis `{other}` (poly, pl)")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let cfg = ExperimentConfig::parse(
            "problem = fbsde # inline\nseed = 7\n\n[model]\nfixture = heat-tanh\n[grid]\nsteps = auto\nc1 = 0.5\n[solver]\nbasis = pl:8\n",
        )
        .unwrap();
        assert_eq!(cfg.problem, Problem::Fbsde);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.grid.steps, Some(Steps::Auto));
        assert_eq!(cfg.grid.c1, Some(0.5));
        assert_eq!(cfg.solver.basis, Some(BasisKind::PiecewiseLinear { bins: 8 }));
        assert_eq!(cfg.fixture.unwrap().name, "heat-tanh");
    }

    #[test]
    fn missing_gamma_is_named() {
        let err = ExperimentConfig::parse("problem = portfolio\n[market]\nmu_s = 0.1\nsigma_bar_s = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("market.gamma"), "{err}");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = ExperimentConfig::parse("problem = fbsde\n[model]\nfixture = trivial\nc = abc\n").unwrap_err();
        assert_eq!(err.line, Some(4));
        let err = ExperimentConfig::parse("problem = fbsde\n[model]\nfixture = trivial\nfixtrue = x\n").unwrap_err();
        assert_eq!(err.line, Some(4));
        assert!(err.message.contains("model.fixtrue"));
        let err = ExperimentConfig::parse("problem = fbsde\nseed = 1\nseed = 2\n").unwrap_err();
        assert_eq!(err.line, Some(3));
        let err = ExperimentConfig::parse("problem = fbsde\n[model\n").unwrap_err();
        assert_eq!(err.line, Some(2));
        let err = ExperimentConfig::parse("problem = fbsde\njust words\n").unwrap_err();
        assert_eq!(err.line, Some(2));
    }

    #[test]
    fn non_finite_numbers_are_rejected() {
        let err = ExperimentConfig::parse("problem = verify-suite\n[tolerances]\noracle = inf\n").unwrap_err();
        assert_eq!(err.line, Some(3));
    }

    #[test]
    fn basis_specs() {
        assert_eq!(parse_basis("poly:11"), Ok(BasisKind::Polynomial { degree: 11 }));
        assert!(parse_basis("poly:0").is_err());
        assert!(parse_basis("poly:99").is_err());
        assert!(parse_basis("spline:3").is_err());
        assert!(parse_basis("poly").is_err());
    }

    #[test]
    fn default_suite_builds() {
        let s = ExperimentConfig::default_suite();
        assert_eq!(s.problem, Problem::VerifySuite);
        assert_eq!(s.paths, DEFAULT_PATHS);
        assert_eq!(s.seed, DEFAULT_SEED);
    }
}
