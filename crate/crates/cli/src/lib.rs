//! Experiment runner: config parsing, the per-problem pipelines and the
//! verification suite.

pub mod config;
pub mod output;
pub mod report;
mod run;
pub mod suite;

use std::io;
use std::time::Instant;

use serde_json::json;
use thiserror::Error;

pub use config::{ConfigError, ExperimentConfig, Problem};
pub use output::OutputDir;
pub use report::{Assertion, RunReport};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Solver(fbsde::Error),
}

impl From<fbsde::Error> for RunError {
    fn from(e: fbsde::Error) -> Self {
        match e {
            fbsde::Error::Io(io) => RunError::Io(io),
            other => RunError::Solver(other),
        }
    }
}

impl RunError {
    /// 3 for a diverged Picard solve, 2 for anything that stopped the run
    /// before a verdict.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Solver(fbsde::Error::Diverged { .. }) => 3,
            _ => 2,
        }
    }
}

/// Runs one experiment, writing its artefacts plus `report.json`,
/// `summary.csv` and `timings.json` into the configured output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport, RunError> {
    run::check_problem(cfg)?;
    let mut out = OutputDir::acquire(&cfg.output.dir)?;
    let t0 = Instant::now();
    let mut report = match cfg.problem {
        Problem::Fbsde | Problem::QbsdeWeak => run::run_fbsde(cfg, &mut out)?,
        Problem::Portfolio => run::run_portfolio(cfg, &mut out)?,
        Problem::VerifySuite => suite::verify_suite(cfg, &mut out)?,
    };
    report.time("total", t0.elapsed().as_secs_f64());
    out.write_json("report.json", &report)?;
    out.write("summary.csv", report.csv().as_bytes())?;
    out.write_json("timings.json", &json!({ "timings": report.timings, "runtime_checks": report.runtime_checks }))?;
    report.outputs = out.written().to_vec();
    Ok(report)
}
