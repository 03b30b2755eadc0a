use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fbsde_cli::{run, ExperimentConfig, RunError};

#[derive(Parser)]
#[command(name = "fbsde", version, about = "Picard solver for decoupled FBSDE reformulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo paths (overrides the config).
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Print only failures.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Run the built-in verification suite.
    Verify,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, RunError> {
    let mut cfg = match &cli.command {
        Command::Run { config } => {
            let text = std::fs::read_to_string(config).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", config.display())))?;
            ExperimentConfig::parse(&text)?
        }
        Command::Verify => ExperimentConfig::default_suite(),
    };
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(paths) = cli.paths {
        cfg.paths = paths;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load(&cli).and_then(|cfg| run(&cfg));
    match result {
        Ok(report) => {
            if cli.quiet {
                for a in report.failures() {
                    println!("FAIL {} {} {}: {:e} > {:e} {}", a.group, a.subject, a.name, a.value, a.threshold, a.detail);
                }
            } else {
                print!("{}", report.table());
                for p in &report.outputs {
                    println!("wrote {}", p.display());
                }
            }
            let code = report.exit_code();
            if code != 0 {
                eprintln!("{} of {} checks failed", report.failures().count(), report.assertions.len());
            }
            ExitCode::from(code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let RunError::Solver(fbsde::Error::Diverged { report, .. }) = &e {
                eprintln!("{}", serde_json::to_string_pretty(report).unwrap_or_default());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
