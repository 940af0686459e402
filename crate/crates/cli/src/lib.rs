//! `qmi-info`: experiments, synthesis and certificate checks for data-driven control
//! with noisy data.

pub mod check;
pub mod commands;
pub mod config;
pub mod experiments;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use qmi_core::error::{Error, Result};

use config::{load, ExpAConfig, ExpBConfig, ExpCConfig, ExpDConfig, SynthConfig, VerifyConfig};
use output::Artifacts;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_CERTIFIED: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "qmi-info", version, about = "Controller synthesis from noisy data via quadratic matrix inequalities")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config; every experiment field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Directory for the JSON summary and CSV tables.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `repeat` (exp-c) or `datasets` (exp-d).
    #[arg(long, global = true)]
    pub repeat: Option<usize>,
    /// Record wall-clock time; output is then no longer byte-reproducible.
    #[arg(long, global = true)]
    pub timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Scalar quadratic stabilization with the consistency ellipse.
    ExpA,
    /// Rank-deficient data with the reduced ellipsoid formulation.
    ExpB,
    /// H2-optimal synthesis over a grid of data lengths.
    ExpC,
    /// Structured noise: co-design versus two-step feasibility rates.
    ExpD,
    /// One synthesis run on generated or inline data.
    Synth,
    /// Re-check a synth output file.
    Verify,
}

impl Command {
    fn needs_config(self) -> bool {
        matches!(self, Command::Synth | Command::Verify)
    }
}

pub fn execute(cli: &Cli) -> Result<Artifacts> {
    let path = cli.config.as_deref();
    if cli.command.needs_config() && path.is_none() {
        return Err(Error::Config("this command needs --config".into()));
    }
    let start = Instant::now();
    let mut art = match cli.command {
        Command::ExpA => experiments::experiment_a(&load::<ExpAConfig>(path)?, cli.seed)?,
        Command::ExpB => experiments::experiment_b(&load::<ExpBConfig>(path)?, cli.seed)?,
        Command::ExpC => {
            let mut cfg: ExpCConfig = load(path)?;
            if let Some(r) = cli.repeat {
                cfg.repeat = r;
            }
            experiments::experiment_c(&cfg, cli.seed)?
        }
        Command::ExpD => {
            let mut cfg: ExpDConfig = load(path)?;
            if let Some(r) = cli.repeat {
                cfg.datasets = r;
            }
            experiments::experiment_d(&cfg, cli.seed)?
        }
        Command::Synth => commands::synth(&load::<SynthConfig>(path)?, cli.seed)?,
        Command::Verify => {
            let cfg: VerifyConfig = load(path)?;
            let base = path.and_then(Path::parent).unwrap_or(Path::new("."));
            commands::verify(&cfg, base, cli.seed)?
        }
    };
    if cli.timing {
        let ms = start.elapsed().as_millis() as u64;
        art.summary["wall_time_ms"] = serde_json::json!(ms);
        if let Some(r) = art.summary.get_mut("result").filter(|r| r.is_object()) {
            r["wall_time_ms"] = serde_json::json!(ms);
        }
    }
    Ok(art)
}

pub fn error_code(e: &Error) -> i32 {
    match e {
        Error::Solver(_) => EXIT_SOLVER,
        _ => EXIT_CONFIG,
    }
}

/// Runs the command, prints the summary and writes artifacts; returns the exit code.
pub fn run(cli: &Cli) -> i32 {
    let art = match execute(cli) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return error_code(&e);
        }
    };
    print!("{}", art.json());
    if let Some(dir) = &cli.out {
        if let Err(e) = art.write(dir) {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    }
    art.code
}
