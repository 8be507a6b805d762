//! Command-line front end: reads a scenario, runs one pipeline, and writes
//! `result.csv` plus `report.txt` into the output directory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{execute, Command};
use crate::config::Scenario;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SOLVER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const THREADS_ENV: &str = "ERRATIC2BSDE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "erratic2bsde", version, about = "Second-order BSDE solvers with a default horizon")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,

    /// Scenario file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a key, e.g. `--set sde.n_paths=5000`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,

    /// Seed for both path simulation and the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Sub {
    /// Simulate the measure family and dump the paths.
    Simulate,
    /// Solve the Brownian BSDE and paste at the default time.
    SolveBsde,
    /// Solve the second-order BSDE over the volatility band.
    #[command(name = "solve-2bsde")]
    Solve2bsde,
    /// Solve the fully nonlinear PDE on a grid.
    SolvePde,
    /// Optimal drift/volatility control.
    Control,
    /// Robust (inf-sup) control value.
    Robust,
    /// Run the golden scenarios.
    Verify {
        /// Also cross-check the oracles against each other.
        #[arg(long)]
        oracles: bool,
    },
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Simulate => Command::Simulate,
            Sub::SolveBsde => Command::SolveBsde,
            Sub::Solve2bsde => Command::Solve2bsde,
            Sub::SolvePde => Command::SolvePde,
            Sub::Control => Command::Control,
            Sub::Robust => Command::Robust,
            Sub::Verify { oracles } => Command::Verify { oracles },
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{raw}`"))?;
    // A pool that already exists (tests calling run twice) is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_CONFIG;
    }
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("run.seed={seed}"));
        overrides.push(format!("sde.seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("run.output_dir={}", out.display()));
    }
    let scenario = match Scenario::load(cli.config.as_deref(), &overrides) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let out_dir = PathBuf::from(&scenario.run_output_dir);
    let cmd = Command::from(cli.command);
    let outcome = match execute(cmd, &scenario) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("solver error: {e}");
            return EXIT_SOLVER;
        }
    };
    let report = output::report_with_header(cmd.name(), &scenario.render(), &outcome.report);
    if let Err(e) = output::write_outputs(&out_dir, &outcome.csv, &report) {
        eprintln!("cannot write to {}: {e}", out_dir.display());
        return EXIT_SOLVER;
    }
    print!("{}", outcome.report);
    match outcome.verified {
        Some(false) => EXIT_VERIFY,
        _ => EXIT_OK,
    }
}
