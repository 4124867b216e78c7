//! Command-line front end: configuration, file formats and subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::Run;
use crate::config::LoadedConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "lpa", version, about = "Joint local predictive ability of forecasters and locally weighted pools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the config and every configured input file.
    Validate(Common),
    /// Sample the hyperparameter posterior for a score panel.
    Fit(Common),
    /// Draw local predictive ability at query points from saved draws.
    Predict(Common),
    /// Backtest the pooling schemes on a ψ series.
    Pool(Common),
    /// Write simulated score panels and their true local ability.
    Simulate(Common),
    /// Run the multi- vs single-output replication study.
    Replicate(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "LPA_THREADS")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, env = "LPA_OUT_DIR")]
    pub out: Option<PathBuf>,
}

fn init_threads(n: usize) -> CliResult<()> {
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Runs one command. Returns text for standard output.
pub fn run(cli: Cli) -> CliResult<String> {
    let (name, common) = match &cli.command {
        Command::Validate(c) => ("validate", c),
        Command::Fit(c) => ("fit", c),
        Command::Predict(c) => ("predict", c),
        Command::Pool(c) => ("pool", c),
        Command::Simulate(c) => ("simulate", c),
        Command::Replicate(c) => ("replicate", c),
    };
    let loaded = LoadedConfig::load(&common.config)?;
    init_threads(common.threads.unwrap_or(loaded.config.threads))?;
    let run = Run::new(loaded, common.seed, common.out.clone());
    let out_dir = run.out_dir.display().to_string();
    match cli.command {
        Command::Validate(_) => return commands::cmd_validate(run),
        Command::Fit(_) => commands::cmd_fit(run)?,
        Command::Predict(_) => commands::cmd_predict(run)?,
        Command::Pool(_) => commands::cmd_pool(run)?,
        Command::Simulate(_) => commands::cmd_simulate(run)?,
        Command::Replicate(_) => commands::cmd_replicate(run)?,
    }
    Ok(format!("{name}: outputs in {out_dir}"))
}
