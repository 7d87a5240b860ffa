//! Staged command-line pipeline: extract, train, eval, prune, cluster, and
//! a self-check suite.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::{ExperimentConfig, Preset};

#[derive(Debug, Parser)]
#[command(
    name = "m3",
    version,
    about = "Underwater acoustic recognition with multi-gate mixture-of-experts"
)]
pub struct Cli {
    /// Experiment config (TOML). Keys not given fall back to the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base settings the config is layered on.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Run a single seed instead of `train.seeds`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory (default: `out_dir` from the config, else `runs`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment recordings, split them, and write feature files.
    Extract,
    /// Train one model per seed.
    Train,
    /// Score checkpoints on the test split.
    Eval,
    /// Drop the auxiliary branch from trained checkpoints.
    Prune,
    /// t-SNE and k-means over the hand-crafted features.
    Cluster,
    /// Run the built-in correctness checks.
    Verify {
        /// Also run the desk training checks (a few minutes).
        #[arg(long)]
        full: bool,
    },
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::Verify { full } = cli.command {
        let outcomes = verify::run_suite(full, |o| println!("{}", o.line()));
        let failed = outcomes.iter().filter(|o| !o.passed()).count();
        println!("{} passed, {failed} failed", outcomes.len() - failed);
        return Ok(if failed == 0 {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        });
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), cli.preset)?;
    let out = cli
        .out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let ctx = Context::new(cfg, out, cli.seed)?;
    match cli.command {
        Command::Extract => commands::extract(&ctx)?,
        Command::Train => commands::train_stage(&ctx)?,
        Command::Eval => commands::eval(&ctx)?,
        Command::Prune => commands::prune(&ctx)?,
        Command::Cluster => commands::cluster(&ctx)?,
        Command::Verify { .. } => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}
