//! Driver for synthesis, training, evaluation and diagnostics.

// `!(x > 0.0)` style checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod optim;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{Profile, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "fisheye-bev", about = "Fisheye surround-view BEV segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// `section.key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    #[arg(long, global = true)]
    pub profile: Option<Profile>,

    /// Override one key, e.g. `--set optim.lr=1e-4`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Synth,
    /// Train on a dataset and write checkpoints and a loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score one or more checkpoints on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory written by `train`; repeat to compare runs.
        #[arg(long = "checkpoint", required_unless_present = "oracle")]
        checkpoints: Vec<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Finite-difference check of every model component.
    Gradcheck {
        /// Perturb analytic gradients; the check must then fail.
        #[arg(long)]
        corrupt: bool,
    },
    /// Export rig geometry diagnostics.
    ProjectDebug,
}

impl GlobalArgs {
    /// Profile defaults, then the config file, then `--seed` and `--set`.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(),
        };
        if let Some(p) = self.profile {
            cfg.set("run.profile", &p.to_string()).map_err(CliError::Usage)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{o}`")))?;
            cfg.set(k, v).map_err(CliError::Usage)?;
        }
        cfg.validate().map_err(CliError::Usage)?;
        Ok(cfg)
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.global.resolve()?;
    let out = &cli.global.out;
    match &cli.command {
        Command::Synth => commands::synth::run(&cfg, out).map(|_| ()),
        Command::Train { data } => commands::train::run(&cfg, data, out).map(|_| ()),
        Command::Eval {
            data,
            checkpoints,
            oracle,
        } => commands::eval::run(&cfg, data, checkpoints, *oracle, out).map(|_| ()),
        Command::Gradcheck { corrupt } => commands::gradcheck::run(&cfg, *corrupt, out).map(|_| ()),
        Command::ProjectDebug => commands::project_debug::run(&cfg, out).map(|_| ()),
    }
}
