//! `cign`: train, evaluate and analyse conditional information gain networks.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data or
//! checkpoint error, 4 diverged run.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use cign_core::CignError;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cign", version, about = "Conditional information gain networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per seed, writing checkpoints and JSONL metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Test-set accuracy of a checkpoint under single-leaf routing.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-node class histogram of a checkpoint over the test split.
    Histogram {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use the training split instead of the test split.
        #[arg(long)]
        train_split: bool,
    },
    /// Per-node, per-path and total parameter counts.
    CountParams {
        #[command(flatten)]
        common: Common,
        /// Named architecture, instead of a config.
        #[arg(long)]
        model: Option<String>,
        /// Print comma-separated values.
        #[arg(long)]
        csv: bool,
    },
    /// Sequential grid search over the config's `[[grid]]` axes.
    Grid {
        #[command(flatten)]
        common: Common,
    },
    /// Max/Min/Avg accuracy table from metrics files.
    Report {
        #[command(flatten)]
        common: Common,
        /// Metrics files; defaults to every *.jsonl in the output directory.
        metrics: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Evaluate { common, checkpoint } => commands::evaluate(&common, &checkpoint),
        Command::Histogram { common, checkpoint, train_split } => {
            commands::histogram(&common, &checkpoint, train_split)
        }
        Command::CountParams { common, model, csv } => commands::count_params(&common, model.as_deref(), csv),
        Command::Grid { common } => commands::grid(&common),
        Command::Report { common, metrics } => commands::report(&common, &metrics),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<CignError>().map_or(1, CignError::exit_code);
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
