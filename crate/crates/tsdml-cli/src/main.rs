//! `tsdml`: impulse-response estimation on a single treated time series.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use tsdml_cli::commands::{cmd_estimate, cmd_simulate, cmd_true_irf, cmd_tune};
use tsdml_cli::config::{resolve, ConfigFile, FlagOverrides};

/// Doubly robust machine-learning estimation of treatment impulse responses
/// on time series, with cross-fitting that respects serial dependence.
#[derive(Parser)]
#[command(name = "tsdml", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file (TOML); flags override file values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base random seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Horizons, comma separated (e.g. 0,1,3,5).
    #[arg(long, global = true, value_delimiter = ',', value_name = "LIST")]
    horizons: Option<Vec<usize>>,
    /// Cross-fitting folds.
    #[arg(long, global = true, value_name = "K")]
    k_folds: Option<usize>,
    /// Dependence gap: observations dropped between training and evaluation.
    #[arg(long, global = true, value_name = "KT")]
    gap: Option<usize>,
    /// Learner family: forest or boosting.
    #[arg(long, global = true, value_name = "NAME")]
    learner: Option<String>,
    /// Also run the baseline estimators (cross-fitted and in-sample
    /// regression adjustment, local projection).
    #[arg(long, global = true)]
    baselines: bool,
    /// Published-scale study profile (1000 replications, 500 trees).
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Output directory (created if missing).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; 0 or unset uses every core. Results are identical at
    /// any setting.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Proceed even when the gap is smaller than max(horizon, lag).
    #[arg(long, global = true)]
    allow_small_gap: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate impulse responses from a CSV panel.
    Estimate,
    /// Run a Monte Carlo study of the estimators.
    Simulate,
    /// Print the simulated process's true effect values.
    TrueIrf,
    /// Tune nuisance learners and report the chosen settings.
    Tune,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let flags = FlagOverrides {
        seed: cli.seed,
        horizons: cli.horizons.clone(),
        k_folds: cli.k_folds,
        gap: cli.gap,
        learner: cli.learner.clone(),
        baselines: cli.baselines,
        paper_scale: cli.paper_scale,
        out: cli.out.clone(),
        threads: cli.threads,
        allow_small_gap: cli.allow_small_gap,
    };
    let run = resolve(file, &flags)?;
    if run.threads > 0 {
        // A second build_global in the same process is a no-op; results do
        // not depend on pool size.
        rayon::ThreadPoolBuilder::new().num_threads(run.threads).build_global().ok();
    }
    match cli.command {
        Command::Estimate => cmd_estimate(&run),
        Command::Simulate => cmd_simulate(&run),
        Command::TrueIrf => cmd_true_irf(&run),
        Command::Tune => cmd_tune(&run),
    }
}
