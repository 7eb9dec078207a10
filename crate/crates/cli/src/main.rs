//! Command-line pipeline driver.
//!
//! Subcommands cover the whole flow: `split` builds the category
//! discovery split, `tes-train` runs stage 1 and exports the embedding
//! cache, `train` runs stage 2, `eval` reports clustering accuracy
//! (parametric and k-means baselines), and `estimate-k` scans candidate
//! class counts. Exit codes: 0 success, 2 configuration error, 3
//! runtime/training failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(
    name = "mmgcd",
    version,
    about = "multi-modal generalized category discovery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Pipeline configuration file (flat `key = value` text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override for this run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory root.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Write into --out directly instead of a fresh run subdirectory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist the labeled/unlabeled split.
    Split {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Stage 1: train the text embedding synthesizer, export embeddings.
    TesTrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Split file from `mmgcd split`.
        #[arg(long)]
        split: PathBuf,
    },
    /// Stage 2: dual-branch training.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Split file from `mmgcd split`.
        #[arg(long)]
        split: PathBuf,
        /// Stage-1 checkpoint from `mmgcd tes-train`.
        #[arg(long)]
        tes: PathBuf,
        /// Stage-1 embedding cache (needed for the cache fast path).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Evaluate clustering accuracy on the unlabeled set.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Split file from `mmgcd split`.
        #[arg(long)]
        split: PathBuf,
        /// Stage-2 checkpoint; enables the parametric evaluation.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stage-1 embedding cache; enables the k-means baselines.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Semi-supervised k-means baseline on visual embeddings.
        #[arg(long)]
        ss_kmeans: bool,
        /// Semi-supervised k-means on concatenated visual and pseudo
        /// text embeddings.
        #[arg(long)]
        concat_tes: bool,
    },
    /// Estimate the number of classes from the embedding cache.
    EstimateK {
        #[command(flatten)]
        common: CommonArgs,
        /// Split file from `mmgcd split`.
        #[arg(long)]
        split: PathBuf,
        /// Stage-1 embedding cache.
        #[arg(long)]
        cache: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Split { common } => commands::run_split(&common),
        Command::TesTrain { common, split } => commands::run_tes_train(&common, &split),
        Command::Train {
            common,
            split,
            tes,
            cache,
        } => commands::run_train(&common, &split, &tes, cache.as_deref()),
        Command::Eval {
            common,
            split,
            checkpoint,
            cache,
            ss_kmeans,
            concat_tes,
        } => commands::run_eval(
            &common,
            &split,
            checkpoint.as_deref(),
            cache.as_deref(),
            ss_kmeans,
            concat_tes,
        ),
        Command::EstimateK {
            common,
            split,
            cache,
        } => commands::run_estimate_k(&common, &split, &cache),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
