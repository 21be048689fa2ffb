//! zsbench: build taxonomy-aware zero-shot benchmarks, train the baseline
//! models, and evaluate them with hierarchical error accounting. One
//! subcommand per pipeline stage; every output file is stamped with the
//! config hash and seed so runs are reproducible byte for byte.

mod commands;
mod config;
mod output;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::{ModelKind, Setting, Sweep};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "zsbench", version, about = "Zero-shot benchmark toolkit")]
struct Cli {
    /// Key=value run configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master RNG seed; overrides the run.seed config key.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides the out.dir config key.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Override one config key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load every configured input and report counts and warnings.
    Ingest,
    /// Filter the candidate pool and optimize a maximal-ratio test split.
    BuildSplit,
    /// Fit a model on the training split and write it to a model file.
    Train {
        /// Which baseline to fit.
        #[arg(long, value_enum)]
        model: ModelKind,
    },
    /// Evaluate a model file against a split.
    Eval {
        /// Path to a model file written by `train`.
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Candidate set: test classes only, or training + test classes.
        #[arg(long, value_enum, default_value = "zsl")]
        setting: Setting,
        /// Split file; defaults to the paths.split config key.
        #[arg(long, value_name = "PATH")]
        split: Option<PathBuf>,
    },
    /// Sweep accuracy against a split characteristic, or run the
    /// three-factor impact design.
    Analyze {
        /// Sweep variable.
        #[arg(long, value_enum)]
        sweep: Sweep,
        /// Model file to evaluate (required for everything but impact).
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
    /// Count corpus occurrences of a word list.
    CountFreq {
        /// Plain-text corpus to scan.
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        /// Word list, one entry per line (underscores join phrases).
        #[arg(long, value_name = "PATH")]
        words: PathBuf,
    },
    /// Emit the taxonomy-distance analysis splits (1-hop, 2-hops, all).
    HopSplit,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing the thread pool")?;
    }
    let cfg = RunConfig::load(
        cli.config.as_deref(),
        &cli.set,
        cli.seed,
        cli.out.as_deref(),
        cli.force,
    )?;
    match cli.cmd {
        Cmd::Ingest => commands::ingest(&cfg),
        Cmd::BuildSplit => commands::build_split(&cfg),
        Cmd::Train { model } => commands::train(&cfg, model),
        Cmd::Eval {
            model,
            setting,
            split,
        } => commands::eval(&cfg, &model, setting, split.as_deref()),
        Cmd::Analyze { sweep, model } => commands::analyze(&cfg, sweep, model.as_deref()),
        Cmd::CountFreq { corpus, words } => commands::count_freq(&cfg, &corpus, &words),
        Cmd::HopSplit => commands::hop_split(&cfg),
    }
}
