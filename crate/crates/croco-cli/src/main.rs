//! `croco` — cross-modal contrastive localization pipeline.
//!
//! Subcommands wire the library end to end: generate synthetic scenes, train
//! the two branches, build RGB feature maps, localize elevation patches,
//! score retrieval, render heatmaps/error maps, and sweep ablations.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::TrainFlags;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config file, or invalid parameter combinations.
    Usage(String),
    /// Failures after a well-formed invocation (I/O, training, rendering).
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn runtime(err: impl Into<anyhow::Error>) -> Self {
        CliError::Runtime(err.into())
    }
}

#[derive(Parser)]
#[command(
    name = "croco",
    about = "Cross-modal contrastive localization: train, map, retrieve",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic co-registered RGB/elevation scene pair.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        size_px: usize,
        #[arg(long, default_value_t = 0.5)]
        gsd_m: f64,
        #[arg(long, default_value_t = 40)]
        n_structures: usize,
        #[arg(long, default_value_t = 48.0)]
        smoothness: f64,
        #[arg(long, default_value_t = 0.05)]
        texture_noise: f64,
        /// Output directory for the raw payload + sidecar files.
        #[arg(long)]
        out_dir: PathBuf,
        /// Optionally split the scene into train/val/test bands and write a
        /// split spec alongside (fractions of rows, comma separated).
        #[arg(long)]
        split_rows: Option<String>,
    },
    /// Train both branches on a tile directory.
    Train {
        /// TOML config file; flags override file values.
        #[arg(short = 'c', long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// JSON split spec mapping pair id to train|val|test.
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Output directory (default runs/<timestamp>-train).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Encode an RGB tile into a `.crocomap` feature map.
    BuildMap {
        #[arg(long, conflicts_with = "oracle_seed")]
        checkpoint: Option<PathBuf>,
        /// Content-addressed oracle encoders instead of a checkpoint.
        #[arg(long)]
        oracle_seed: Option<u64>,
        #[arg(long)]
        data_dir: PathBuf,
        /// Pair id (loads `<pair>-rgb` and, in oracle mode, `<pair>-dem`).
        #[arg(long)]
        pair: String,
        #[arg(long)]
        patch_m: Option<f64>,
        #[arg(long)]
        stride_m: Option<f64>,
        #[arg(long)]
        gsd_m: Option<f64>,
        /// Output map path (default `<run-dir>/maps/<pair>.crocomap`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Rank feature-map cells for one elevation patch.
    Localize {
        #[arg(long, conflicts_with = "oracle_seed")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle_seed: Option<u64>,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        pair: String,
        /// Patch anchor in pixels on the elevation tile.
        #[arg(long)]
        row: usize,
        #[arg(long)]
        col: usize,
        #[arg(short = 'k', long, default_value_t = 5)]
        k: usize,
    },
    /// Score retrieval of every map cell against its co-located elevation
    /// patch; writes a JSON report plus error-map figures.
    Eval {
        #[arg(long, conflicts_with = "oracle_seed")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle_seed: Option<u64>,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        pair: String,
        /// Cap on query count (seeded uniform subsample when exceeded).
        #[arg(long)]
        max_queries: Option<usize>,
        #[arg(long, default_value_t = 0)]
        query_seed: u64,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Render the similarity heatmap of one elevation patch against a map.
    Heatmap {
        #[arg(long, conflicts_with = "oracle_seed")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle_seed: Option<u64>,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        pair: String,
        #[arg(long)]
        row: usize,
        #[arg(long)]
        col: usize,
        /// Output PNG path (default `<run-dir>/figures/heatmap-<row>-<col>.png`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Sweep (gsd, patch, batch) x seeds: one full train+eval per cell.
    Ablate {
        #[arg(short = 'c', long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Comma-separated sweep values; at least one list is required.
        #[arg(long)]
        batch_sizes: Option<String>,
        #[arg(long)]
        patch_ms: Option<String>,
        #[arg(long)]
        gsds: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; real parse errors are
            // usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth {
            seed,
            size_px,
            gsd_m,
            n_structures,
            smoothness,
            texture_noise,
            out_dir,
            split_rows,
        } => commands::synth::run(
            seed,
            size_px,
            gsd_m,
            n_structures,
            smoothness,
            texture_noise,
            &out_dir,
            split_rows.as_deref(),
        ),
        Command::Train {
            config,
            flags,
            data_dir,
            splits,
            run_dir,
        } => commands::train::run(
            config.as_deref(),
            &flags,
            data_dir.as_deref(),
            splits.as_deref(),
            run_dir.as_deref(),
        ),
        Command::BuildMap {
            checkpoint,
            oracle_seed,
            data_dir,
            pair,
            patch_m,
            stride_m,
            gsd_m,
            out,
            run_dir,
        } => commands::build_map::run(
            checkpoint.as_deref(),
            oracle_seed,
            &data_dir,
            &pair,
            patch_m,
            stride_m,
            gsd_m,
            out.as_deref(),
            run_dir.as_deref(),
        ),
        Command::Localize {
            checkpoint,
            oracle_seed,
            map,
            data_dir,
            pair,
            row,
            col,
            k,
        } => commands::localize::run(
            checkpoint.as_deref(),
            oracle_seed,
            &map,
            &data_dir,
            &pair,
            row,
            col,
            k,
        ),
        Command::Eval {
            checkpoint,
            oracle_seed,
            map,
            data_dir,
            pair,
            max_queries,
            query_seed,
            run_dir,
        } => commands::eval_cmd::run(
            checkpoint.as_deref(),
            oracle_seed,
            &map,
            &data_dir,
            &pair,
            max_queries,
            query_seed,
            run_dir.as_deref(),
        ),
        Command::Heatmap {
            checkpoint,
            oracle_seed,
            map,
            data_dir,
            pair,
            row,
            col,
            out,
            run_dir,
        } => commands::heatmap::run(
            checkpoint.as_deref(),
            oracle_seed,
            &map,
            &data_dir,
            &pair,
            row,
            col,
            out.as_deref(),
            run_dir.as_deref(),
        ),
        Command::Ablate {
            config,
            flags,
            data_dir,
            splits,
            batch_sizes,
            patch_ms,
            gsds,
            seeds,
            run_dir,
        } => commands::ablate::run(
            config.as_deref(),
            &flags,
            data_dir.as_deref(),
            splits.as_deref(),
            batch_sizes.as_deref(),
            patch_ms.as_deref(),
            gsds.as_deref(),
            seeds.as_deref(),
            run_dir.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
