//! The `shaptst` command-line front end.
//!
//! Exit codes: 0 success, 2 invalid input (flags, config, data, checkpoint),
//! 3 runtime failure (divergence, I/O). Config keys can be overridden with
//! `SHAPTST__<SECTION>__<KEY>=<value>` environment variables.

mod commands;
mod manifest;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::masking::Level;
use crate::oracle::OracleMethod;

pub use manifest::{FileRecord, RunManifest, MANIFEST_SCHEMA_VERSION};

#[derive(Debug, Parser)]
#[command(name = "shaptst", version, about = "Train and explain time-series transformers with amortized Shapley values")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every random choice of the command (overrides config seeds).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; computation is single-threaded, so values above 1
    /// are accepted and recorded but do not change results.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known informative features.
    SynthData {
        /// TOML synthetic-data spec.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (data.csv, manifest.json, run_manifest.json).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Masking-based contrastive pre-training.
    Pretrain(TrainArgs),
    /// Joint fine-tuning of predictor and explainer.
    Finetune(TrainArgs),
    /// Corrected attributions for every sample of a split.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_level, default_value = "feature")]
        level: Level,
        #[arg(long)]
        out: PathBuf,
        /// Also write one time-block × feature heatmap per sample.
        #[arg(long)]
        svg: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Explain only the first N samples of the split.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Prediction and explanation metrics on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: auroc, macro_f1, mse, accuracy, validation, faithfulness, spearman, pruning.
        #[arg(long, value_delimiter = ',', default_value = "validation")]
        metrics: Vec<String>,
        /// Masking level of faithfulness and per-sample summaries.
        #[arg(long, value_parser = parse_level, default_value = "feature")]
        level: Level,
        /// Random subsets per sample for faithfulness.
        #[arg(long, default_value_t = 128)]
        subsets: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Agreement between amortized and post-hoc attributions.
    OracleCompare {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// exact, permutation or kernel.
        #[arg(long, value_parser = parse_method, default_value = "exact")]
        method: OracleMethod,
        /// Permutations or kernel draws per sample (ignored by exact).
        #[arg(long, default_value_t = 2048)]
        budget: usize,
        #[arg(long, value_parser = parse_level, default_value = "feature")]
        level: Level,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Paired regularized/unregularized training under growing test noise.
    NoiseSweep {
        /// TOML noise-sweep config.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated noise standard deviations (overrides the config).
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Explanation latency: amortized versus post-hoc.
    BenchLatency {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Oracle draws per sample.
        #[arg(long, default_value_t = 128)]
        budget: usize,
        #[arg(long, value_parser = parse_method, default_value = "kernel")]
        method: OracleMethod,
        #[arg(long, value_parser = parse_level, default_value = "time")]
        level: Level,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory (data.csv, optional manifest.json).
    #[arg(long)]
    pub data: PathBuf,
    /// TOML training config.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint path; metrics go to `<out>.metrics.csv`, the run manifest
    /// to `<out>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Start fine-tuning from this pre-trained checkpoint (fresh weights otherwise).
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Continue an interrupted run from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after_epoch: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

fn parse_level(s: &str) -> Result<Level, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<OracleMethod, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
