//! Command-line front end for the birdcall recognition pipeline.
//!
//! Subcommands cover the whole experiment loop: corpus synthesis,
//! spectrogram preprocessing, training, inference, calibration, evaluation,
//! and Grad-CAM inspection. Every command is deterministic given its config
//! file and seed, writes only under --out, and uses exit code 0 for
//! success, 1 for a failure while doing the work, and 2 for usage or
//! configuration errors.

mod cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "birdsed",
    version,
    about = "Few-shot long-tailed birdcall recognition pipeline"
)]
struct Cli {
    /// Pipeline configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Base seed for all random draws; overrides the config file's seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic birdcall corpus.
    Synth,

    /// Dump per-segment log-mel spectrogram tensors for WAV files.
    Preprocess {
        /// Directory of input WAV files.
        #[arg(long, value_name = "DIR")]
        audio: PathBuf,
    },

    /// Train a model from weak clip labels.
    Train {
        /// Recording metadata CSV (filename,labels,rating).
        #[arg(long, value_name = "CSV")]
        metadata: PathBuf,

        /// Species table CSV (species,scored).
        #[arg(long, value_name = "CSV")]
        species: PathBuf,

        /// Validate configuration and data, then exit without training.
        #[arg(long)]
        dry_run: bool,
    },

    /// Score every segment of every WAV file in a directory.
    Infer {
        /// Weights file written by train.
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,

        /// Directory of WAV files to score.
        #[arg(long, value_name = "DIR")]
        audio: PathBuf,
    },

    /// Fit class-wise thresholds, or penalize or threshold predictions.
    Calibrate {
        /// Segment predictions CSV from infer.
        #[arg(long, value_name = "CSV")]
        predictions: PathBuf,

        /// Segment truth CSV; required when fitting thresholds.
        #[arg(long, value_name = "CSV")]
        truth: Option<PathBuf>,

        /// Species table; scored species get thresholds. Required when
        /// fitting or using a global threshold.
        #[arg(long, value_name = "CSV")]
        species: Option<PathBuf>,

        /// Subtract factor * class share instead of fitting thresholds.
        #[arg(
            long,
            value_name = "FACTOR",
            requires = "counts",
            conflicts_with_all = ["apply", "global_threshold", "truth"]
        )]
        penalize: Option<f64>,

        /// Training class counts CSV (species,count) for --penalize.
        #[arg(long, value_name = "CSV")]
        counts: Option<PathBuf>,

        /// Apply a fitted threshold table instead of fitting one.
        #[arg(
            long,
            value_name = "CSV",
            conflicts_with_all = ["global_threshold", "truth"]
        )]
        apply: Option<PathBuf>,

        /// Apply one fixed threshold to every scored species.
        #[arg(long, value_name = "T", conflicts_with = "truth")]
        global_threshold: Option<f64>,
    },

    /// Score decisions against truth and write a metrics report.
    Evaluate {
        /// Segment decisions CSV (recording,segment_index,labels).
        #[arg(long, value_name = "CSV")]
        decisions: PathBuf,

        /// Segment truth CSV in the same format.
        #[arg(long, value_name = "CSV")]
        truth: PathBuf,
    },

    /// Emit a Grad-CAM heatmap for one species on one recording.
    Gradcam {
        /// Weights file written by train.
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,

        /// One WAV file to inspect.
        #[arg(long, value_name = "FILE")]
        audio: PathBuf,

        /// Species to explain.
        #[arg(long, value_name = "ID")]
        species: String,

        /// Segment to inspect; defaults to the highest-scoring one.
        #[arg(long, value_name = "INDEX")]
        chunk: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), cmd::CliError> {
    let ctx = cmd::Context::new(cli.config.as_deref(), cli.seed, cli.out)?;
    match cli.command {
        Command::Synth => cmd::synth::run(&ctx),
        Command::Preprocess { audio } => cmd::preprocess::run(&ctx, &audio),
        Command::Train {
            metadata,
            species,
            dry_run,
        } => cmd::train::run(&ctx, &metadata, &species, dry_run),
        Command::Infer { weights, audio } => cmd::infer::run(&ctx, &weights, &audio),
        Command::Calibrate {
            predictions,
            truth,
            species,
            penalize,
            counts,
            apply,
            global_threshold,
        } => cmd::calibrate::run(
            &ctx,
            &predictions,
            truth.as_deref(),
            species.as_deref(),
            penalize,
            counts.as_deref(),
            apply.as_deref(),
            global_threshold,
        ),
        Command::Evaluate { decisions, truth } => cmd::evaluate::run(&ctx, &decisions, &truth),
        Command::Gradcam {
            weights,
            audio,
            species,
            chunk,
        } => cmd::gradcam::run(&ctx, &weights, &audio, &species, chunk),
    }
}
