//! `hflow`: train, run and check hierarchy flow translators.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hflow_core::checks::Suite;
use hflow_core::training::Profile;
use hflow_core::Variant;

use crate::config::{ENV_RUN_DIR, ENV_VGG_WEIGHTS};

/// Exit status for checks that ran and failed.
const EXIT_CHECK_FAILED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "hflow", version, about = "Invertible hierarchical flow image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write logs, checkpoints and samples to a run directory.
    Train(TrainArgs),
    /// Translate images with a trained checkpoint.
    Translate(TranslateArgs),
    /// Run the invariant suites.
    Check(CheckArgs),
    /// Compare two images, or two directories of same-named images.
    Metrics(MetricsArgs),
    /// Print per-component parameter counts.
    ParamCount(ParamCountArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Schedule preset: desk or paper.
    #[arg(long, value_parser = parse_profile)]
    pub profile: Option<Profile>,
    /// Model preset: HF, HF+, HF++ or HF† (also HFdagger).
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Seed for initialization and data sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Schedule length.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the style term.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Fraction of channels kept by the aligned style loss.
    #[arg(long)]
    pub k: Option<f64>,
    /// Checkpoint cadence in iterations; 0 disables.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Directory of source-domain images.
    #[arg(long)]
    pub source_dir: Option<PathBuf>,
    /// Directory of target-domain images.
    #[arg(long)]
    pub target_dir: Option<PathBuf>,
    /// Pretrained VGG-19 weight file; the seeded stand-in is used otherwise.
    #[arg(long, env = ENV_VGG_WEIGHTS)]
    pub vgg_weights: Option<PathBuf>,
    /// Output directory [default: runs/<variant>-s<seed>].
    #[arg(long, env = ENV_RUN_DIR)]
    pub run_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed iterations, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Print progress every this many iterations; 0 silences it.
    #[arg(long, default_value_t = 50)]
    pub progress_every: u64,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source image, or a directory of images.
    #[arg(long)]
    pub source: PathBuf,
    /// Style image; not needed with --adain-bypass.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Output PNG, or a directory when the source is a directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Expected model preset; a checkpoint for another model is rejected.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Skip AdaIN and decode the unmodified features.
    #[arg(long)]
    pub adain_bypass: bool,
    /// Force every fusion weight to one.
    #[arg(long)]
    pub alpha_one: bool,
    /// Also report the aligned style loss of each output at this k.
    #[arg(long)]
    pub k: Option<f64>,
    /// Pretrained VGG-19 weight file for --k.
    #[arg(long, env = ENV_VGG_WEIGHTS)]
    pub vgg_weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// inversion, oracle, gradients, losses or all.
    #[arg(long, default_value = "all", value_parser = parse_suite)]
    pub suite: Suite,
    /// Models for the inversion suite; all presets when omitted.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Vec<Variant>,
    /// Check a trained checkpoint instead of fresh initializations.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed for parameters and test inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Candidate image or directory.
    pub candidate: PathBuf,
    /// Reference image or directory.
    pub reference: PathBuf,
}

#[derive(Debug, Args)]
pub struct ParamCountArgs {
    /// Presets to report; all when omitted.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Vec<Variant>,
    /// Emit JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: hflow_core::Error| e.to_string())
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: hflow_core::Error| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: hflow_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Translate(a) => commands::translate(a),
        Command::Check(a) => commands::check(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::ParamCount(a) => commands::param_count(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
