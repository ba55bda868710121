//! `svkit`: speaker-verification back-end driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "svkit", version, about = "Speaker-verification back-end: PLDA, CORAL+, calibration, fusion, metrics")]
pub struct Cli {
    /// JSON pipeline config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where to write the run manifest (default: next to the main output).
    #[arg(long, global = true)]
    pub run_manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit or apply centering + whitening (+ length norm).
    Preprocess(PreprocessArgs),
    /// Train a two-covariance PLDA model by EM.
    TrainPlda(TrainPldaArgs),
    /// Adapt a PLDA model to in-domain data with CORAL or CORAL+.
    Adapt(AdaptArgs),
    /// Score a trial list with PLDA LLRs or cosine similarity.
    Score(ScoreArgs),
    /// Train or apply score calibration.
    Calibrate(CalibrateArgs),
    /// Train or apply linear score fusion.
    Fuse(FuseArgs),
    /// EER, min/act detection cost and DET points.
    Evaluate(EvaluateArgs),
    /// Fold a RepVGG block into one 3x3 convolution.
    FuseRepvgg(FuseRepvggArgs),
    /// Pass audio through the G.711 A-law codec.
    Transcode(TranscodeArgs),
    /// Generate a seeded synthetic domain-shift dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Embeddings to transform (.tsv/.txt = text, otherwise binary).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Existing chain to apply instead of fitting one.
    #[arg(long, conflicts_with_all = ["fit_on", "length_norm", "no_length_norm"])]
    pub chain: Option<PathBuf>,
    /// Fit the chain on this set (default: the input).
    #[arg(long)]
    pub fit_on: Option<PathBuf>,
    /// Save the fitted chain here.
    #[arg(long)]
    pub save_chain: Option<PathBuf>,
    #[arg(long)]
    pub length_norm: bool,
    #[arg(long, conflicts_with = "length_norm")]
    pub no_length_norm: bool,
}

#[derive(Debug, Args)]
pub struct TrainPldaArgs {
    /// Speaker-labelled training embeddings.
    #[arg(long)]
    pub input: PathBuf,
    /// Model JSON.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the per-iteration log-likelihood here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdaptMethod {
    Coral,
    #[value(name = "coral+")]
    CoralPlus,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Unlabeled in-domain embeddings, preprocessed like the training data.
    #[arg(long)]
    pub ind: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "coral+")]
    pub method: AdaptMethod,
    /// Between-class weight (default 0.5).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Within-class weight (default 0.5).
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// PLDA model JSON.
    #[arg(long, required_unless_present = "cosine")]
    pub model: Option<PathBuf>,
    #[arg(long, conflicts_with = "model")]
    pub cosine: bool,
    #[arg(long)]
    pub enroll: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrationFlags {
    /// Key file with labels and optional partitions.
    #[arg(long)]
    pub trials: Option<PathBuf>,
    #[arg(long)]
    pub prior: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    /// Calibrate these `:`-separated partition fields separately, e.g. `0` or `0,1`.
    #[arg(long, value_delimiter = ',')]
    pub partition_fields: Option<Vec<usize>>,
    /// Use quality measures (needs --qm-enroll/--qm-test).
    #[arg(long)]
    pub qm: bool,
    /// Raw (pre-length-norm) enrollment embeddings with durations, for QMs.
    #[arg(long)]
    pub qm_enroll: Option<PathBuf>,
    #[arg(long)]
    pub qm_test: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Apply this calibration model; without it a model is trained.
    #[arg(long, conflicts_with = "model_out")]
    pub model: Option<PathBuf>,
    #[arg(long, required_unless_present = "model")]
    pub model_out: Option<PathBuf>,
    /// Calibrated scores (apply mode).
    #[arg(long, required_unless_present = "model_out")]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub flags: CalibrationFlags,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// One score file per system, all over the same trials.
    #[arg(long, required = true, num_args = 1..)]
    pub scores: Vec<PathBuf>,
    #[arg(long, conflicts_with = "model_out")]
    pub model: Option<PathBuf>,
    #[arg(long, required_unless_present = "model")]
    pub model_out: Option<PathBuf>,
    #[arg(long, required_unless_present = "model_out")]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<PathBuf>,
    #[arg(long)]
    pub prior: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Score files as `PATH` or `NAME=PATH`.
    #[arg(long, required = true, num_args = 1..)]
    pub scores: Vec<String>,
    #[arg(long)]
    pub trials: PathBuf,
    /// Machine-readable JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Write `<NAME>.det.tsv` per system into this directory.
    #[arg(long)]
    pub det_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub priors: Option<Vec<f64>>,
    #[arg(long)]
    pub c_miss: Option<f64>,
    #[arg(long)]
    pub c_fa: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FuseRepvggArgs {
    /// Block description JSON.
    #[arg(long)]
    pub block: PathBuf,
    /// Output prefix: writes `<prefix>.kernel.tnsr` and `<prefix>.bias.tnsr`.
    #[arg(long)]
    pub output: PathBuf,
    /// First write a random block with this many channels to --block.
    #[arg(long)]
    pub generate: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Spatial size of the random probe input.
    #[arg(long, default_value_t = 16)]
    pub probe_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Codec {
    Alaw,
}

#[derive(Debug, Args)]
pub struct TranscodeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "out")]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "alaw")]
    pub codec: Codec,
    /// Headerless little-endian 16-bit mono instead of WAV.
    #[arg(long)]
    pub raw: bool,
    /// Sample rate of raw input.
    #[arg(long, default_value_t = 8000)]
    pub rate: u32,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub shift: Option<f64>,
    /// Also run the full pipeline in memory and write its JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
