//! Command-line surface: dataset synthesis, verification sweeps, training,
//! decoding, evaluation, and error analysis.
//!
//! Every command takes `--out`, `--seed`, and `--config`; a full `RunConfig`
//! snapshot is persisted alongside every artifact, and re-running a command
//! from its snapshot regenerates byte-identical numeric artifacts. Output
//! directories are assembled in a temporary sibling and renamed into place.

mod commands;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::model::ModelConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// bad flags, bad config, unusable inputs: exit code 1
    #[error("{0}")]
    Validation(String),
    /// failures during execution: exit code 2
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn validation<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Validation(msg.into()))
}

pub(crate) fn runtime(err: impl std::fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

/// Effective configuration of one command invocation; persisted as
/// `config.json` (the `--out` path itself is intentionally excluded so a
/// snapshot can be replayed into a fresh directory).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode: Option<DecodeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analyze_errors: Option<AnalyzeConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub data: PathBuf,
    pub roi: Vec<String>,
    pub d_range: (usize, usize),
    pub l_range: (usize, usize),
    pub reduced_dim: usize,
    pub folds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub data: PathBuf,
    /// "within" | "cross" | "auto"
    pub split_mode: String,
    pub roi: String,
    pub shuffle_fmri: bool,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub split_mode: String,
    /// "train" | "valid" | "test"
    pub split: String,
    pub beam: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateConfig {
    pub decoded: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeConfig {
    pub decoded: PathBuf,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected lo:hi, got {s}"))?;
    let lo: usize = lo.trim().parse().map_err(|_| format!("bad range start in {s}"))?;
    let hi: usize = hi.trim().parse().map_err(|_| format!("bad range end in {s}"))?;
    if lo > hi {
        return Err(format!("range start exceeds end in {s}"));
    }
    Ok((lo, hi))
}

#[derive(Parser, Debug)]
#[command(
    name = "predft",
    about = "fMRI-to-text decoding with a brain-prediction side network",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// output directory (created atomically; must not exist)
    #[arg(long)]
    out: PathBuf,
    /// RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// replay a persisted config snapshot; explicit flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic naturalistic-listening dataset
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        stories: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        voxels: Option<usize>,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        bpc_fraction: Option<f64>,
        /// planted prediction distance d*
        #[arg(long)]
        planted_distance: Option<usize>,
        /// planted prediction length l*
        #[arg(long)]
        planted_length: Option<usize>,
        #[arg(long)]
        lag_frames: Option<usize>,
        #[arg(long)]
        min_words: Option<usize>,
        #[arg(long)]
        max_words: Option<usize>,
    },
    /// Sweep prediction scores over a (d, l) grid
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// ROI group (repeatable)
        #[arg(long)]
        roi: Vec<String>,
        #[arg(long, value_parser = parse_range)]
        d_range: Option<(usize, usize)>,
        #[arg(long, value_parser = parse_range)]
        l_range: Option<(usize, usize)>,
        #[arg(long)]
        reduced_dim: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        subject: Option<String>,
    },
    /// Train the decoding model
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split_mode: Option<String>,
        #[arg(long)]
        roi: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// ablation: drop the side network entirely
        #[arg(long)]
        no_side_net: bool,
        /// chance-level control: shuffle training fMRI frame order
        #[arg(long)]
        shuffle_fmri: bool,
        #[arg(long)]
        pred_distance: Option<usize>,
        #[arg(long)]
        pred_length: Option<usize>,
        #[arg(long)]
        frames_per_sample: Option<usize>,
        #[arg(long)]
        fir_window: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
    },
    /// Autoregressively decode a split with a trained checkpoint
    Decode {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split_mode: Option<String>,
        #[arg(long)]
        split: Option<String>,
        /// beam width; 1 = greedy
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score decoded text against the truth
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// decoded.json (or a directory containing it)
        #[arg(long)]
        decoded: Option<PathBuf>,
    },
    /// Emit decoding-error position tables
    AnalyzeErrors {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        decoded: Option<PathBuf>,
    },
}

fn configure_threads() {
    if let Ok(value) = std::env::var("PREDFT_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
            }
        }
    }
}

fn load_snapshot(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("bad config {}: {e}", path.display())))
}

fn snapshot_base(common: &CommonArgs, command: &str) -> Result<RunConfig> {
    match &common.config {
        Some(path) => {
            let snapshot = load_snapshot(path)?;
            if snapshot.command != command {
                return validation(format!(
                    "config snapshot is for `{}`, not `{command}`",
                    snapshot.command
                ));
            }
            Ok(snapshot)
        }
        None => Ok(RunConfig {
            command: command.to_string(),
            seed: 0,
            synth: None,
            verify: None,
            train: None,
            decode: None,
            evaluate: None,
            analyze_errors: None,
        }),
    }
}

/// Runs `build` inside a temporary sibling of `out`, writes the config
/// snapshot, and renames into place. `out` must not already exist.
pub(crate) fn with_out_dir(
    out: &Path,
    config: &RunConfig,
    build: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    if out.exists() {
        return validation(format!("output directory {} already exists", out.display()));
    }
    let parent = out.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&parent).map_err(runtime)?;
    let name = out
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".to_string());
    let tmp = parent.join(format!(".{name}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(runtime)?;
    }
    fs::create_dir_all(&tmp).map_err(runtime)?;
    let result = build(&tmp).and_then(|()| {
        let value = serde_json::to_value(config).map_err(runtime)?;
        let json = serde_json::to_string_pretty(&value).map_err(runtime)? + "\n";
        fs::write(tmp.join("config.json"), json).map_err(runtime)?;
        fs::rename(&tmp, out).map_err(runtime)?;
        Ok(())
    });
    if result.is_err() && tmp.exists() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

/// Parses argv and runs exactly one subcommand.
/// Exit codes: 0 success, 1 validation error, 2 runtime failure.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // clap renders its own usage text; --help/--version are success
            use clap::error::ErrorKind;
            let kind = err.kind();
            let _ = err.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                0
            } else {
                1
            };
        }
    };
    configure_threads();
    let outcome = match cli.command {
        Command::Synth { .. } => commands::run_synth(cli.command),
        Command::Verify { .. } => commands::run_verify(cli.command),
        Command::Train { .. } => commands::run_train(cli.command),
        Command::Decode { .. } => commands::run_decode(cli.command),
        Command::Evaluate { .. } => commands::run_evaluate(cli.command),
        Command::AnalyzeErrors { .. } => commands::run_analyze(cli.command),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

pub use commands::{emit_report, DecodedWindow, ReportInputs};
