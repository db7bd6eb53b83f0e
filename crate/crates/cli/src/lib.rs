//! The `utts` command-line tool.

pub mod commands;
pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config keys or values.
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<unet_tts::Error> for Failure {
    fn from(e: unet_tts::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "utts", version, about = "Synthetic-corpus one-shot voice cloning: data, training, synthesis, evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file; same layout as the run.json written into every output directory.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.learning_rate=1e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for this subcommand's randomness (corpus, training or evaluation). Defaults to $UTTS_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Corpus directory (config `paths.corpus`).
    #[arg(long, global = true, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    /// Also render PNG figures next to the CSVs.
    #[arg(long, global = true)]
    pub png: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from a checkpoint of the same stage up to the configured step count.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Trained (stage 2) checkpoint. Default: <paths.runs>/transfer/best.utts.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    /// Report directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-speaker corpus.
    GenCorpus {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Stage 1: content encoder, duration predictor and speaker-table decoder.
    Pretrain(TrainArgs),
    /// Stage 2: style encoder and mel decoder on top of a stage-1 checkpoint.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        /// Stage-1 checkpoint. Default: <paths.runs>/pretrain/best.utts.
        #[arg(long, value_name = "CKPT")]
        from: Option<PathBuf>,
        /// Feed the decoder only the deepest style statistics.
        #[arg(long)]
        single_level_stats: bool,
        /// Keep training the duration predictor (frozen by default).
        #[arg(long)]
        train_duration: bool,
    },
    /// Synthesize a phoneme string in the voice and style of a corpus utterance.
    Synth {
        /// Space-separated phoneme symbols, e.g. "sil v0 u1 v3 sil".
        #[arg(long)]
        text: String,
        /// Reference utterance id from the corpus manifest.
        #[arg(long = "ref", value_name = "UTTERANCE")]
        reference: String,
        /// Output mel CSV; a JSON sidecar with the durations is written beside it.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
    },
    /// Matched vs mismatched speaker MCD over clone-speaker references.
    EvalMcd {
        #[command(flatten)]
        args: EvalArgs,
        #[arg(long)]
        texts_per_cell: Option<usize>,
        /// Score a freshly initialized model instead of the checkpoint.
        #[arg(long)]
        null: bool,
    },
    /// Per-style duration, energy and F0 distributions of synthesized speech.
    EvalDist {
        #[command(flatten)]
        args: EvalArgs,
        #[arg(long)]
        texts: Option<usize>,
    },
    /// Per-level style statistics of clone speakers: PCA projections and separability.
    InspectEmbed {
        #[command(flatten)]
        args: EvalArgs,
        /// Embed every style instead of neutral only.
        #[arg(long)]
        all_styles: bool,
    },
    /// Paired stage-2 runs with all vs deepest-only style statistics.
    Ablate {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long, value_name = "CKPT")]
        from: Option<PathBuf>,
    },
    /// Finite-difference check of every layer and both training losses.
    GradCheck {
        /// Optional directory for the per-case CSV.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
