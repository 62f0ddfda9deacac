//! `svtk`: speaker-verification pipeline from WAV manifests to EER.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when the input data
//! is rejected. Every run echoes its resolved flags to stderr.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "svtk", version, about = "Speaker-verification toolkit", disable_help_subcommand = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Log-mel features for every utterance of a WAV manifest
    Extract(ExtractArgs),
    /// Augmented copies of every utterance of a WAV manifest
    Augment(AugmentArgs),
    /// Embeddings of a feature archive
    Embed(EmbedArgs),
    /// Write a randomly initialized training-mode model
    InitModel(InitModelArgs),
    /// Re-parameterize a training-mode model into its deploy form
    FuseModel(FuseModelArgs),
    /// Cosine scores for a trial list
    Score(ScoreArgs),
    /// Adaptive symmetric score normalization against a cohort
    Asnorm(AsnormArgs),
    /// Fit a quality-measure calibration model
    QmfTrain(QmfTrainArgs),
    /// Replace scores with calibrated quality-measure logits
    QmfApply(QmfApplyArgs),
    /// Weighted sum of score files over the same trials
    FuseScores(FuseScoresArgs),
    /// EER and minDCF of a score file
    Evaluate(EvaluateArgs),
    /// Train the toy embedding model on a synthetic corpus
    TrainToy(TrainToyArgs),
    /// Finite-difference checks of every analytic gradient
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct Threads {
    /// Worker threads (0 = one per core)
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct CohortArgs {
    /// Cohort embedding file (speaker labels required)
    #[arg(long, value_name = "PATH")]
    pub cohort: PathBuf,
    /// Imposter scores kept per side
    #[arg(long, value_name = "N", default_value_t = svtk::backend::DEFAULT_TOP_N)]
    pub top_n: usize,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Manifest of `utt_id<TAB>speaker_id<TAB>path.wav` lines
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Output feature archive
    #[arg(short, long, value_name = "PATH")]
    pub output: PathBuf,
    /// Filterbank settings as `key = value` lines
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Number of mel bands (overrides the config file)
    #[arg(long, value_name = "N")]
    pub n_mels: Option<usize>,
    /// Skip cepstral mean normalization
    #[arg(long)]
    pub no_cmn: bool,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Gain, white noise, reverberation + noise, time stretch
    Online,
    /// Gain, white noise, time stretch
    Basic,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Manifest of `utt_id<TAB>speaker_id<TAB>path.wav` lines
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Directory for the augmented WAVs and `manifest.tsv`
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Master seed; each utterance derives its own
    #[arg(long, value_name = "N")]
    pub seed: u64,
    /// Effect chain
    #[arg(long, value_enum, default_value_t = Preset::Basic)]
    pub preset: Preset,
    /// Room impulse response WAV (repeatable, online preset)
    #[arg(long, value_name = "PATH")]
    pub rir: Vec<PathBuf>,
    /// Noise WAV (repeatable, online preset)
    #[arg(long, value_name = "PATH")]
    pub noise: Vec<PathBuf>,
    /// Also write 0.9x and 1.1x speed copies under new speaker labels
    #[arg(long)]
    pub speed_perturb: bool,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Feature archive
    #[arg(long, value_name = "PATH")]
    pub features: PathBuf,
    /// Model file (training or deploy form)
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    /// Output embedding file
    #[arg(short, long, value_name = "PATH")]
    pub output: PathBuf,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Args)]
pub struct InitModelArgs {
    /// Architecture as `key = value` lines
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Initialization seed
    #[arg(long, value_name = "N")]
    pub seed: u64,
    /// Output model file
    #[arg(short, long, value_name = "PATH")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseModelArgs {
    /// Training-mode model file
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    /// Output deploy-mode model file
    #[arg(short, long, value_name = "PATH")]
    pub output: PathBuf,
    /// Seed of the random probe inputs
    #[arg(long, value_name = "N")]
    pub seed: u64,
    /// Number of probe inputs
    #[arg(long, value_name = "N", default_value_t = 8)]
    pub probes: usize,
    /// Frames per probe input
    #[arg(long, value_name = "N", default_value_t = 64)]
    pub frames: usize,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Embedding file
    #[arg(long, value_name = "PATH")]
    pub embeddings: PathBuf,
    /// Trial list
    #[arg(long, value_name = "PATH")]
    pub trials: PathBuf,
    /// Output score file (stdout when omitted)
    #[arg(short, long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Args)]
pub struct AsnormArgs {
    /// Embedding file covering every trial side
    #[arg(long, value_name = "PATH")]
    pub embeddings: PathBuf,
    /// Input score file
    #[arg(long, value_name = "PATH")]
    pub scores: PathBuf,
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Output score file (stdout when omitted)
    #[arg(short, long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Args)]
pub struct QmfTrainArgs {
    /// Embedding file covering every trial side
    #[arg(long, value_name = "PATH")]
    pub embeddings: PathBuf,
    /// Score file supplying the score feature
    #[arg(long, value_name = "PATH")]
    pub scores: PathBuf,
    /// Labeled trial list
    #[arg(long, value_name = "PATH")]
    pub trials: PathBuf,
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// L2 penalty
    #[arg(long, value_name = "X", default_value_t = 1e-4)]
    pub l2: f64,
    /// Gradient-descent iterations
    #[arg(long, value_name = "N", default_value_t = 1000)]
    pub iterations: usize,
    /// Output model (stdout when omitted)
    #[arg(short, long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Args)]
pub struct QmfApplyArgs {
    /// Embedding file covering every trial side
    #[arg(long, value_name = "PATH")]
    pub embeddings: PathBuf,
    /// Input score file
    #[arg(long, value_name = "PATH")]
    pub scores: PathBuf,
    /// Model written by qmf-train
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Output score file (stdout when omitted)
    #[arg(short, long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Args)]
pub struct FuseScoresArgs {
    /// Score file (repeatable, same trials in the same order)
    #[arg(long, value_name = "PATH", required = true)]
    pub scores: Vec<PathBuf>,
    /// One weight per score file (equal weights when omitted)
    #[arg(long, value_name = "W1,W2,...", value_delimiter = ',')]
    pub weights: Vec<f64>,
    /// Output score file (stdout when omitted)
    #[arg(short, long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Score file
    #[arg(long, value_name = "PATH")]
    pub scores: PathBuf,
    /// Labeled trial list
    #[arg(long, value_name = "PATH")]
    pub trials: PathBuf,
    /// Target prior for minDCF (repeatable)
    #[arg(long, value_name = "X", default_values_t = [0.01, 0.05])]
    pub p_target: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Base-stage settings as `key = value` lines
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Training seed
    #[arg(long, value_name = "N")]
    pub seed: u64,
    /// Follow with large-margin fine-tuning
    #[arg(long)]
    pub fine_tune: bool,
    /// Fine-tuning settings as `key = value` lines
    #[arg(long, value_name = "PATH", requires = "fine_tune")]
    pub fine_tune_config: Option<PathBuf>,
    /// Write the loss and validation history as CSV
    #[arg(long, value_name = "PATH")]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Instance seed
    #[arg(long, value_name = "N")]
    pub seed: u64,
    /// Random instances per suite
    #[arg(long, value_name = "N", default_value_t = 100)]
    pub instances: usize,
}

/// Why a run failed.
pub enum Failure {
    Usage(String),
    Data(String),
}

impl From<svtk::Error> for Failure {
    fn from(e: svtk::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

/// Resolved flags of the chosen subcommand, one `name = value` line each.
fn echo(matches: &ArgMatches) {
    let Some((name, sub)) = matches.subcommand() else { return };
    let cmd = Cli::command();
    let Some(def) = cmd.find_subcommand(name) else { return };
    eprintln!("[svtk {name}]");
    for arg in def.get_arguments() {
        if let Ok(Some(raw)) = sub.try_get_raw(arg.get_id().as_str()) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            eprintln!("{} = {}", arg.get_id(), vals.join(","));
        }
    }
}

fn run(args: impl IntoIterator<Item = OsString>) -> u8 {
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    echo(&matches);
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("svtk: usage error: {msg}");
            1
        }
        Err(Failure::Data(msg)) => {
            eprintln!("svtk: error: {}", msg.replace('\n', " "));
            2
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
