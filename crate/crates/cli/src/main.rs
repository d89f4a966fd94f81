//! `orpit`: batch front end for recursive OR-PIT separation.

mod commands;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "orpit", version, about = "Recursive single-channel source separation")]
pub struct Cli {
    /// Worker threads for per-mixture work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic mixture dataset (WAV files plus a JSONL manifest).
    SynthData(SynthArgs),
    /// Train a separator with the OR-PIT objective.
    Train(TrainArgs),
    /// Fine-tune a separator on two recursion steps of 3-source mixtures.
    Finetune(FinetuneArgs),
    /// Separate one WAV file recursively.
    Separate(SeparateArgs),
    /// Estimate source counts with the stop classifier.
    Count(CountArgs),
    /// Score a separator on a manifest (SI-SNRi / SDRi report).
    Evaluate(EvaluateArgs),
    /// Dominant-source extraction against many attenuated interferers.
    DominantEval(DominantArgs),
    /// Train the binary stop classifier on separator residuals.
    TrainStopper(TrainStopperArgs),
    /// Train the direct multiclass source-count baseline.
    TrainCounter(TrainCounterArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mixtures per source count, e.g. `2:1000,3:1000`.
    #[arg(long, default_value = "2:100,3:100")]
    pub counts: String,
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Mixing SNR range in dB, `lo:hi`.
    #[arg(long, default_value = "-2.5:2.5")]
    pub snr: String,
}

#[derive(Args, Debug)]
pub struct ModelShape {
    #[arg(long, default_value_t = 64)]
    pub n_basis: usize,
    #[arg(long, default_value_t = 64)]
    pub mask_channels: usize,
    #[arg(long, default_value_t = 16)]
    pub enc_kernel: usize,
    #[arg(long, default_value_t = 8)]
    pub enc_stride: usize,
    /// Comma-separated dilations, one per mask layer.
    #[arg(long, default_value = "1,2,4,8")]
    pub dilations: String,
    #[arg(long, default_value_t = 8000)]
    pub segment_len: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Train on random crops of this many samples.
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Per-epoch CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub shape: ModelShape,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub crop: Option<usize>,
    /// Treat the first residual as a constant input to the second step.
    #[arg(long)]
    pub stop_gradient: bool,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct StopperArgs {
    /// `fixed:J`, `oracle` (`oracle:N` for single files) or `classifier`.
    #[arg(long, default_value = "oracle")]
    pub stopper: String,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Override the model's segment length for overlap-add.
    #[arg(long)]
    pub segment_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SeparateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub stop: StopperArgs,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub classifier: PathBuf,
    /// A single WAV file to count.
    #[arg(long = "in", conflicts_with = "manifest")]
    pub input: Option<PathBuf>,
    /// Score counting accuracy over a manifest instead.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// JSON report path (manifest mode).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Score the ideal-binary-mask oracle instead of a model.
    #[arg(long)]
    pub ibm: bool,
    #[command(flatten)]
    pub stop: StopperArgs,
}

#[derive(Args, Debug)]
pub struct DominantArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated interferer counts.
    #[arg(long, default_value = "1,5,10,20")]
    pub interferers: String,
    #[arg(long, default_value_t = 50)]
    pub per_case: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    /// CSV output (stdout when absent).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ClassifierTrainArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub n_mels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainStopperArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output classifier checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub train: ClassifierTrainArgs,
}

#[derive(Args, Debug)]
pub struct TrainCounterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k_max: usize,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub train: ClassifierTrainArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ORPIT_LOG", "warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
