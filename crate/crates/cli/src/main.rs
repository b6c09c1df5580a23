mod commands;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// V1 front-end experiments: sample filter banks, train backends, measure
/// corruption robustness and analyze channel responses.
#[derive(Debug, Parser)]
#[command(name = "vone", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample receptive-field parameters and build a filter bank.
    Sample(SampleArgs),
    /// Write bank kernels as PGM images.
    DumpKernels(DumpKernelsArgs),
    /// Compute V1 activations for a directory of images.
    Respond(RespondArgs),
    /// Train a backend on top of a fixed bank.
    Train(TrainArgs),
    /// Clean and corrupted top-1 accuracy of trained checkpoints.
    Eval(EvalArgs),
    /// Write a corrupted copy of an image tree.
    Corrupt(CorruptArgs),
    /// Response statistics, binning and cross-variant correlations.
    Analyze(AnalyzeArgs),
    /// Collate accuracies and correlations into one summary file.
    Report(ReportArgs),
    /// Generate the synthetic grating dataset.
    SynthData(SynthDataArgs),
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// `bio` or `uniform`.
    #[arg(long)]
    pub regime: vone::sampling::Regime,
    #[arg(long, default_value_t = 0, conflicts_with = "seeds")]
    pub seed: u64,
    /// One bank per seed, written to `<out>/seed_<s>/bank.bin`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: PathBuf,
    /// Distribution table for the Biological regime.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub n_simple: usize,
    #[arg(long, default_value_t = 256)]
    pub n_complex: usize,
    /// `log` or `linear` spacing of uniform spatial frequencies.
    #[arg(long, default_value = "log")]
    pub sf_scale: String,
    #[arg(long, default_value_t = 32.0)]
    pub ppd: f64,
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    #[arg(long, default_value_t = 25)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = 64)]
    pub input_size: usize,
}

#[derive(Debug, Args)]
pub struct DumpKernelsArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Kernel indices; all by default.
    #[arg(long, value_delimiter = ',')]
    pub kernels: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct RespondArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// A split directory with one sub-directory per class.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use at most this many images, in directory order.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Store only per-channel statistics, not the activation maps.
    #[arg(long)]
    pub stats_only: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Bank file, or a directory holding `seed_<s>/bank.bin` per seed.
    #[arg(long)]
    pub bank: PathBuf,
    /// Dataset root with train and val splits.
    #[arg(long)]
    pub data: PathBuf,
    /// Training config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// One checkpoint per seed in `<out>/seed_<s>`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value = "train")]
    pub train_split: String,
    #[arg(long, default_value = "val")]
    pub val_split: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory, or a directory of `seed_<s>` checkpoints.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Evaluation split directory.
    #[arg(long)]
    pub data: PathBuf,
    /// `all`, `none`, or a comma-separated list of kinds.
    #[arg(long, default_value = "all")]
    pub corruptions: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub severities: Vec<u8>,
    /// Severity constants (TOML).
    #[arg(long)]
    pub corruption_config: Option<PathBuf>,
    /// Seed of the corruption noise.
    #[arg(long, default_value_t = 0)]
    pub corruption_seed: u64,
    /// Read corrupted images from `<dir>/<kind>/<severity>/` instead of
    /// generating them.
    #[arg(long)]
    pub precorrupted: Option<PathBuf>,
    /// Value of the `model` column; defaults to the checkpoint directory name.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub severity: u8,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// One checkpoint, or two to compare.
    #[arg(long, required = true, num_args = 1)]
    pub ckpt: Vec<PathBuf>,
    /// Bank per checkpoint; defaults to the copy stored in the checkpoint.
    #[arg(long, num_args = 1)]
    pub bank: Vec<PathBuf>,
    /// Variant name per checkpoint.
    #[arg(long, num_args = 1)]
    pub name: Vec<String>,
    /// Split directory supplying the statistics batch.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = vone::analysis::STATS_BATCH)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub activation_bins: usize,
    #[arg(long, default_value_t = 4)]
    pub sparseness_bins: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Analysis directory; the summary is written there unless `--out` is given.
    #[arg(long)]
    pub analysis: Option<PathBuf>,
    /// Results CSVs from `eval`.
    #[arg(long, num_args = 1)]
    pub results: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    pub val_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

/// Argument combinations clap cannot check.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = match &cli.command {
        Command::Sample(_) => "sample",
        Command::DumpKernels(_) => "dump-kernels",
        Command::Respond(_) => "respond",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Corrupt(_) => "corrupt",
        Command::Analyze(_) => "analyze",
        Command::Report(_) => "report",
        Command::SynthData(_) => "synth-data",
    };
    let result = match cli.command {
        Command::Sample(a) => commands::sample(a),
        Command::DumpKernels(a) => commands::dump_kernels(a),
        Command::Respond(a) => commands::respond(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Corrupt(a) => commands::corrupt(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Report(a) => report::report(a),
        Command::SynthData(a) => commands::synth_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e.downcast_ref::<UsageError>().is_some();
            let err = serde_json::json!({
                "error": {
                    "command": name,
                    "kind": if usage { "usage" } else { "runtime" },
                    "message": e.to_string(),
                    "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
                }
            });
            eprintln!("{err}");
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
