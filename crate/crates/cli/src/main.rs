//! `safe`: synthetic data, fine-tuning, evaluation, cache adapter and point
//! matching from the command line. Results land as JSON in the output
//! directory; exit code 2 means a configuration problem, 3 a data problem.

mod commands;
mod reports;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "safe", version, about = "Few-shot fine-tuning of an attention-pooling layer")]
struct Cli {
    /// Arithmetic precision for everything after loading.
    #[arg(long, value_enum, default_value_t = Precision::F32, global = true)]
    precision: Precision,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Write the planted-parts synthetic dataset.
    GenSynth(GenSynthArgs),
    /// Fine-tune with a single learning rate and weight decay per fold.
    Train(TrainArgs),
    /// Fine-tune over the learning-rate and weight-decay grid per fold.
    Grid(TrainArgs),
    /// Score a split with the original layer or a blended checkpoint.
    Eval(EvalArgs),
    /// Build, tune and score the key-value cache for each fold of a run.
    Cache(CacheArgs),
    /// Match a point between two feature maps and export the heatmap.
    Correspond(CorrespondArgs),
    /// Summarize a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub pool_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub parts: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Args)]
pub struct FoldArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training shots per class.
    #[arg(long, default_value_t = 4)]
    pub shots: usize,
    /// One fold per seed.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub folds: Vec<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: FoldArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with trainer settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lr_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub wd_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the original layer only.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub zero_shot: bool,
    /// Fine-tuned checkpoint directory to blend with the original layer.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Original,
    Blended,
}

#[derive(Args)]
pub struct CacheArgs {
    /// Directory written by `train` or `grid`. Required for blended mode.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Used with `--mode original` when no run is given.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub shots: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub folds: Vec<u64>,
    /// Defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Blended)]
    pub mode: ModeArg,
    #[arg(long, value_delimiter = ',', default_values_t = safe_core::cache::DEFAULT_ALPHAS)]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = safe_core::cache::DEFAULT_GAMMAS)]
    pub gammas: Vec<f64>,
    /// Blend weight when no run supplies one.
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Args)]
pub struct CorrespondArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Column of the query point, in upsampled coordinates.
    #[arg(long)]
    pub x: usize,
    /// Row of the query point, in upsampled coordinates.
    #[arg(long)]
    pub y: usize,
    /// Upsampled grid as HxW; defaults to the larger of the two inputs.
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let p = cli.precision;
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a),
        Command::Train(a) => commands::train(&a, p, false),
        Command::Grid(a) => commands::train(&a, p, true),
        Command::Eval(a) => commands::eval(&a, p),
        Command::Cache(a) => commands::cache(&a, p),
        Command::Correspond(a) => commands::correspond(&a, p),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let text = e.to_string().replace('\n', " ");
            eprintln!("error: {text}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
