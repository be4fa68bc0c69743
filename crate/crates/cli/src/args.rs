use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use filterbasis::SplitChoice;

#[derive(Debug, Parser)]
#[command(
    name = "filterbasis",
    version,
    about = "Compress convolution layers into shared filter bases"
)]
pub struct Cli {
    /// Raise log verbosity (repeatable); BASIS_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Choose m and s per layer, print the budget table and write the plan.
    Plan(PlanArgs),
    /// Fit every planned layer and write the compressed model.
    Decompose(DecomposeArgs),
    /// Compare decomposed layers against their reconstructed dense weights.
    Verify(VerifyArgs),
    /// Fine-tune bases and coefficients on a dataset.
    Train(TrainArgs),
    /// Parameter and MAC summary of one or more models.
    Report(ReportArgs),
    /// Write a seeded toy model (and optionally a dataset).
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Share {
    None,
    Block,
    Group,
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Loss {
    Mse,
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToyKind {
    /// 256-channel 3×3 residual blocks.
    Edsr,
    /// 64-channel 3×3 residual blocks.
    Srresnet,
    /// Three stages of widths 16/32/64.
    Resnet,
    /// Growth-rate-12 dense chain.
    Densenet,
    /// 1×1 convolutions only.
    Pointwise,
    /// Noisy pretrained layer plus the teacher's input/output pairs.
    Teacher,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Basis filters per layer or group (per slice for network sharing).
    #[arg(long)]
    pub m: usize,
    /// Split count, or `auto` for the rate-minimizing divisor.
    #[arg(long, default_value = "1", value_parser = parse_split)]
    pub s: SplitChoice,
    #[arg(long, value_enum, default_value_t = Share::None)]
    pub share: Share,
    /// Total basis slices for network sharing [default: number of convolutions].
    #[arg(long)]
    pub splits: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Compressed model.
    #[arg(long)]
    pub model: PathBuf,
    /// Uncompressed model; checked for matching output shape.
    #[arg(long)]
    pub original: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: usize,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<Loss>,
    /// Epochs at which the learning rate is divided by ten.
    #[arg(long, value_delimiter = ',')]
    pub decay_epochs: Option<Vec<usize>>,
    /// Drop reference weights and training settings from the output.
    #[arg(long)]
    pub export: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Model directory; repeat to compare (the first is the baseline).
    #[arg(long)]
    pub model: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(value_enum)]
    pub kind: ToyKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Residual blocks, convolutions per stage or dense layers.
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub spatial: usize,
    /// Also write a dataset of the model's own outputs on random inputs.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
}

fn parse_split(s: &str) -> Result<SplitChoice, String> {
    s.parse().map_err(|e: filterbasis::Error| e.to_string())
}
