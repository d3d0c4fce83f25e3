mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use demandcast::dataset::{DemandModality, Week};
use demandcast::Error;

/// Weekly demand forecasting: synthetic data, AR-MDN and Boosted Cubist
/// training, evaluation and ablations.
#[derive(Debug, Parser)]
#[command(name = "demandcast", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Directory that every relative input and output path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    /// Worker threads for gradient and split search.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// TOML config; command-line flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, env = "DEMANDCAST_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic weekly sales dataset.
    Generate(GenerateArgs),
    /// Fit a network (global or per-vertical) or a Cubist committee.
    Train(TrainArgs),
    /// Forecast one test window and write the point forecasts.
    Forecast(ForecastArgs),
    /// Score a model or baseline on test windows.
    Evaluate(EvaluateArgs),
    /// Train and score every variant on shared windows.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub skus: Option<usize>,
    #[arg(long)]
    pub verticals: Option<usize>,
    #[arg(long)]
    pub regions: Option<usize>,
    #[arg(long)]
    pub weeks: Option<usize>,
    #[arg(long, value_parser = parse_modality)]
    pub modality: Option<DemandModality>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value = "data.csv")]
    pub output: PathBuf,
}

fn parse_modality(s: &str) -> Result<DemandModality, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Armdn,
    Cubist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Global,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Statistic {
    Mean,
    Median,
}

#[derive(Debug, Default, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Network variant: armdn, r-mdn, a-mdn or ar.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub mixtures: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Weeks held out from the end of each series for model selection.
    #[arg(long)]
    pub validation_weeks: Option<usize>,
    /// Cubist committee size (M).
    #[arg(long)]
    pub committees: Option<usize>,
    /// Cubist neighbor count (k); 0 disables the correction.
    #[arg(long)]
    pub neighbors: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "data.csv")]
    pub data: PathBuf,
    /// Last week used for training; later weeks are ignored.
    #[arg(long)]
    pub train_end: Option<Week>,
    #[arg(long, value_enum, default_value_t = ModelKind::Armdn)]
    pub model: ModelKind,
    #[arg(long, value_enum, default_value_t = Stage::Global)]
    pub stage: Stage,
    /// Vertical to fine-tune on (finetune stage).
    #[arg(long, required_if_eq("stage", "finetune"))]
    pub vertical: Option<String>,
    /// Global checkpoint to start fine-tuning from.
    #[arg(long, default_value = "model.json")]
    pub init: PathBuf,
    /// Feature schema: written by the global stage and Cubist, read by fine-tuning.
    #[arg(long, default_value = "schema.json")]
    pub schema: PathBuf,
    /// Output checkpoint; defaults to model.json, model-<vertical>.json or cubist.json.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Train on series summed over regions.
    #[arg(long)]
    pub national: bool,
    #[command(flatten)]
    pub flags: ModelFlags,
}

#[derive(Debug, Args)]
pub struct ModelInputs {
    #[arg(long, default_value = "data.csv")]
    pub data: PathBuf,
    /// Network or Cubist checkpoint.
    #[arg(long, default_value = "model.json")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "schema.json")]
    pub schema: PathBuf,
    /// Per-vertical network replacing the global one, as VERTICAL=PATH.
    #[arg(long = "vertical-model")]
    pub vertical_models: Vec<String>,
    /// Forecast national series and split them across regions by recent sales ratios.
    #[arg(long)]
    pub fc_split: bool,
    /// Point forecast taken from the predicted mixture.
    #[arg(long, value_enum, default_value_t = Statistic::Mean)]
    pub statistic: Statistic,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// Last observed week; forecasts start the week after.
    #[arg(long)]
    pub train_end: Week,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value = "forecast.csv")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// Score the last-observed-demand baseline instead of a checkpoint.
    #[arg(long)]
    pub variant: Option<String>,
    /// Comma-separated last training weeks, one test window each.
    #[arg(long)]
    pub train_ends: Option<String>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Report the teacher-forced NLL over the training cells instead of forecasting.
    #[arg(long)]
    pub teacher_forced: bool,
    /// Training cut-off for --teacher-forced.
    #[arg(long)]
    pub train_end: Option<Week>,
    #[arg(long)]
    pub validation_weeks: Option<usize>,
    /// Prefix of the report files.
    #[arg(long, default_value = "report")]
    pub prefix: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, default_value = "data.csv")]
    pub data: PathBuf,
    /// Comma-separated variants; defaults to all six.
    #[arg(long)]
    pub variants: Option<String>,
    #[arg(long)]
    pub train_ends: Option<String>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[command(flatten)]
    pub flags: ModelFlags,
    #[arg(long, default_value = "ablation.json")]
    pub output: PathBuf,
}

/// Process exit status per error class.
fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return if err.chain().any(|c| c.is::<std::io::Error>()) { 4 } else { 1 };
    };
    match e {
        Error::Io(_) => 4,
        Error::SchemaMismatch { .. } | Error::Version { .. } | Error::Json(_) | Error::Shape(_) => 5,
        Error::Diverged { .. } | Error::AllMasked => 6,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
