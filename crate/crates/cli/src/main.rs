mod commands;
mod curves;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

/// Pyramidal person re-identification: toy data, training, evaluation and ablations.
#[derive(Parser, Debug)]
#[command(name = "pyreid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset (train/query/gallery containers plus manifest.csv).
    GenData(GenDataArgs),
    /// Train one model and write its trace, checkpoints and metrics.
    Train(TrainArgs),
    /// Score a checkpoint on the query/gallery splits of a dataset.
    Eval(EvalArgs),
    /// Train and evaluate every (mask, seed) pair and tabulate the results.
    Ablate(AblateArgs),
    /// Plot a trace CSV and flatten it into a long-format table.
    ExportCurves(CurvesArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Detection-failure strength in [0, 1]: shift, vertical scale and occlusion.
    #[arg(long, default_value_t = 0.0)]
    pub severity: f64,
    /// Identities in total; the first half become the train split.
    #[arg(long, default_value_t = 40)]
    pub ids: usize,
    #[arg(long, default_value_t = 10)]
    pub images_per_id: usize,
    #[arg(long, default_value_t = 2)]
    pub cameras: usize,
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
}

/// Settings shared by `train` and `ablate`. Precedence: profile, then file, then flags.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Flat `key = value` file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base settings: `desk` (CPU-sized) or `paper`.
    #[arg(long, default_value = "desk")]
    pub profile: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Enabled pyramid levels, finest first, e.g. `111111` or `000001`.
    #[arg(long)]
    pub pyramid_mask: Option<String>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Alternate random and ID-balanced batches and optimize only the ID loss.
    #[arg(long)]
    pub no_triplet: bool,
    /// Override any setting, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Evaluate a subset of the trained levels instead of the training mask.
    #[arg(long)]
    pub pyramid_mask: Option<String>,
    /// L2-normalize embeddings before ranking.
    #[arg(long)]
    pub normalize: bool,
    /// Also write metrics.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated masks, e.g. `111111,000001,100000`.
    #[arg(long)]
    pub masks: Option<String>,
    /// Comma-separated seeds; defaults to the configured seed.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Args, Debug)]
pub struct CurvesArgs {
    /// Trace CSV written by `train`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            let err = CliError::usage(first.trim_start_matches("error: "));
            eprintln!("{err}");
            return ExitCode::from(err.code as u8);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::ExportCurves(a) => curves::export(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.code as u8)
        }
    }
}
