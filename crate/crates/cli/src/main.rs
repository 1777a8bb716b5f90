mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "handmesh", version, about = "Fit a parametric hand mesh to 2D evidence")]
struct Cli {
    /// JSON file whose keys mirror the long flags; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedurally generated hand model asset file.
    GenToyModel(GenToyModelArgs),
    /// Render a synthetic dataset of images, masks and ground truth.
    Synth(SynthArgs),
    /// Train the linear regressor and 2D refiner.
    Train(TrainArgs),
    /// Regress and refine mesh parameters for every record of a manifest.
    Fit(FitArgs),
    /// Render a parameter vector as a mask, a shaded image or a canonical view.
    Render(RenderArgs),
    /// Compare predictions with ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenToyModelArgs {
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SynthArgs {
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// [default: 500]
    #[arg(long)]
    pub count: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory of PPM backgrounds; procedural backgrounds when absent.
    #[arg(long)]
    pub backgrounds: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// [default: 100]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// First epoch that adds self-generated records [default: 20]
    #[arg(long)]
    pub augment_after: Option<usize>,
    /// Disable self-generated records.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_augment: Option<bool>,
    /// Cap on self-generated records [default: 500]
    #[arg(long)]
    pub max_augmented: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Directory of PPM backgrounds for self-generated records.
    #[arg(long)]
    pub backgrounds: Option<PathBuf>,
    #[arg(long)]
    pub out_weights: Option<PathBuf>,
    /// Per-epoch statistics as JSON.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FitArgs {
    #[arg(long)]
    pub assets: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Dataset directory or its manifest.jsonl.
    #[arg(long)]
    pub input_manifest: Option<PathBuf>,
    /// [default: 50]
    #[arg(long)]
    pub refine_iters: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    pub refine_step: Option<f64>,
    /// Pixel threshold enabling the feature term [default: 15]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Standard deviation of Gaussian noise added to the evidence joints,
    /// pixels [default: 0]
    #[arg(long)]
    pub keypoint_noise: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory in dataset layout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory receiving one refinement trace CSV per record.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderMode {
    /// Binary silhouette (PGM).
    Mask,
    /// Shaded mesh over a flat background (PPM).
    Shaded,
    /// Mean pose and identity rotation with the given shape (PPM).
    Canonical,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RenderArgs {
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// JSON array of 63 values, or an object with a `params` array.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<RenderMode>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    /// Prediction directory written by `fit`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Ground-truth dataset directory.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Lowest PCK threshold, model units [default: 0.1]
    #[arg(long)]
    pub pck_min: Option<f64>,
    /// Highest PCK threshold, model units [default: 0.25]
    #[arg(long)]
    pub pck_max: Option<f64>,
    /// [default: 16]
    #[arg(long)]
    pub pck_steps: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::GenToyModel(a) => commands::gen_toy_model(config::resolve(&a, cfg)?),
        Command::Synth(a) => commands::synth(config::resolve(&a, cfg)?),
        Command::Train(a) => commands::train(config::resolve(&a, cfg)?),
        Command::Fit(a) => commands::fit(config::resolve(&a, cfg)?),
        Command::Render(a) => commands::render(config::resolve(&a, cfg)?),
        Command::Eval(a) => commands::eval(config::resolve(&a, cfg)?),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let err = CliError::new("usage", first.trim_start_matches("error: "));
            eprintln!("{}", err.to_line());
            std::process::exit(err.exit_code());
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", e.to_line());
        std::process::exit(e.exit_code());
    }
}
