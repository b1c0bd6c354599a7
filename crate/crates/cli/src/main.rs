//! `eraser`: data generation, two-stage training, inference, evaluation and
//! guidance sweeps for the toy removal model.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use env_logger::Env;

#[derive(Parser, Debug)]
#[command(name = "eraser", version, about = "Object-and-effect removal on a procedural toy world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory of this command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Inputs {
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint root written by the training commands.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Sampling {
    /// Which trained weights to use.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2), default_value_t = 2)]
    pub stage: u8,
    /// Text guidance scale.
    #[arg(long)]
    pub w_txt: Option<f32>,
    /// Mask guidance scale.
    #[arg(long)]
    pub w_m: Option<f32>,
    /// Number of Euler steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Noise level at which sampling hands over from the Locator to the Preserver.
    #[arg(long)]
    pub boundary: Option<f32>,
    /// Run both experts, or one expert at every noise level.
    #[arg(long, value_enum, default_value_t = ExpertChoice::Pair)]
    pub expert: ExpertChoice,
    /// Defaults to ld-cfg for stage 2 and mc-cfg for stage 1.
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerChoice>,
    /// Dataset split to run on.
    #[arg(long, value_enum)]
    pub split: Option<SplitChoice>,
    /// Use only the first N samples of the split.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExpertChoice {
    Locator,
    Preserver,
    #[default]
    Pair,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerChoice {
    LdCfg,
    McCfg,
    ConditionalOnly,
    MaskOnly,
    TextOnly,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Misaligned,
    Test,
    Ood,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train, misaligned, test and out-of-distribution splits.
    GenData,
    /// Train the Locator and/or Preserver with conditional dropout.
    TrainStage1 {
        #[command(flatten)]
        inputs: Inputs,
        /// Expert(s) to train.
        #[arg(long, value_enum, default_value_t = ExpertChoice::Pair)]
        expert: ExpertChoice,
    },
    /// Train the fusion layers of both experts on the three-branch pass.
    TrainStage2 {
        #[command(flatten)]
        inputs: Inputs,
        /// Stage II step budget.
        #[arg(long)]
        steps: Option<usize>,
        /// Update the backbone as well as the fusion layers.
        #[arg(long)]
        unfreeze_base: bool,
    },
    /// Remove objects from a split and write the outputs and per-sample scores.
    Infer {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Score a sampler on a split and write an evaluation report.
    Eval {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Evaluate multi-condition guidance over a grid of (w_txt, w_m).
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        sampling: Sampling,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(Env::new().filter_or("GENERASER_LOG", "warn")).init();
    let cli = Cli::parse();
    let common = &cli.common;
    let result = match cli.command {
        Command::GenData => commands::gen_data(common),
        Command::TrainStage1 { inputs, expert } => commands::train_stage1(common, &inputs, expert),
        Command::TrainStage2 { inputs, steps, unfreeze_base } => commands::train_stage2(common, &inputs, steps, unfreeze_base),
        Command::Infer { inputs, sampling } => commands::infer(common, &inputs, &sampling),
        Command::Eval { inputs, sampling } => commands::eval(common, &inputs, &sampling),
        Command::Sweep { inputs, sampling } => commands::sweep(common, &inputs, &sampling),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<eraser_core::Error>().map_or("error", |c| c.kind());
            let report = serde_json::json!({ "error": { "kind": kind, "message": format!("{e:#}") } });
            eprintln!("{report}");
            ExitCode::from(1)
        }
    }
}
