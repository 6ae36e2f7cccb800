mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, ScorerName, WhereName};

/// Gaze-aligned layer probing, single-layer adapters and contrastive
/// value-vector steering for small transformers.
#[derive(Debug, Parser)]
#[command(name = "cogsteer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Layer to fine-tune, steer, or evaluate (overrides the config).
    #[arg(long, global = true)]
    layer: Option<usize>,

    /// Steering strength.
    #[arg(long, global = true)]
    alpha: Option<f64>,

    /// Adapter placement for `finetune`.
    #[arg(long = "where", value_enum, global = true)]
    where_: Option<WhereName>,

    /// Toxicity scorer for `detox-eval`.
    #[arg(long, value_enum, global = true)]
    scorer: Option<ScorerName>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain a toy language model on a text corpus.
    TrainBase,
    /// Correlate per-layer hidden states with gaze measures.
    Probe,
    /// Pick the steering layer by fine-tuning one adapter per candidate.
    SelectLayer,
    /// Fine-tune adapters at one layer, the last layer, or all layers.
    Finetune,
    /// Generate a continuation, optionally steered against a contrast model.
    Generate,
    /// Average maximum toxicity, unsteered and steered per layer.
    DetoxEval,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        layer: cli.layer,
        alpha: cli.alpha,
        where_: cli.where_,
        scorer: cli.scorer,
    };
    let result = config::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::TrainBase => commands::train_base(cfg, &overrides),
        Command::Probe => commands::probe(cfg, &overrides),
        Command::SelectLayer => commands::select(cfg, &overrides),
        Command::Finetune => commands::finetune_cmd(cfg, &overrides),
        Command::Generate => commands::generate_cmd(cfg, &overrides),
        Command::DetoxEval => commands::detox(cfg, &overrides),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
