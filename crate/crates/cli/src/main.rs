//! `auxtune`: data generation, training, sampling, evaluation and plotting
//! for auxiliary tuning experiments.
//!
//! Every option may also be given in a `key=value` file passed with
//! `--config`; flags win. Exit status is 0 on success, 2 for usage or
//! validation errors and 1 for runtime failures.

mod commands;
mod dataset;
mod settings;

use clap::{Args, Parser, Subcommand};
use settings::UsageError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "auxtune",
    version,
    about = "Auxiliary tuning of frozen language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (keyword grammar or exact Markov task).
    Datagen(DatagenArgs),
    /// Train a base language model (or the fluency scorer with --shard scorer).
    Pretrain(PretrainArgs),
    /// Train an auxiliary pathway on top of a frozen base checkpoint.
    TrainAux(TrainAuxArgs),
    /// Train the keyword-prefixed baseline from scratch.
    TrainBaseline(TrainBaselineArgs),
    /// Sample continuations from a checkpoint.
    Generate(GenerateArgs),
    /// Compute metrics for one or more checkpoints.
    Eval(EvalArgs),
    /// Plot metrics CSVs, one SVG per metric.
    Plot(PlotArgs),
    /// Run a whole pipeline in one process.
    Experiment(ExperimentArgs),
}

#[derive(Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Transformer blocks in the trained stack.
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Parameter initialization seed.
    #[arg(long)]
    pub model_seed: Option<u64>,
}

#[derive(Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Batch sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue a run from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Default)]
pub struct DecodeArgs {
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Argmax decoding.
    #[arg(long)]
    pub greedy: bool,
}

#[derive(Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// grammar | exact
    #[arg(long)]
    pub task: Option<String>,
    /// Pretraining sentences (grammar) or sequences per corpus (exact).
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Held-out sentences for the fluency scorer (grammar).
    #[arg(long)]
    pub scorer_count: Option<usize>,
    /// Keyword-conditioned training examples (grammar).
    #[arg(long)]
    pub conditional_count: Option<usize>,
    /// Dev prompts (grammar).
    #[arg(long)]
    pub dev_count: Option<usize>,
    /// Symbols (exact).
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Attributes (exact).
    #[arg(long)]
    pub attributes: Option<usize>,
    /// Sequence length (exact).
    #[arg(long)]
    pub seq_len: Option<usize>,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// pretrain | scorer
    #[arg(long)]
    pub shard: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args)]
pub struct TrainAuxArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub base_checkpoint: Option<PathBuf>,
    /// direct | feature
    #[arg(long)]
    pub variant: Option<String>,
    /// Base layers shared with the feature variant.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Scorer checkpoint; enables fluency and accuracy rows.
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args)]
pub struct TrainBaselineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub prefix: Option<String>,
    #[arg(long)]
    pub keyword: Option<String>,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write samples here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model checkpoint; repeat for several.
    #[arg(long)]
    pub checkpoint: Vec<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Metrics CSV; repeat for several series.
    #[arg(long)]
    pub csv: Vec<String>,
    /// Series label per CSV (defaults to the file stem).
    #[arg(long)]
    pub label: Vec<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// grammar | exact
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Data seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// A reduced budget that finishes in a few minutes.
    #[arg(long)]
    pub quick: bool,
}

fn exit_status(err: &anyhow::Error) -> u8 {
    use auxtune::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(
            E::InvalidConfig(_)
            | E::LayerOutOfRange { .. }
            | E::VocabMismatch(_)
            | E::VariantMismatch { .. }
            | E::UnknownWord(_)
            | E::UnknownKeyword { .. }
            | E::SequenceTooLong { .. }
            | E::TokenOutOfRange { .. }
            | E::Parse { .. }
            | E::Empty(_),
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    let result = match cli.command {
        Command::Datagen(a) => commands::datagen(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::TrainAux(a) => commands::train_aux(a),
        Command::TrainBaseline(a) => commands::train_baseline(a),
        Command::Generate(a) => commands::generate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Plot(a) => commands::plot(a),
        Command::Experiment(a) => commands::experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
