//! `hetpre`: ingest datasets, generate planted graphs, pre-train, evaluate
//! and export embeddings.
//!
//! Metrics go to stdout as `key<TAB>value` lines; warnings and errors go to
//! stderr. The exit code encodes the error class.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "hetpre", version, about = "Self-supervised pre-training on heterogeneous graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a text dataset directory and pack it into a binary bundle.
    Ingest(IngestArgs),
    /// Write a planted-partition dataset directory.
    Synth(SynthArgs),
    /// Pre-train the encoder and write checkpoint, embeddings and report.
    Pretrain(PretrainArgs),
    /// Score frozen embeddings against ground-truth labels.
    Eval(EvalArgs),
    /// Recompute embeddings from a checkpoint.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Dataset directory (schema.toml, *.edges, *.features, optional *.labels).
    dataset: PathBuf,
    /// Output bundle path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Generator seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// TOML file with generator parameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of planted blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// Object types as `NAME:COUNT,...`; the first is the hub.
    #[arg(long)]
    types: Option<String>,
    /// Link probability inside a block.
    #[arg(long)]
    p_in: Option<f64>,
    /// Link probability across blocks.
    #[arg(long)]
    p_out: Option<f64>,
    /// Feature width (at least the block count).
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Standard deviation of the feature noise.
    #[arg(long)]
    feature_noise: Option<f64>,
    /// Link every pair of types instead of a hub-centered star.
    #[arg(long)]
    full_schema: bool,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Dataset bundle or text directory.
    dataset: PathBuf,
    /// TOML training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug, Default)]
struct TrainOverrides {
    /// Run seed (initial LPA, initialization, holdout).
    #[arg(long)]
    seed: Option<u64>,
    /// Warm-up epochs against the initial labels.
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Joint epochs after warm-up.
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Width of every encoder layer.
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    /// Sweep cap for the initial label propagation.
    #[arg(long)]
    lpa_max_iters: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Classify,
    Cluster,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Embedding file (`.bin`) or a pretrain output directory.
    #[arg(long)]
    embeddings: PathBuf,
    /// Dataset bundle/directory with labels, or a `global_id<TAB>class` file.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum, default_value_t = Task::Classify)]
    task: Task,
    /// Training fractions in percent, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![4.0, 6.0, 8.0])]
    fractions: Vec<f64>,
    /// Number of evaluation seeds to average over.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// First evaluation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// k-means restarts per seed.
    #[arg(long, default_value_t = 10)]
    restarts: usize,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset the checkpoint was trained on.
    #[arg(long)]
    dataset: PathBuf,
    /// Output file; `.tsv` selects text, anything else the binary format.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    hetpre::par::init_threads_from_env();
    let outcome = std::panic::catch_unwind(|| match cli.command {
        Command::Ingest(a) => commands::ingest(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Export(a) => commands::export(&a),
    });
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            let class = e.class();
            eprintln!("error[{}]: {e}", class.name());
            ExitCode::from(class.exit_code() as u8)
        }
        Err(_) => {
            eprintln!("error[internal]: unexpected panic");
            ExitCode::from(70)
        }
    }
}
