//! `trep`: train encoders, export representations and run the evaluation
//! protocols from JSON run configurations.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trep_core::config::Protocol;
use trep_core::Error;

#[derive(Parser)]
#[command(name = "trep", version, about = "Self-supervised time-series representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write a checkpoint, history and resolved config.
    Train(TrainArgs),
    /// Export representations of a CSV dataset.
    Encode(EncodeArgs),
    /// Run an evaluation protocol on a trained checkpoint.
    Eval(EvalArgs),
    /// Write a synthetic dataset as CSV.
    Synth(SynthArgs),
}

/// Flags shared by commands that read a run configuration. Flags win over
/// the file.
#[derive(Args, Clone, Default)]
pub struct Overrides {
    /// Run seed; falls back to the config, then TREP_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset CSV, replacing the config's data source.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out CSV for classification.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, value_parser = parse_protocol)]
    pub protocol: Option<Protocol>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if needed.
    #[arg(long, default_value = "trep-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub repr_dims: Option<usize>,
    #[arg(long)]
    pub hidden_dims: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum GranularityArg {
    Timestep,
    Pooled,
    Instance,
}

#[derive(Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "timestep")]
    pub granularity: GranularityArg,
    /// Number of pooling windows for `pooled`.
    #[arg(long, default_value_t = 10)]
    pub windows: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Run configuration; defaults to the one stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "trep-eval")]
    pub out: PathBuf,
    /// Choose the anomaly threshold from the built-in grid on the validation prefix.
    #[arg(long)]
    pub tune_beta: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Generator spec as JSON, e.g. '{"kind":"ar1","n":1,"t":500,"rho":0.9}'.
    #[arg(long)]
    pub spec: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Process exit status for a library error.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numeric { .. } | Error::TrainingAborted { .. } => 4,
        Error::Dataset(_) | Error::Format(_) | Error::Csv(_) | Error::Io(_) | Error::Dimension(_) => 3,
        Error::Config(_) | Error::Checkpoint(_) | Error::Json(_) | Error::Parameter(_) | Error::Contract(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Encode(a) => commands::encode(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("trep: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
