mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::Failure;

/// Byte-level recursive convolutional text autoencoder.
#[derive(Debug, Parser)]
#[command(name = "brca", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value`; later overrides win.
    #[arg(long = "override", short = 'o', global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory [default: $BRCA_OUTPUT_ROOT/<command>, else runs/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Shorthand for `--override train.seed=N --override eval.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Brca,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Eos,
    Mutate,
    Length,
    Pooling,
    Static,
    Depth,
    Lstm,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and metrics.csv.
    Train {
        #[arg(long, value_enum, default_value = "brca")]
        model: ModelKind,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Byte error and EOS statistics on the train and test corpora.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run one of the evaluation experiments.
    Experiment {
        #[arg(value_enum)]
        kind: Experiment,
        /// Trained autoencoder (required by eos, mutate, length and lstm).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Trained LSTM for the lstm comparison; trained on the fly if absent.
        #[arg(long)]
        lstm_checkpoint: Option<PathBuf>,
    },
    /// Print depth, recursion count and stage shapes for a sample length.
    Inspect {
        /// Raw sample length in bytes.
        #[arg(long, default_value_t = 1023)]
        length: usize,
    },
    /// Describe a checkpoint file.
    Checkpoint { path: PathBuf },
    /// Length statistics of a corpus file.
    Corpus { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
