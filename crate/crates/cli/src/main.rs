//! `avt`: clustering, training, tree training and evaluation runs.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage or schema error,
//! 3 numerical abort.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Common;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] avt::Error),
    #[error("{0}: {1}")]
    At(PathBuf, avt::Error),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn at(path: &Path, e: avt::Error) -> CliError {
        CliError::At(path.to_path_buf(), e)
    }

    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> CliError {
        CliError::Core(avt::Error::Schema {
            path: path.into(),
            message: message.into(),
        })
    }

    fn exit_code(&self) -> u8 {
        let core = match self {
            CliError::Core(e) | CliError::At(_, e) => e,
            CliError::Usage(_) => return 2,
            CliError::Io(..) => return 1,
        };
        match core {
            avt::Error::Schema { .. } | avt::Error::Json(_) => 2,
            avt::Error::NonFiniteLoss { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "avt", version, about = "Verifiable training with per-group robustness radii")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Dataset root; defaults to $AVT_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.threads`.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Model file, or a tree directory.
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated radii; overrides `eps` in the config.
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster the classifier-head rows of a trained model.
    Cluster {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train one network.
    Train(TrainArgs),
    /// Train a tree of networks.
    TrainNdt(TrainArgs),
    /// Evaluate a model or tree; writes one report per radius.
    Eval(EvalArgs),
    /// Same as eval, with --eps required.
    Certify(EvalArgs),
    /// Write a Gaussian blob dataset as IDX files.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn common(a: CommonArgs) -> Common {
    Common {
        config: a.config,
        out: a.out,
        data_dir: a.data_dir.or_else(|| std::env::var_os("AVT_DATA_DIR").map(PathBuf::from)),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Cluster { common: c, model } => commands::cluster(&common(c), &model),
        Command::Train(a) => commands::train_cmd(&common(a.common), a.seed, a.threads),
        Command::TrainNdt(a) => commands::train_ndt_cmd(&common(a.common), a.seed, a.threads),
        Command::Eval(a) => commands::eval(&common(a.common), &a.model, a.eps, false),
        Command::Certify(a) => commands::eval(&common(a.common), &a.model, a.eps, true),
        Command::Synth { common: c, seed } => commands::synth(&common(c), seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
