mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Correlated-property VAE pipeline on synthetic shape images.
#[derive(Parser, Debug)]
#[command(name = "corrvae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat JSON config with dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "CORRVAE_OUT")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a train/test split of the synthetic shapes.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        test_n: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        with_shape: bool,
    },
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data; regenerated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Prediction, control, avgMI and mask-recovery metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sweep one coordinate of w or w′ and decode every step.
    Traverse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// `w:<i>` or `wprime:<j>`.
        #[arg(long)]
        index: String,
        #[arg(long, allow_hyphen_values = true, default_value_t = -3.0)]
        lo: f64,
        #[arg(long, allow_hyphen_values = true, default_value_t = 3.0)]
        hi: f64,
        #[arg(long, default_value_t = 9)]
        steps: usize,
    },
    /// Generate images that satisfy a constraint spec.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Export the learned mask and the property pairs it links.
    InspectMask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Usage errors exit with 1, everything that fails while running with 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<corrvae::Error> for Failure {
    fn from(e: corrvae::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::dispatch(cli.command, &argv) {
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
