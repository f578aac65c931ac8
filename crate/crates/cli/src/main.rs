mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "stdiffusion", version, about = "Seasonal-trend diffusion model for time-series windows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// TOML (or resolved JSON) run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint, the resolved config and the loss curve.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Draw windows from a trained checkpoint.
    Sample {
        /// Checkpoint directory.
        checkpoint: PathBuf,
        /// Number of windows.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Score synthetic windows against real data.
    Evaluate {
        /// Real data: a CSV file or a sample directory.
        real: PathBuf,
        /// Sample directory.
        samples: PathBuf,
        /// Evaluation trials; defaults to the configured value.
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Dump trend/seasonal components, kernel weights and the wavelet table.
    Decompose {
        /// CSV dataset; defaults to `data.path` of the configuration.
        dataset: Option<PathBuf>,
        /// Checkpoint directory; a freshly initialised model is used if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// PCA, t-SNE and density tables and SVG figures.
    Plot {
        /// Real data: a CSV file or a sample directory.
        real: PathBuf,
        /// Sample directory.
        samples: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code.clamp(0, 255) as u8);
        }
    };
    let result = match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Sample { checkpoint, n, common } => commands::sample(&checkpoint, n, &common),
        Command::Evaluate {
            real,
            samples,
            trials,
            common,
        } => commands::evaluate(&real, &samples, trials, &common),
        Command::Decompose {
            dataset,
            checkpoint,
            common,
        } => commands::decompose(dataset.as_deref(), checkpoint.as_deref(), &common),
        Command::Plot { real, samples, common } => commands::plot(&real, &samples, &common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}
