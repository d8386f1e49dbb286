//! `sparseg`: simulate sparse annotations, meta-train, tune, evaluate and
//! report few-shot segmentation experiments.
//!
//! Exit status is 0 on success, 2 for usage and configuration errors and 1
//! for runtime failures.

mod commands;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "sparseg", version, about = "Few-shot segmentation from sparse annotations")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct GlobalArgs {
    /// Experiment config (TOML); for `sparsify`, the annotation config
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the seed of the config
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run directory for checkpoints, logs, reports and charts
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Compute device; only `cpu` is available
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,

    /// Meta-gradient order
    #[arg(long, global = true, value_parser = ["first", "second"])]
    pub order: Option<String>,

    /// Epoch and batch constants to start from
    #[arg(long, global = true, value_parser = ["medical", "remote-sensing", "synthetic"])]
    pub preset: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write simulated sparse masks and provenance sidecars for a dataset
    Sparsify {
        /// Dataset directory with manifest.toml, images/ and masks/
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Meta-train (or, for the fine-tuning baseline, pre-train) and
    /// checkpoint the per-run model
    Metatrain,
    /// Adapt the checkpointed model to every fold and save the results
    Tune,
    /// Score every fold and setting and write reports.jsonl
    Eval,
    /// Render tables and charts from reports
    Report {
        /// Report files; defaults to <out>/reports.jsonl
        #[arg(long = "reports")]
        reports: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = if cli.global.device != "cpu" {
        Err(commands::Failure::Usage(format!(
            "device `{}` is not available; use `cpu`",
            cli.global.device
        )))
    } else {
        match cli.command {
            Command::Sparsify { dataset } => commands::sparsify(&cli.global, &dataset),
            Command::Metatrain => commands::metatrain(&cli.global),
            Command::Tune => commands::tune(&cli.global),
            Command::Eval => commands::eval(&cli.global),
            Command::Report { reports } => commands::report(&cli.global, &reports),
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
