//! `cspm` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical abort.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cspm::ErrorClass;

#[derive(Debug, Parser)]
#[command(
    name = "cspm",
    version,
    about = "Spatiotemporal CTR model: data generation, training, evaluation, ablation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment config; omitted sections and keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed (the generator seed for `generate`, the run seed otherwise).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (defaults to `output_dir` from the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset plus its ground-truth sidecar.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// JSONL dataset; the last `eval.test_fraction` is held out.
        #[arg(long)]
        data: PathBuf,
        /// Ablation variant, e.g. `full` or `w/o_CSRL`, or a baseline (`mlp`, `din`); overrides model.variant.
        #[arg(long)]
        ablation: Option<String>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or a scores file, on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "scores")]
        checkpoint: Option<PathBuf>,
        /// One score per line, aligned with the dataset (used instead of a checkpoint).
        #[arg(long, conflicts_with = "checkpoint")]
        scores: Option<PathBuf>,
        /// Evaluate on the whole file instead of its held-out tail.
        #[arg(long)]
        all: bool,
    },
    /// Train the ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Seed count N (seeds 1..=N) or a comma-separated list.
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated variant or baseline names (default: config, else the eight grid rows).
        #[arg(long)]
        configs: Option<String>,
        /// Skip (config, seed) pairs already present in the results file.
        #[arg(long)]
        idempotent: bool,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let args: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Generate { common } => commands::generate(&common, &args),
        Command::Train {
            common,
            data,
            ablation,
            resume,
        } => commands::train(&common, &data, ablation.as_deref(), resume.as_deref(), &args),
        Command::Eval {
            common,
            data,
            checkpoint,
            scores,
            all,
        } => commands::eval(&common, &data, checkpoint.as_deref(), scores.as_deref(), all, &args),
        Command::Ablate {
            common,
            data,
            seeds,
            configs,
            idempotent,
        } => commands::ablate(&common, &data, seeds.as_deref(), configs.as_deref(), idempotent, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
