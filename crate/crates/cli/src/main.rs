//! `gridner`: dataset statistics, pre-training, fine-tuning, evaluation,
//! prediction and gradient checks from the command line.
//!
//! Exit codes: 0 on success, 1 when a check or metric fails, 2 on usage,
//! configuration or data errors.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<gridner::Error> for Failure {
    fn from(e: gridner::Error) -> Self {
        match e {
            gridner::Error::NonFinite(_) => Failure::check(e.to_string()),
            _ => Failure::usage(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "gridner", version, about = "Grid-based MRC tagger for nested medical entities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and write entity and nesting statistics.
    Stats {
        /// Corpus file (training split when --dev/--test are given).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Output directory for stats.json and stats.md.
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-LM pre-training of the encoder on the configured texts.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fine-tune on the training split, selecting the best dev epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Take encoder weights and vocabulary from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus and write the metrics report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score with the gold labels instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Print predicted entities as JSON.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        text: Option<String>,
        /// One sentence per line; prints one JSON array per line.
        #[arg(long = "in", value_name = "FILE")]
        input: Option<PathBuf>,
    },
    /// Finite-difference checks of every op and of the full loss.
    Gradcheck {
        /// Run only this row.
        #[arg(long)]
        op: Option<String>,
        /// Corrupt one backward rule (negative control).
        #[arg(long, value_name = "SITE")]
        inject_fault: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Stats { data, dev, test, out } => commands::stats(&data, dev.as_deref(), test.as_deref(), &out),
        Command::Pretrain { config, init } => commands::pretrain(&config, init.as_deref()),
        Command::Train { config, init } => commands::train(&config, init.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            data,
            oracle,
        } => commands::eval(&config, checkpoint.as_deref(), &data, oracle),
        Command::Predict {
            checkpoint,
            text,
            input,
        } => commands::predict(&checkpoint, text.as_deref(), input.as_deref()),
        Command::Gradcheck { op, inject_fault, seed } => commands::gradcheck(op.as_deref(), inject_fault.as_deref(), seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
