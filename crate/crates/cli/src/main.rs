//! `dpcnet`: train, run, evaluate and verify the deraining network.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration or checkpoint
//! error, 3 data error, 4 non-finite loss, 5 gradient check failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::CliError;
use crate::config::{RunConfig, SEED_ENV};

#[derive(Parser, Debug)]
#[command(name = "dpcnet", version, about = "Dual-path image deraining network")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on `data.root`, writing the log and checkpoints to `out.dir`.
    Train,

    /// Derain one PNG or every PNG in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PNG file or a directory of PNGs.
        #[arg(long)]
        input: PathBuf,
        /// Receives `<id>_derained.png` per input.
        #[arg(long)]
        output: PathBuf,
    },

    /// Luma PSNR/SSIM of predictions against ground truth.
    Eval {
        /// Directory of `<id>.png` or `<id>_derained.png`.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of `<id>.png`, or a corpus root with a `clean/` folder.
        #[arg(long)]
        gt: PathBuf,
    },

    /// Finite-difference check of every op class and the whole network.
    Gradcheck {
        /// Scales the backward rule of this op to prove the check notices.
        #[arg(long, hide = true, value_name = "OP")]
        corrupt_backward: Option<String>,
    },

    /// Write a synthetic rainy/clean corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        count: usize,
        /// Index of the first pair; held-out sets start after the training set.
        #[arg(long, default_value_t = 0)]
        first_index: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed_env = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides, seed_env.as_deref())?;
    print!("# resolved configuration\n{}", cfg.render());
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Infer {
            checkpoint,
            input,
            output,
        } => commands::infer(&cfg, &checkpoint, &input, &output),
        Command::Eval { pred, gt } => commands::eval(&pred, &gt),
        Command::Gradcheck { corrupt_backward } => commands::gradcheck(&cfg, corrupt_backward.as_deref()),
        Command::Synth {
            out,
            count,
            first_index,
            size,
            seed,
        } => commands::synth(&out, count, first_index, size, seed),
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
