//! `selfcross`: guided sampling on the toy denoiser, offline trace analysis,
//! VQA faithfulness scoring and the gradient check.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod analyze;
mod config;
mod generate;
mod gradcheck;
mod score;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "selfcross", version, about = "Self-cross attention guidance toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run guided sampling on the toy denoiser and write attention traces.
    Generate(generate::Args),
    /// Recompute guidance losses from a SCAT attention trace.
    Analyze(analyze::Args),
    /// Score generated images with a vision-language model.
    Score(score::Args),
    /// Compare the analytic loss gradient with finite differences.
    Gradcheck(gradcheck::Args),
}

/// Invalid input detected after argument parsing; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => generate::run(args),
        Command::Analyze(args) => analyze::run(args),
        Command::Score(args) => score::run(args),
        Command::Gradcheck(args) => gradcheck::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            eprintln!("run `selfcross --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
