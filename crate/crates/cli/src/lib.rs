//! Command-line driver: every subcommand loads its inputs, runs one
//! pipeline of the `fooling` crate and writes artifacts plus a manifest.

// `!(x > 0.0)` rejects NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod export;
pub mod io;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::*;
use crate::config::{apply_config, parse_config};
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "fooling", version, about = "Fool saliency-map explanations of small CNNs and measure the result")]
pub struct Cli {
    /// JSON object of flag values used where a flag is not given
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the procedural glyph dataset as IDX files
    Synth(SynthArgs),
    /// Train a classifier from scratch
    Train(TrainArgs),
    /// Fine-tune a checkpoint so its explanations are manipulated
    Fool(FoolArgs),
    /// Classification accuracy of a checkpoint
    Eval(EvalArgs),
    /// Fooling success rate of a fooled checkpoint against its original
    Fsr(FsrArgs),
    /// Render one heatmap as a PGM or PPM image
    Heatmap(HeatmapArgs),
    /// Area over the perturbation curve for several region orderings
    Aopc(AopcArgs),
    /// Accuracy under Gaussian weight noise
    Perturb(PerturbArgs),
    /// Build two-class composite images for active fooling
    Compose(ComposeArgs),
}

fn configured<A: serde::Serialize + serde::de::DeserializeOwned>(
    args: A,
    config: &Option<serde_json::Map<String, serde_json::Value>>,
) -> Result<A, CliError> {
    match config {
        Some(c) => apply_config(args, c),
        None => Ok(args),
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => Some(parse_config(&io::read_input(p)?)?),
        None => None,
    };
    match cli.command {
        Command::Synth(a) => synth(configured(a, &config)?),
        Command::Train(a) => train(configured(a, &config)?),
        Command::Fool(a) => fool(configured(a, &config)?),
        Command::Eval(a) => eval(configured(a, &config)?),
        Command::Fsr(a) => fsr(configured(a, &config)?),
        Command::Heatmap(a) => heatmap(configured(a, &config)?),
        Command::Aopc(a) => aopc(configured(a, &config)?),
        Command::Perturb(a) => perturb(configured(a, &config)?),
        Command::Compose(a) => compose(configured(a, &config)?),
    }
}

/// Parses `argv` and runs it, returning the process exit code. Errors are
/// printed to stderr as one `error[code]: message` line.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(first).line());
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
