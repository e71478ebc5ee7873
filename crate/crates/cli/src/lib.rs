//! The `patchlab` command line. `run` is what `main` calls; it returns the
//! process exit code so tests can drive it in-process.

pub mod cli;
pub mod commands;
pub mod common;
pub mod config;
pub mod error;

use clap::Parser;

use crate::cli::{Cli, Command};
use crate::commands::{pipeline, probe, report, sae, sweeps, train};
use crate::error::{CliError, Result};

pub fn dispatch(cli: &Cli) -> Result<()> {
    common::init_runtime(cli.verbose)?;
    match &cli.command {
        Command::TrainToy(a) => train::run_train(a),
        Command::EvalFormats(a) => train::run_eval(a),
        Command::Trace(a) => probe::run_trace(a),
        Command::Patch(a) => probe::run_patch(a),
        Command::SweepLayers(a) => sweeps::run_layers(a),
        Command::SweepHeads(a) => sweeps::run_heads(a),
        Command::SweepFraction(a) => sweeps::run_fraction(a),
        Command::SweepAlpha(a) => sweeps::run_alpha(a),
        Command::Bidirectional(a) => sweeps::run_bidirectional(a),
        Command::Generalize(a) => sweeps::run_generalize(a),
        Command::LogitLens(a) => probe::run_lens(a),
        Command::Attribution(a) => probe::run_attribution(a),
        Command::DiffScore(a) => probe::run_diff(a),
        Command::Steer(a) => sweeps::run_steer(a),
        Command::SaeTrain(a) => sae::run_train(a),
        Command::SaeAnalyze(a) => sae::run_analyze(a),
        Command::Report(a) => report::run_report(a),
        Command::ReproduceAll(a) => pipeline::run_reproduce(a),
    }
}

/// Parse `argv` and run. Errors print one JSON line on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.render().to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("{}", CliError::Usage(first).line());
            eprint!("{msg}");
            return 2;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
