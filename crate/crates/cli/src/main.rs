//! `synprobe`: train, evaluate and sweep structural-plus-label probes over
//! pre-extracted embedding stores.
//!
//! Exit codes: 0 success, 1 runtime failure (including a sweep where some
//! layers failed), 2 bad or missing input.

mod data;
mod eval;
mod files;
mod sweep;
mod train;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use synprobe::treebank::DEFAULT_MAX_LEN;

use files::{InputError, TreebankOptions};

#[derive(Debug, Parser)]
#[command(
    name = "synprobe",
    version,
    about = "Probe frozen encoder layers for dependency structure"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one probe on a treebank split and its embedding store.
    Train(train::TrainArgs),
    /// Decode a split with a trained probe and score it.
    Eval(eval::EvalArgs),
    /// Decode a split and write the predicted trees as CoNLL-U.
    Decode(eval::DecodeArgs),
    /// Train and evaluate one probe per layer from a TOML spec.
    Sweep(sweep::SweepArgs),
    /// Print a JSON report written by `eval`.
    Report(eval::ReportArgs),
    /// Drop sentences longer than a word limit.
    Filter(data::FilterArgs),
    /// Generate a synthetic treebank with linearly recoverable trees.
    Synth(data::SynthArgs),
}

/// Treebank reading options shared by commands.
#[derive(Debug, Args)]
pub struct TreebankArgs {
    /// Drop sentences with more words than this.
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    /// Keep relation subtypes such as `nmod:poss` instead of using base relations.
    #[arg(long)]
    pub keep_subtypes: bool,
}

impl TreebankArgs {
    pub fn options(&self) -> TreebankOptions {
        TreebankOptions {
            strip_subtypes: !self.keep_subtypes,
            max_len: Some(self.max_len),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run_eval(a),
        Command::Decode(a) => eval::run_decode(a),
        Command::Sweep(a) => sweep::run(a),
        Command::Report(a) => eval::run_report(a),
        Command::Filter(a) => data::run_filter(a),
        Command::Synth(a) => data::run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<InputError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
