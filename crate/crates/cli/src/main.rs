//! `stream-trace`: block mask estimation and sparse tracing over run
//! directories. Exit codes: 0 ok, 2 usage, 3 data, 4 evaluator.

mod cmd;
mod util;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "stream-trace", version, about)]
struct Cli {
    /// Worker threads for per-head work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a top-k block mask for every selected head.
    Estimate(cmd::estimate::EstimateArgs),
    /// Compare the estimator against the dense oracles.
    Validate(cmd::validate::ValidateArgs),
    /// Vertical profiles, kurtosis and receiver-head ranking.
    Analyze(cmd::analyze::AnalyzeArgs),
    /// Binary search for the smallest k that preserves the output.
    Search(cmd::search::SearchArgs),
    /// Information-flow graph from success minus fail masks.
    Flow(cmd::flow::FlowArgs),
    /// Serve the evaluator protocol on stdin/stdout with a threshold oracle.
    MockEvaluator(cmd::search::MockArgs),
    /// Write a synthetic run directory.
    Synth(cmd::synth::SynthArgs),
}

/// Block geometry flags shared by commands; unset values come from the manifest.
#[derive(Args, Clone, Copy)]
pub struct BlockArgs {
    #[arg(long = "bq")]
    pub b_q: Option<usize>,
    #[arg(long = "bk")]
    pub b_k: Option<usize>,
}

/// Head selection shared by commands.
#[derive(Args, Clone)]
pub struct HeadArgs {
    /// Layers to process, e.g. `0,2-5`.
    #[arg(long, value_parser = util::parse_list)]
    pub layers: Option<util::IndexList>,
    /// Heads to process, e.g. `0-3`.
    #[arg(long, value_parser = util::parse_list)]
    pub heads: Option<util::IndexList>,
}

#[derive(Args, Clone)]
pub struct RunArg {
    /// Run directory (or its manifest.json).
    pub run: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = util::pool(cli.jobs).and_then(|pool| match cli.command {
        Command::Estimate(a) => cmd::estimate::run(a, &pool),
        Command::Validate(a) => cmd::validate::run(a, &pool),
        Command::Analyze(a) => cmd::analyze::run(a, &pool),
        Command::Search(a) => cmd::search::run(a),
        Command::Flow(a) => cmd::flow::run(a),
        Command::MockEvaluator(a) => cmd::search::mock(a),
        Command::Synth(a) => cmd::synth::run(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(util::exit_code(&e))
        }
    }
}
