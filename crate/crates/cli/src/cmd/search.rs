use std::io::{self, BufReader};
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use stream_trace::search::{
    find_min_k, serve_lines, MockEvaluator, Probe, ProcessEvaluator, SearchConfig, SearchError,
};

use crate::util::{self, WithCode, DATA, EVALUATOR, USAGE};
use crate::{BlockArgs, RunArg};

#[derive(Args)]
pub struct SearchArgs {
    #[command(flatten)]
    run: RunArg,
    /// Evaluator command, run through `sh -c` and spoken to over stdin/stdout.
    #[arg(long)]
    evaluator: String,
    /// Leading tokens that must match the reference for a probe to succeed.
    #[arg(long, default_value_t = 2)]
    n_match: usize,
    /// Tokens the evaluator generates per probe.
    #[arg(long, default_value_t = 16)]
    max_tokens: usize,
    #[arg(long, default_value_t = 1)]
    k_min: usize,
    /// Upper end of the search [default: n_k].
    #[arg(long)]
    k_max: Option<usize>,
    /// Leading dense layers [default: from the manifest].
    #[arg(long)]
    l_d: Option<usize>,
    #[command(flatten)]
    blocks: BlockArgs,
    /// Probe log path [default: <run>/search.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ProbeLog<'a> {
    k_star: Option<usize>,
    success: bool,
    k_min: usize,
    k_max: usize,
    n_match: usize,
    l_d: usize,
    b_q: usize,
    b_k: usize,
    max_tokens: usize,
    probes: &'a [Probe],
}

pub fn run(args: SearchArgs) -> anyhow::Result<()> {
    let run = util::open_run(&args.run.run)?;
    let grid = *super::run_mask(&run, args.blocks)?.grid();
    let config = SearchConfig {
        k_min: args.k_min,
        k_max: args.k_max.unwrap_or(grid.n_k()),
        n_match: args.n_match,
        l_d: args.l_d.unwrap_or(run.manifest().l_d),
        b_q: grid.b_q(),
        b_k: grid.b_k(),
        max_tokens: args.max_tokens,
    };
    config.validate().code(USAGE)?;
    let evaluator = ProcessEvaluator::spawn(&args.evaluator)
        .with_context(|| format!("spawning evaluator `{}`", args.evaluator))
        .code(EVALUATOR)?;
    let result = find_min_k(&config, evaluator);

    let (k_star, probes): (Option<usize>, &[Probe]) = match &result {
        Ok(o) => (Some(o.k_star), &o.probes),
        Err(e) => (None, e.probes()),
    };
    let log = ProbeLog {
        k_star,
        success: k_star.is_some(),
        k_min: config.k_min,
        k_max: config.k_max,
        n_match: config.n_match,
        l_d: config.l_d,
        b_q: config.b_q,
        b_k: config.b_k,
        max_tokens: config.max_tokens,
        probes,
    };
    let mut text = serde_json::to_string_pretty(&log)?;
    text.push('\n');
    let out = args.out.unwrap_or_else(|| run.root().join("search.json"));
    util::write_atomic(&out, text.as_bytes())?;

    match result {
        Ok(o) => {
            println!("k_star={} probes={}", o.k_star, o.probes.len());
            Ok(())
        }
        Err(e) => {
            let code = match e {
                SearchError::EvaluatorFailure { .. } => EVALUATOR,
                SearchError::InvalidConfig(_) => USAGE,
                SearchError::SearchExhausted { .. } => DATA,
            };
            Err(util::coded(code, e.into()))
        }
    }
}

#[derive(Args)]
pub struct MockArgs {
    /// Smallest k whose output matches the reference.
    #[arg(long)]
    threshold: usize,
    #[arg(long, default_value_t = 2)]
    n_match: usize,
}

pub fn mock(args: MockArgs) -> anyhow::Result<()> {
    let eval = MockEvaluator::new(args.threshold, args.n_match);
    let stdin = io::stdin();
    serve_lines(BufReader::new(stdin.lock()), io::stdout().lock(), |req| {
        eval.respond(req)
    })
    .context("serving evaluator protocol")
}
