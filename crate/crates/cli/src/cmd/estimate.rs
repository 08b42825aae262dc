use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use stream_trace::analytics::{effective_k, sparsity_stats, SparsityStats};
use stream_trace::stream::StreamError;
use stream_trace::{estimate_mask, StreamParams};

use crate::util::{self, WithCode, DATA, USAGE};
use crate::{BlockArgs, HeadArgs, RunArg};

#[derive(Args)]
#[command(group = clap::ArgGroup::new("budget").required(true).args(["k", "s"]))]
pub struct EstimateArgs {
    #[command(flatten)]
    run: RunArg,
    #[command(flatten)]
    blocks: BlockArgs,
    /// Key blocks kept per query block.
    #[arg(long)]
    k: Option<usize>,
    /// Effective sparsity in (0, 1), converted to k from T and b_q.
    #[arg(long)]
    s: Option<f64>,
    #[command(flatten)]
    select: HeadArgs,
    /// Output directory for mask files [default: <run>/masks].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct HeadStats {
    layer: usize,
    head: usize,
    #[serde(flatten)]
    stats: SparsityStats,
}

#[derive(Serialize)]
struct Summary {
    heads: Vec<HeadStats>,
    selected_pairs: usize,
    valid_pairs: usize,
    pruned_fraction: f64,
}

pub fn run(args: EstimateArgs, pool: &rayon::ThreadPool) -> anyhow::Result<()> {
    let run = util::open_run(&args.run.run)?;
    let mask = super::run_mask(&run, args.blocks)?;
    let grid = *mask.grid();
    let k = match (args.k, args.s) {
        (Some(k), _) => k,
        (None, Some(s)) => effective_k(grid.t_orig(), grid.b_q(), s).code(USAGE)?,
        (None, None) => unreachable!("clap requires one of --k / --s"),
    };
    let params = StreamParams::new(grid.b_q(), grid.b_k(), k);
    params.validate(&grid).code(USAGE)?;
    let heads = util::select_heads(&run, &args.select.layers, &args.select.heads)?;
    let out = args.out.unwrap_or_else(|| run.root().join("masks"));

    let heads = util::per_head(pool, &heads, |l, h| {
        let inputs = run.inputs(l, h).code(DATA)?;
        let sel = estimate_mask(&inputs.q, &inputs.k, &mask, &params).map_err(|e| {
            let code = if matches!(e, StreamError::InvalidParams(_)) {
                USAGE
            } else {
                DATA
            };
            util::coded(code, e.into())
        })?;
        let stats = sparsity_stats(&sel, &mask).code(DATA)?;
        util::write_atomic(
            &out.join(util::mask_file_name(l, h)),
            sel.to_json().as_bytes(),
        )?;
        Ok(HeadStats {
            layer: l,
            head: h,
            stats,
        })
    })?;

    let selected: usize = heads.iter().map(|h| h.stats.selected_pairs).sum();
    let valid: usize = heads.iter().map(|h| h.stats.valid_pairs).sum();
    let summary = Summary {
        pruned_fraction: 1.0 - selected as f64 / valid as f64,
        selected_pairs: selected,
        valid_pairs: valid,
        heads,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    util::write_atomic(&out.join("stats.json"), text.as_bytes()).context("writing stats")?;
    println!(
        "heads={} T={} b_q={} b_k={} k={} selected_pairs={} valid_pairs={} pruned_fraction={:.6}",
        summary.heads.len(),
        grid.t_orig(),
        grid.b_q(),
        grid.b_k(),
        k,
        summary.selected_pairs,
        summary.valid_pairs,
        summary.pruned_fraction
    );
    Ok(())
}
