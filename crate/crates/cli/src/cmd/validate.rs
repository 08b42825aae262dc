use anyhow::anyhow;
use clap::Args;
use stream_trace::oracle::{
    exact_topk_mask, naive_stream_reference, recall_against_exact, OracleError,
};
use stream_trace::{estimate_mask, StreamParams};

use crate::util::{self, WithCode, DATA, USAGE};
use crate::{BlockArgs, HeadArgs, RunArg};

#[derive(Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    run: RunArg,
    #[command(flatten)]
    blocks: BlockArgs,
    /// Key blocks kept per query block [default: min(4, n_k)].
    #[arg(long)]
    k: Option<usize>,
    /// Largest context the dense oracles may materialize
    /// [default: $STREAM_MAX_DENSE_T or 4096].
    #[arg(long = "max-T")]
    max_t: Option<usize>,
    #[command(flatten)]
    select: HeadArgs,
}

pub fn run(args: ValidateArgs, pool: &rayon::ThreadPool) -> anyhow::Result<()> {
    let run = util::open_run(&args.run.run)?;
    let max_t = util::dense_guard(args.max_t)?;
    let t = run.manifest().t;
    if t > max_t {
        return Err(OracleError::ContextTooLarge { t, max: max_t }).code(DATA);
    }
    let mask = super::run_mask(&run, args.blocks)?;
    let grid = *mask.grid();
    let params = StreamParams::new(grid.b_q(), grid.b_k(), args.k.unwrap_or(grid.n_k().min(4)));
    params.validate(&grid).code(USAGE)?;
    let heads = util::select_heads(&run, &args.select.layers, &args.select.heads)?;

    let rows = util::per_head(pool, &heads, |l, h| {
        let inputs = run.inputs(l, h).code(DATA)?;
        let (q, k) = (&inputs.q, &inputs.k);
        let est = estimate_mask(q, k, &mask, &params).code(DATA)?;
        let naive = naive_stream_reference(q, k, &mask, &params, max_t).code(DATA)?;
        let exact = exact_topk_mask(q, k, &mask, params.k, max_t).code(DATA)?;
        let same = est
            .rows()
            .iter()
            .zip(naive.rows())
            .filter(|(a, b)| a == b)
            .count();
        let agreement = same as f64 / est.rows().len() as f64;
        let recall = recall_against_exact(&est, &exact).code(DATA)?.mean;
        Ok((l, h, agreement, recall))
    })?;

    println!("layer,head,agreement,recall");
    for &(l, h, agreement, recall) in &rows {
        println!("{l},{h},{agreement},{recall:.6}");
    }
    let bad = rows.iter().filter(|r| r.2 < 1.0).count();
    if bad > 0 {
        return Err(anyhow!(
            "estimator disagrees with the naive reference on {bad} head(s)"
        ))
        .code(DATA);
    }
    Ok(())
}
