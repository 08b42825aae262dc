use std::path::PathBuf;

use clap::Args;
use stream_trace::flow::{build_graph, subtract_masks, GraphOptions, MaskSet};

use crate::util::{self, WithCode, DATA};
use crate::RunArg;

#[derive(Args)]
pub struct FlowArgs {
    #[command(flatten)]
    run: RunArg,
    /// Masks at the smallest k that preserves the output.
    #[arg(long)]
    success: PathBuf,
    /// Masks at a k that breaks the output.
    #[arg(long)]
    fail: PathBuf,
    /// Query block holding the needle.
    #[arg(long)]
    needle: usize,
    /// Query block of the output position.
    #[arg(long)]
    output: usize,
    /// Add identity edges between consecutive layers.
    #[arg(long)]
    residual: bool,
    /// Output directory [default: <run>/flow].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn check_context(set: &MaskSet, t: usize, what: &str) -> anyhow::Result<()> {
    for ((l, h), m) in set {
        if m.grid().t_orig() != t {
            return Err(util::coded(
                DATA,
                anyhow::anyhow!(
                    "{what} mask for layer {l} head {h} covers {} tokens, run has {t}",
                    m.grid().t_orig()
                ),
            ));
        }
    }
    Ok(())
}

pub fn run(args: FlowArgs) -> anyhow::Result<()> {
    let run = util::open_run(&args.run.run)?;
    let t = run.manifest().t;
    let success = util::read_mask_dir(&args.success)?;
    let fail = util::read_mask_dir(&args.fail)?;
    check_context(&success, t, "success")?;
    check_context(&fail, t, "fail")?;

    let diff = subtract_masks(&success, &fail).code(DATA)?;
    let opts = GraphOptions {
        residual_edges: args.residual,
    };
    let graph = build_graph(&diff, args.needle, args.output, opts).code(DATA)?;

    let out = args.out.unwrap_or_else(|| run.root().join("flow"));
    util::write_atomic(&out.join("graph.json"), graph.to_json().as_bytes())?;
    util::write_atomic(&out.join("graph.dot"), graph.to_dot().as_bytes())?;
    println!(
        "layers={} n_q={} edges={} needle_path_edges={}",
        graph.num_layers,
        graph.n_q,
        graph.edges.len(),
        graph.needle_path_edges().count()
    );
    Ok(())
}
