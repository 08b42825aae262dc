pub mod analyze;
pub mod estimate;
pub mod flow;
pub mod search;
pub mod synth;
pub mod validate;

use stream_trace::tensor_store::Run;
use stream_trace::{causal_block_mask, BlockCausalMask, BlockGrid};

use crate::util::{WithCode, USAGE};
use crate::BlockArgs;

/// Causal block mask for the run's context under the requested blocks.
pub fn run_mask(run: &Run, blocks: BlockArgs) -> anyhow::Result<BlockCausalMask> {
    let m = run.manifest();
    let grid = BlockGrid::new(
        m.t,
        blocks.b_q.unwrap_or(m.b_q),
        blocks.b_k.unwrap_or(m.b_k),
    )
    .code(USAGE)?;
    Ok(causal_block_mask(grid))
}
