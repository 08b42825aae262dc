//! Sparse attention tracing.
//!
//! Estimates per-head top-k key-block masks with a hierarchical bisection
//! search that runs in `O(T log T)` time and `O(T)` space, checks them against
//! quadratic references, and derives interpretability artifacts from them:
//! vertical attention profiles and receiver-head rankings, the minimal
//! output-preserving sparsity constant, and needle-to-output flow graphs.
//!
//! Module map:
//!
//! - [`tensor_store`]: tensor files and run manifests
//! - [`block_grid`]: padding, block partitioning, block-level masks
//! - [`stream`]: the hierarchical estimator and sparse masked softmax
//! - [`oracle`]: dense and naive reference implementations
//! - [`analytics`]: profiles, kurtosis, sparsity statistics
//! - [`search`]: sparsity-constant search and the evaluator protocol
//! - [`flow`]: mask subtraction and flow graphs

pub mod analytics;
pub mod block_grid;
pub mod flow;
pub mod mask;
pub mod matrix;
pub mod oracle;
pub mod search;
pub mod stream;
pub mod tensor_store;

pub use block_grid::{block_mask, causal_block_mask, BlockCausalMask, BlockGrid, TokenMask};
pub use mask::SparseBlockMask;
pub use matrix::Matrix;
pub use stream::{estimate_mask, estimate_mask_with_stats, StreamParams, StreamStats};
