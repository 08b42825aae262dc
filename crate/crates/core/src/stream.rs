//! Hierarchical top-k key-block selection and sparse masked attention.
//!
//! For every live query block the key axis is split into `k` contiguous
//! ranges of key blocks. Each iteration bisects every surviving range,
//! scores each half by its first visible key block (the maximum token-level
//! dot product inside that tile) and keeps the `k` best halves. Halves with no
//! visible block score `-inf` and are never evaluated. Once every range is a
//! single block, the surviving blocks form the row's selection.
//!
//! Work per row is at most `2k` tile scores per iteration over
//! `ceil(log2(ceil(n_k / k)))` iterations, and the output holds at most `k`
//! tiles per query block.

use std::cmp::Ordering;

use crate::block_grid::{BlockCausalMask, BlockGrid, TokenMask};
use crate::mask::{MaskError, SparseBlockMask};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StreamError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty context")]
    EmptyContext,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("no visible token pair in tile")]
    NoValidPair,
    #[error("query token {token} has no visible entry in the selected blocks")]
    EmptyRow { token: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamParams {
    pub b_q: usize,
    pub b_k: usize,
    pub k: usize,
    /// Top-r approximation constant. Accepted for interface compatibility;
    /// the selection procedure does not use it.
    pub r_top: Option<usize>,
}

impl StreamParams {
    pub fn new(b_q: usize, b_k: usize, k: usize) -> Self {
        Self {
            b_q,
            b_k,
            k,
            r_top: None,
        }
    }

    pub fn validate(&self, grid: &BlockGrid) -> Result<(), StreamError> {
        if self.b_q != grid.b_q() || self.b_k != grid.b_k() {
            return Err(StreamError::DimensionMismatch(format!(
                "params use blocks ({}, {}), grid uses ({}, {})",
                self.b_q,
                self.b_k,
                grid.b_q(),
                grid.b_k()
            )));
        }
        if self.k == 0 || self.k > grid.n_k() {
            return Err(StreamError::InvalidParams(format!(
                "k = {} must lie in [1, {}]",
                self.k,
                grid.n_k()
            )));
        }
        Ok(())
    }
}

/// Number of bisection rounds needed to shrink the initial ranges to single
/// blocks: `ceil(log2(ceil(n_k / k)))`.
pub fn iteration_count(n_k: usize, k: usize) -> usize {
    let longest = n_k.div_ceil(k).max(1);
    (usize::BITS - (longest - 1).leading_zeros()) as usize
}

/// Initial split of `[0, n_k)` into `k` ranges, `j`-th range
/// `[floor(j n_k / k), floor((j + 1) n_k / k) - 1]`.
pub fn initial_ranges(n_k: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .map(|j| (j * n_k / k, (j + 1) * n_k / k - 1))
        .collect()
}

/// Counters collected during estimation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamStats {
    /// Tile scores computed during bisection, summed over rows.
    pub search_score_calls: usize,
    /// Largest per-row count of bisection tile scores.
    pub max_row_search_calls: usize,
    /// Tile scores computed only to attach scores when no bisection ran.
    pub finalize_score_calls: usize,
    pub iterations: usize,
}

/// Maximum dot product between rows of `q_block` and `k_block` over the pairs
/// set in `bits` (row-major, `q_block.rows() x k_block.rows()`). No `1/sqrt(d)`
/// scaling is applied.
pub fn representative_score(
    q_block: &Matrix,
    k_block: &Matrix,
    bits: &[bool],
) -> Result<f32, StreamError> {
    if q_block.cols() != k_block.cols() {
        return Err(StreamError::DimensionMismatch(format!(
            "query dim {} vs key dim {}",
            q_block.cols(),
            k_block.cols()
        )));
    }
    if bits.len() != q_block.rows() * k_block.rows() {
        return Err(StreamError::DimensionMismatch(format!(
            "{} bits for a {}x{} tile",
            bits.len(),
            q_block.rows(),
            k_block.rows()
        )));
    }
    let mut best: Option<f32> = None;
    for m in 0..q_block.rows() {
        for n in 0..k_block.rows() {
            if bits[m * k_block.rows() + n] {
                let s = dot(q_block.row(m), k_block.row(n));
                best = Some(best.map_or(s, |b| b.max(s)));
            }
        }
    }
    best.ok_or(StreamError::NoValidPair)
}

/// Maximum visible dot product inside tile `(qb, r)` of the full tensors.
/// The caller guarantees the tile is visible.
pub(crate) fn tile_score(
    q: &Matrix,
    k: &Matrix,
    mask: &BlockCausalMask,
    qb: usize,
    r: usize,
) -> f32 {
    let grid = mask.grid();
    let mut best = f32::NEG_INFINITY;
    for u in grid.query_tokens(qb) {
        let qu = q.row(u);
        let keys = grid.key_tokens(r);
        let keys = match mask.tokens() {
            TokenMask::Causal => keys.start..keys.end.min(u + 1),
            TokenMask::Custom { .. } => keys,
        };
        for v in keys {
            if mask.tokens().allows(u, v) {
                best = best.max(dot(qu, k.row(v)));
            }
        }
    }
    best
}

pub(crate) fn check_inputs(
    q: &Matrix,
    k: &Matrix,
    mask: &BlockCausalMask,
) -> Result<(), StreamError> {
    if q.rows() == 0 || k.rows() == 0 {
        return Err(StreamError::EmptyContext);
    }
    if q.cols() != k.cols() {
        return Err(StreamError::DimensionMismatch(format!(
            "Q has d = {}, K has d = {}",
            q.cols(),
            k.cols()
        )));
    }
    let t = mask.grid().t_orig();
    if q.rows() != t || k.rows() != t {
        return Err(StreamError::DimensionMismatch(format!(
            "Q has {} rows, K has {}, grid expects T = {t}",
            q.rows(),
            k.rows()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Branch {
    range: Option<(usize, usize)>,
    score: f32,
}

impl Branch {
    const EMPTY: Branch = Branch {
        range: None,
        score: f32::NEG_INFINITY,
    };

    fn first(&self) -> usize {
        self.range.map_or(usize::MAX, |(f, _)| f)
    }
}

/// Higher score first; ties by ascending first index.
fn branch_order(a: &Branch, b: &Branch) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.first().cmp(&b.first()))
}

fn first_valid(mask: &BlockCausalMask, qb: usize, range: Option<(usize, usize)>) -> Option<usize> {
    let (f, l) = range?;
    (f..=l).find(|&r| mask.get(qb, r))
}

/// Estimates the top-k key blocks of every live query block.
pub fn estimate_mask(
    q: &Matrix,
    k: &Matrix,
    mask: &BlockCausalMask,
    params: &StreamParams,
) -> Result<SparseBlockMask, StreamError> {
    estimate_mask_with_stats(q, k, mask, params).map(|(m, _)| m)
}

/// [`estimate_mask`] plus work counters.
pub fn estimate_mask_with_stats(
    q: &Matrix,
    k: &Matrix,
    mask: &BlockCausalMask,
    params: &StreamParams,
) -> Result<(SparseBlockMask, StreamStats), StreamError> {
    check_inputs(q, k, mask)?;
    let grid = *mask.grid();
    params.validate(&grid)?;
    let n_k = grid.n_k();
    let n_it = iteration_count(n_k, params.k);
    let mut stats = StreamStats {
        iterations: n_it,
        ..StreamStats::default()
    };

    let mut rows = Vec::with_capacity(grid.live_q());
    let mut scores = Vec::with_capacity(grid.live_q());
    let mut branches: Vec<Branch> = Vec::with_capacity(2 * params.k);

    for qb in 0..grid.live_q() {
        let mut nodes: Vec<Branch> = initial_ranges(n_k, params.k)
            .into_iter()
            .map(|range| Branch {
                range: Some(range),
                score: f32::NEG_INFINITY,
            })
            .collect();
        let mut row_calls = 0;

        for _ in 0..n_it {
            branches.clear();
            for node in &nodes {
                let (left, right) = match node.range {
                    None => (None, None),
                    Some((f, l)) => {
                        let mid = (f + l) / 2;
                        (Some((f, mid)), (mid < l).then_some((mid + 1, l)))
                    }
                };
                for range in [left, right] {
                    let branch = match first_valid(mask, qb, range) {
                        None => Branch {
                            range,
                            ..Branch::EMPTY
                        },
                        Some(rep) => {
                            row_calls += 1;
                            Branch {
                                range,
                                score: tile_score(q, k, mask, qb, rep),
                            }
                        }
                    };
                    branches.push(branch);
                }
            }
            branches.sort_by(branch_order);
            nodes.clear();
            nodes.extend_from_slice(&branches[..params.k]);
        }

        let mut selected: Vec<(usize, f32)> = Vec::with_capacity(params.k);
        for node in &nodes {
            if let Some(rep) = first_valid(mask, qb, node.range) {
                let score = if n_it == 0 {
                    stats.finalize_score_calls += 1;
                    tile_score(q, k, mask, qb, rep)
                } else {
                    node.score
                };
                selected.push((rep, score));
            }
        }
        selected.sort_by_key(|s| s.0);
        rows.push(selected.iter().map(|s| s.0).collect());
        scores.push(selected.iter().map(|s| s.1).collect());

        stats.search_score_calls += row_calls;
        stats.max_row_search_calls = stats.max_row_search_calls.max(row_calls);
    }

    let out = SparseBlockMask::new(grid, params.k, rows, Some(scores))?;
    Ok((out, stats))
}

/// Block-sparse token-level matrix: for each live query block, one dense
/// `b_q x b_k` tile per selected key block. Absent entries (masked, padded or
/// outside the selection) hold `-inf` for scores and `0` for probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparse {
    grid: BlockGrid,
    rows: Vec<Vec<Tile>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub key_block: usize,
    pub values: Vec<f32>,
}

impl BlockSparse {
    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    pub fn tiles(&self, qb: usize) -> &[Tile] {
        &self.rows[qb]
    }

    /// Allocated entries across all tiles (present or not).
    pub fn stored_entries(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum::<usize>() * self.grid.b_q() * self.grid.b_k()
    }

    /// Present entries of real query token `u` as `(key token, value)`,
    /// ascending by key token.
    pub fn row_entries(&self, u: usize, present: impl Fn(f32) -> bool) -> Vec<(usize, f32)> {
        let (b_q, b_k) = (self.grid.b_q(), self.grid.b_k());
        let qb = u / b_q;
        let m = u % b_q;
        let mut out = Vec::new();
        for tile in &self.rows[qb] {
            for n in 0..b_k {
                let x = tile.values[m * b_k + n];
                if present(x) {
                    out.push((tile.key_block * b_k + n, x));
                }
            }
        }
        out
    }

    /// Expands to a dense `T x T` matrix, filling absent entries with `fill`.
    pub fn to_dense(&self, fill: f32) -> Matrix {
        let t = self.grid.t_orig();
        let (b_q, b_k) = (self.grid.b_q(), self.grid.b_k());
        let mut out = Matrix::from_fn(t, t, |_, _| fill);
        for (qb, tiles) in self.rows.iter().enumerate() {
            for tile in tiles {
                for u in self.grid.query_tokens(qb) {
                    for v in self.grid.key_tokens(tile.key_block) {
                        let x = tile.values[(u - qb * b_q) * b_k + (v - tile.key_block * b_k)];
                        if x != f32::NEG_INFINITY {
                            out.set(u, v, x);
                        }
                    }
                }
            }
        }
        out
    }

    /// Tile sums divided by the full tile area `b_q * b_k`, on the
    /// `live_q x live_k` grid. Intended for probability tiles.
    pub fn block_means(&self) -> Matrix {
        let area = (self.grid.b_q() * self.grid.b_k()) as f64;
        let mut out = Matrix::zeros(self.grid.live_q(), self.grid.live_k());
        for (qb, tiles) in self.rows.iter().enumerate() {
            for tile in tiles {
                let sum: f64 = tile.values.iter().map(|&x| x as f64).sum();
                out.set(qb, tile.key_block, (sum / area) as f32);
            }
        }
        out
    }
}

/// Scaled scores `<Q_u, K_v> / sqrt(d)` for every visible token pair inside
/// the selected tiles.
pub fn apply_mask(
    q: &Matrix,
    k: &Matrix,
    selection: &SparseBlockMask,
    mask: &BlockCausalMask,
) -> Result<BlockSparse, StreamError> {
    check_inputs(q, k, mask)?;
    let grid = *mask.grid();
    if selection.grid() != &grid {
        return Err(StreamError::DimensionMismatch(
            "selection grid differs from block mask grid".into(),
        ));
    }
    let scale = 1.0 / (q.cols() as f32).sqrt();
    let (b_q, b_k) = (grid.b_q(), grid.b_k());
    let rows = (0..grid.live_q())
        .map(|qb| {
            selection
                .row(qb)
                .iter()
                .map(|&r| {
                    let mut values = vec![f32::NEG_INFINITY; b_q * b_k];
                    for u in grid.query_tokens(qb) {
                        for v in grid.key_tokens(r) {
                            if mask.tokens().allows(u, v) {
                                values[(u - qb * b_q) * b_k + (v - r * b_k)] =
                                    dot(q.row(u), k.row(v)) * scale;
                            }
                        }
                    }
                    Tile {
                        key_block: r,
                        values,
                    }
                })
                .collect()
        })
        .collect();
    Ok(BlockSparse { grid, rows })
}

/// Row-wise softmax over the present entries of every real query token.
pub fn masked_softmax(scores: &BlockSparse) -> Result<BlockSparse, StreamError> {
    let grid = scores.grid;
    let (b_q, b_k) = (grid.b_q(), grid.b_k());
    let mut rows: Vec<Vec<Tile>> = scores
        .rows
        .iter()
        .map(|tiles| {
            tiles
                .iter()
                .map(|t| Tile {
                    key_block: t.key_block,
                    values: vec![0.0; b_q * b_k],
                })
                .collect()
        })
        .collect();
    for u in 0..grid.t_orig() {
        let qb = u / b_q;
        let m = u % b_q;
        let src = &scores.rows[qb];
        let row_max = src
            .iter()
            .flat_map(|t| &t.values[m * b_k..(m + 1) * b_k])
            .copied()
            .fold(f32::NEG_INFINITY, f32::max);
        if row_max == f32::NEG_INFINITY {
            return Err(StreamError::EmptyRow { token: u });
        }
        let mut total = 0.0f64;
        for (dst, tile) in rows[qb].iter_mut().zip(src) {
            for n in 0..b_k {
                let x = tile.values[m * b_k + n];
                if x != f32::NEG_INFINITY {
                    let e = ((x - row_max) as f64).exp();
                    dst.values[m * b_k + n] = e as f32;
                    total += e;
                }
            }
        }
        for dst in rows[qb].iter_mut() {
            for p in &mut dst.values[m * b_k..(m + 1) * b_k] {
                *p = (*p as f64 / total) as f32;
            }
        }
    }
    Ok(BlockSparse { grid, rows })
}
