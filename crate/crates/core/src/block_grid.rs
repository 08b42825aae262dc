//! Padding, block partitioning and the block-level attention mask.
//!
//! Sequences are padded up to a multiple of `lcm(b_q, b_k)` so that both the
//! query and key axes tile exactly. Padded tokens never attend and are never
//! attended to; query blocks made only of padding are dropped from every
//! output produced downstream.

use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("invalid grid: T = {t}, b_q = {b_q}, b_k = {b_k} (all must be >= 1)")]
    InvalidGrid { t: usize, b_q: usize, b_k: usize },
    #[error("token mask covers {actual} tokens, grid has {expected}")]
    TokenMaskSize { expected: usize, actual: usize },
    #[error("matrix is {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        expected: [usize; 2],
        actual: [usize; 2],
    },
    #[error("attention row {row} sums to {sum} over its valid entries")]
    NonNormalizedRows { row: usize, sum: f64 },
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    t_orig: usize,
    t_pad: usize,
    b_q: usize,
    b_k: usize,
}

impl BlockGrid {
    pub fn new(t: usize, b_q: usize, b_k: usize) -> Result<Self, GridError> {
        if t == 0 || b_q == 0 || b_k == 0 {
            return Err(GridError::InvalidGrid { t, b_q, b_k });
        }
        let unit = lcm(b_q, b_k);
        let t_pad = t.div_ceil(unit) * unit;
        Ok(Self {
            t_orig: t,
            t_pad,
            b_q,
            b_k,
        })
    }

    pub fn t_orig(&self) -> usize {
        self.t_orig
    }

    pub fn t_pad(&self) -> usize {
        self.t_pad
    }

    pub fn extra(&self) -> usize {
        self.t_pad - self.t_orig
    }

    pub fn b_q(&self) -> usize {
        self.b_q
    }

    pub fn b_k(&self) -> usize {
        self.b_k
    }

    /// Query blocks on the padded grid.
    pub fn n_q(&self) -> usize {
        self.t_pad / self.b_q
    }

    /// Key blocks on the padded grid.
    pub fn n_k(&self) -> usize {
        self.t_pad / self.b_k
    }

    /// Query blocks holding at least one real token.
    pub fn live_q(&self) -> usize {
        self.t_orig.div_ceil(self.b_q)
    }

    /// Key blocks holding at least one real token.
    pub fn live_k(&self) -> usize {
        self.t_orig.div_ceil(self.b_k)
    }

    /// Real (non-padded) token range of query block `q`; empty for padding.
    pub fn query_tokens(&self, q: usize) -> std::ops::Range<usize> {
        let start = (q * self.b_q).min(self.t_orig);
        start..((q + 1) * self.b_q).min(self.t_orig)
    }

    /// Real token range of key block `r`; empty for padding.
    pub fn key_tokens(&self, r: usize) -> std::ops::Range<usize> {
        let start = (r * self.b_k).min(self.t_orig);
        start..((r + 1) * self.b_k).min(self.t_orig)
    }
}

/// Token-level attention mask over the real tokens of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenMask {
    /// `v` visible from `u` iff `v <= u`.
    Causal,
    /// Arbitrary `n x n` bits, row-major, `bits[u * n + v]`.
    Custom { n: usize, bits: Vec<bool> },
}

impl TokenMask {
    pub fn custom(n: usize, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == n * n).then_some(Self::Custom { n, bits })
    }

    /// Whether query token `u` may attend key token `v`. Tokens are assumed
    /// to be real (below `T_orig`).
    #[inline]
    pub fn allows(&self, u: usize, v: usize) -> bool {
        match self {
            TokenMask::Causal => v <= u,
            TokenMask::Custom { n, bits } => bits[u * n + v],
        }
    }
}

/// Block-level mask: entry `[q, r]` is set iff any real token pair in the
/// `(q, r)` tile is visible under the token mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCausalMask {
    grid: BlockGrid,
    tokens: TokenMask,
    bits: Vec<bool>,
}

/// Standard causal block mask for `grid`.
pub fn causal_block_mask(grid: BlockGrid) -> BlockCausalMask {
    let (n_q, n_k) = (grid.n_q(), grid.n_k());
    let mut bits = vec![false; n_q * n_k];
    for q in 0..n_q {
        let rows = grid.query_tokens(q);
        if rows.is_empty() {
            continue;
        }
        let last_query = rows.end - 1;
        for r in 0..n_k {
            let cols = grid.key_tokens(r);
            // The earliest key of the tile is visible to the latest query.
            bits[q * n_k + r] = !cols.is_empty() && cols.start <= last_query;
        }
    }
    BlockCausalMask {
        grid,
        tokens: TokenMask::Causal,
        bits,
    }
}

/// Block mask for an arbitrary token mask, by block-max reduction.
pub fn block_mask(grid: BlockGrid, tokens: TokenMask) -> Result<BlockCausalMask, GridError> {
    match &tokens {
        TokenMask::Causal => return Ok(causal_block_mask(grid)),
        TokenMask::Custom { n, .. } if *n != grid.t_orig() => {
            return Err(GridError::TokenMaskSize {
                expected: grid.t_orig(),
                actual: *n,
            })
        }
        TokenMask::Custom { .. } => {}
    }
    let (n_q, n_k) = (grid.n_q(), grid.n_k());
    let mut bits = vec![false; n_q * n_k];
    for q in 0..n_q {
        for r in 0..n_k {
            bits[q * n_k + r] = grid
                .query_tokens(q)
                .any(|u| grid.key_tokens(r).any(|v| tokens.allows(u, v)));
        }
    }
    Ok(BlockCausalMask { grid, tokens, bits })
}

impl BlockCausalMask {
    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    pub fn tokens(&self) -> &TokenMask {
        &self.tokens
    }

    #[inline]
    pub fn get(&self, q: usize, r: usize) -> bool {
        self.bits[q * self.grid.n_k() + r]
    }

    /// Valid key blocks of query block `q`, ascending.
    pub fn valid_blocks(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.grid.n_k()).filter(move |&r| self.get(q, r))
    }

    pub fn valid_count(&self, q: usize) -> usize {
        self.valid_blocks(q).count()
    }

    /// Number of visible real token pairs inside tile `(q, r)`.
    pub fn tile_pair_count(&self, q: usize, r: usize) -> usize {
        if !self.get(q, r) {
            return 0;
        }
        let rows = self.grid.query_tokens(q);
        let cols = self.grid.key_tokens(r);
        match &self.tokens {
            TokenMask::Causal => rows
                .map(|u| {
                    let hi = (u + 1).min(cols.end);
                    hi.saturating_sub(cols.start)
                })
                .sum(),
            TokenMask::Custom { .. } => rows
                .map(|u| cols.clone().filter(|&v| self.tokens.allows(u, v)).count())
                .sum(),
        }
    }

    /// Number of visible real token pairs in the whole sequence.
    pub fn total_pair_count(&self) -> usize {
        let t = self.grid.t_orig();
        match &self.tokens {
            TokenMask::Causal => t * (t + 1) / 2,
            TokenMask::Custom { bits, .. } => bits.iter().filter(|&&b| b).count(),
        }
    }
}

/// Averages token-level attention probabilities over each `b_q x b_k` tile.
///
/// Only visible real pairs contribute to the numerator, but the denominator is
/// always the full tile area `b_q * b_k`. The result covers live blocks only
/// (`live_q x live_k`); rows of `probs` with visible entries must sum to one
/// within `1e-3`.
pub fn block_mean(probs: &Matrix, mask: &BlockCausalMask) -> Result<Matrix, GridError> {
    let grid = mask.grid();
    let t = grid.t_orig();
    if probs.shape() != [t, t] {
        return Err(GridError::ShapeMismatch {
            expected: [t, t],
            actual: probs.shape(),
        });
    }
    for u in 0..t {
        let mut any = false;
        let mut sum = 0.0f64;
        for v in 0..t {
            if mask.tokens().allows(u, v) {
                any = true;
                sum += probs.get(u, v) as f64;
            }
        }
        if any && (sum - 1.0).abs() > 1e-3 {
            return Err(GridError::NonNormalizedRows { row: u, sum });
        }
    }
    let area = (grid.b_q() * grid.b_k()) as f64;
    let (live_q, live_k) = (grid.live_q(), grid.live_k());
    let mut out = Matrix::zeros(live_q, live_k);
    for q in 0..live_q {
        for r in 0..live_k {
            if !mask.get(q, r) {
                continue;
            }
            let mut sum = 0.0f64;
            for u in grid.query_tokens(q) {
                for v in grid.key_tokens(r) {
                    if mask.tokens().allows(u, v) {
                        sum += probs.get(u, v) as f64;
                    }
                }
            }
            out.set(q, r, (sum / area) as f32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic() {
        let g = BlockGrid::new(100, 32, 64).unwrap();
        assert_eq!((g.t_pad(), g.extra(), g.n_q(), g.n_k()), (128, 28, 4, 2));
        let g = BlockGrid::new(64, 32, 32).unwrap();
        assert_eq!((g.t_pad(), g.extra()), (64, 0));
        let g = BlockGrid::new(1000, 32, 32).unwrap();
        assert_eq!((g.t_pad(), g.n_q(), g.n_k()), (1024, 32, 32));
    }

    #[test]
    fn grid_rejects_zero() {
        assert!(BlockGrid::new(0, 1, 1).is_err());
        assert!(BlockGrid::new(1, 0, 1).is_err());
    }

    #[test]
    fn aligned_grid_is_idempotent() {
        for (t, bq, bk) in [(64, 32, 32), (100, 4, 10), (37, 3, 5)] {
            let g = BlockGrid::new(t, bq, bk).unwrap();
            let again = BlockGrid::new(g.t_pad(), bq, bk).unwrap();
            assert_eq!(again.t_pad(), g.t_pad());
            assert_eq!(again.extra(), 0);
        }
    }

    #[test]
    fn causal_square_blocks() {
        let m = causal_block_mask(BlockGrid::new(64, 32, 32).unwrap());
        assert!(m.get(0, 0) && !m.get(0, 1) && m.get(1, 0) && m.get(1, 1));
    }

    #[test]
    fn causal_mixed_blocks() {
        let m = causal_block_mask(BlockGrid::new(100, 32, 64).unwrap());
        assert!(m.get(0, 0));
        assert!(!m.get(0, 1));
        // Query block 3 holds tokens 96..99, key block 1 holds 64..99.
        assert!(m.get(3, 1));
    }

    #[test]
    fn padded_blocks_are_zero() {
        // T = 5, b = 4: query/key block 1 holds token 4 only.
        let g = BlockGrid::new(5, 2, 4).unwrap();
        assert_eq!(g.t_pad(), 8);
        let m = causal_block_mask(g);
        // Query block 3 (tokens 6, 7) is padding.
        assert!((0..g.n_k()).all(|r| !m.get(3, r)));
        // Key block 1 (tokens 4..7) is visible only from query block 2.
        assert!(!m.get(1, 1) && m.get(2, 1));
    }

    #[test]
    fn all_zero_token_mask_gives_zero_blocks() {
        let g = BlockGrid::new(64, 32, 32).unwrap();
        let m = block_mask(g, TokenMask::custom(64, vec![false; 64 * 64]).unwrap()).unwrap();
        assert!((0..2).all(|q| (0..2).all(|r| !m.get(q, r))));
        assert_eq!(m.total_pair_count(), 0);
    }

    #[test]
    fn token_mask_size_checked() {
        let g = BlockGrid::new(8, 4, 4).unwrap();
        assert!(matches!(
            block_mask(g, TokenMask::custom(4, vec![true; 16]).unwrap()),
            Err(GridError::TokenMaskSize { .. })
        ));
    }

    #[test]
    fn block_mean_identity() {
        let g = BlockGrid::new(4, 2, 2).unwrap();
        let mask = causal_block_mask(g);
        let eye = Matrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        let bm = block_mean(&eye, &mask).unwrap();
        // Two ones per diagonal tile over a 4-entry tile.
        assert_eq!(bm.as_slice(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn block_mean_uniform_causal_matches_enumeration() {
        let t = 4;
        let p = Matrix::from_fn(t, t, |u, v| if v <= u { 1.0 / (u + 1) as f32 } else { 0.0 });
        let mask = causal_block_mask(BlockGrid::new(t, 2, 2).unwrap());
        let bm = block_mean(&p, &mask).unwrap();
        // Hand enumeration: tile (0,0) = (1 + 1/2 + 1/2) / 4,
        // tile (1,0) = (1/3 * 2 + 1/4 * 2) / 4, tile (1,1) = (1/3 + 1/4 * 2) / 4.
        let expected = [
            2.0 / 4.0,
            0.0,
            (2.0 / 3.0 + 0.5) / 4.0,
            (1.0 / 3.0 + 0.5) / 4.0,
        ];
        for (a, b) in bm.as_slice().iter().zip(expected) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn block_mean_rejects_zero_rows() {
        let mask = causal_block_mask(BlockGrid::new(4, 2, 2).unwrap());
        assert!(matches!(
            block_mean(&Matrix::zeros(4, 4), &mask),
            Err(GridError::NonNormalizedRows { row: 0, .. })
        ));
    }

    #[test]
    fn tile_pair_counts_sum_to_total() {
        for (t, bq, bk) in [(10, 3, 4), (33, 8, 8), (64, 32, 16)] {
            let mask = causal_block_mask(BlockGrid::new(t, bq, bk).unwrap());
            let g = mask.grid();
            let sum: usize = (0..g.n_q())
                .flat_map(|q| (0..g.n_k()).map(move |r| (q, r)))
                .map(|(q, r)| mask.tile_pair_count(q, r))
                .sum();
            assert_eq!(sum, mask.total_pair_count());
        }
    }
}
