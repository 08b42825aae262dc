//! Quadratic reference implementations used to check the estimator.
//!
//! Everything here materializes `T x T` matrices and is guarded by a maximum
//! context length. None of it shares control flow with [`crate::stream`].

use crate::block_grid::BlockCausalMask;
use crate::mask::SparseBlockMask;
use crate::matrix::{dot, Matrix};
use crate::stream::{StreamError, StreamParams};

pub const DEFAULT_MAX_DENSE_T: usize = 4096;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("context of {t} tokens exceeds the dense limit of {max}")]
    ContextTooLarge { t: usize, max: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

fn guard(t: usize, max_t: usize) -> Result<(), OracleError> {
    if t > max_t {
        Err(OracleError::ContextTooLarge { t, max: max_t })
    } else {
        Ok(())
    }
}

fn check(q: &Matrix, k: &Matrix, mask: &BlockCausalMask, max_t: usize) -> Result<(), OracleError> {
    guard(q.rows(), max_t)?;
    if q.rows() == 0 {
        return Err(StreamError::EmptyContext.into());
    }
    let t = mask.grid().t_orig();
    if q.cols() != k.cols() || q.rows() != t || k.rows() != t {
        return Err(StreamError::DimensionMismatch(format!(
            "Q {:?}, K {:?}, T = {t}",
            q.shape(),
            k.shape()
        ))
        .into());
    }
    Ok(())
}

/// Every pairwise dot product, unscaled.
fn raw_scores(q: &Matrix, k: &Matrix) -> Matrix {
    Matrix::from_fn(q.rows(), k.rows(), |u, v| dot(q.row(u), k.row(v)))
}

/// Dense `QK^T / sqrt(d)` with masked entries set to `-inf`.
pub fn dense_scores(
    q: &Matrix,
    k: &Matrix,
    mask: &BlockCausalMask,
    max_t: usize,
) -> Result<Matrix, OracleError> {
    check(q, k, mask, max_t)?;
    let scale = 1.0 / (q.cols() as f32).sqrt();
    let raw = raw_scores(q, k);
    Ok(Matrix::from_fn(q.rows(), q.rows(), |u, v| {
        if mask.tokens().allows(u, v) {
            raw.get(u, v) * scale
        } else {
            f32::NEG_INFINITY
        }
    }))
}

/// Dense row softmax of a score matrix; `-inf` entries get probability zero.
pub fn dense_softmax(scores: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for u in 0..scores.rows() {
        let row = scores.row(u);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            continue;
        }
        let exps: Vec<f64> = row
            .iter()
            .map(|&x| {
                if x == f32::NEG_INFINITY {
                    0.0
                } else {
                    ((x - max) as f64).exp()
                }
            })
            .collect();
        let total: f64 = exps.iter().sum();
        for (v, e) in exps.into_iter().enumerate() {
            out.set(u, v, (e / total) as f32);
        }
    }
    out
}

/// Block-max of the unscaled dense scores over visible pairs; `None` for
/// tiles without a visible pair. Indexed `[q][r]` over the padded grid.
pub fn block_max_scores(
    q: &Matrix,
    k: &Matrix,
    mask: &BlockCausalMask,
    max_t: usize,
) -> Result<Vec<Vec<Option<f32>>>, OracleError> {
    check(q, k, mask, max_t)?;
    let grid = mask.grid();
    let raw = raw_scores(q, k);
    let (b_q, b_k) = (grid.b_q(), grid.b_k());
    let mut out = vec![vec![None; grid.n_k()]; grid.n_q()];
    for u in 0..grid.t_orig() {
        for v in 0..grid.t_orig() {
            if !mask.tokens().allows(u, v) {
                continue;
            }
            let slot: &mut Option<f32> = &mut out[u / b_q][v / b_k];
            let s = raw.get(u, v);
            *slot = Some(match *slot {
                Some(best) if best >= s => best,
                _ => s,
            });
        }
    }
    Ok(out)
}

/// Exact block top-k: per live query block, the `k` visible key blocks with
/// the largest block-max dot product, ties broken by ascending block index.
pub fn exact_topk_mask(
    q: &Matrix,
    k: &Matrix,
    mask: &BlockCausalMask,
    top: usize,
    max_t: usize,
) -> Result<SparseBlockMask, OracleError> {
    let blocks = block_max_scores(q, k, mask, max_t)?;
    let grid = *mask.grid();
    let mut rows = Vec::new();
    let mut scores = Vec::new();
    for row in blocks.iter().take(grid.live_q()) {
        let mut cands: Vec<(usize, f32)> = row
            .iter()
            .enumerate()
            .filter_map(|(r, s)| s.map(|s| (r, s)))
            .collect();
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(top);
        cands.sort_by_key(|c| c.0);
        rows.push(cands.iter().map(|c| c.0).collect());
        scores.push(cands.iter().map(|c| c.1).collect());
    }
    Ok(SparseBlockMask::new(grid, top, rows, Some(scores)).map_err(StreamError::from)?)
}

/// Direct transcription of the hierarchical selection loop, with no
/// shortcuts: scores come from the precomputed dense matrix, the loop runs the
/// conservative `ceil(log2(n_k))` iterations and top-k is taken by repeated
/// argmax.
pub fn naive_stream_reference(
    q: &Matrix,
    k: &Matrix,
    mask: &BlockCausalMask,
    params: &StreamParams,
    max_t: usize,
) -> Result<SparseBlockMask, OracleError> {
    check(q, k, mask, max_t)?;
    let grid = *mask.grid();
    params.validate(&grid)?;
    let raw = raw_scores(q, k);
    let n_k = grid.n_k();
    let top = params.k;

    let mut n_it = 0;
    while (1usize << n_it) < n_k {
        n_it += 1;
    }

    // Score of the first visible block in `[f, l]`, or -inf.
    let branch_score = |qb: usize, f: usize, l: usize, empty: bool| -> f32 {
        if empty {
            return f32::NEG_INFINITY;
        }
        let mut omega = false;
        for r in f..=l {
            if mask.get(qb, r) {
                omega = true;
            }
        }
        if !omega {
            return f32::NEG_INFINITY;
        }
        let mut rep = f;
        while !mask.get(qb, rep) {
            rep += 1;
        }
        let mut s = f32::NEG_INFINITY;
        for m in 0..grid.b_q() {
            for n in 0..grid.b_k() {
                let u = qb * grid.b_q() + m;
                let v = rep * grid.b_k() + n;
                if u < grid.t_orig() && v < grid.t_orig() && mask.tokens().allows(u, v) {
                    let x = raw.get(u, v);
                    if x > s {
                        s = x;
                    }
                }
            }
        }
        s
    };

    let mut rows = Vec::new();
    let mut scores = Vec::new();
    for qb in 0..grid.live_q() {
        // (f, l, empty)
        let mut f = vec![0usize; top];
        let mut l = vec![0usize; top];
        let mut empty = vec![false; top];
        for j in 0..top {
            f[j] = j * n_k / top;
            l[j] = (j + 1) * n_k / top - 1;
        }

        for _ in 0..n_it {
            let mut bf = vec![0usize; 2 * top];
            let mut bl = vec![0usize; 2 * top];
            let mut bempty = vec![true; 2 * top];
            for j in 0..top {
                if empty[j] {
                    continue;
                }
                let m = (f[j] + l[j]) / 2;
                bf[2 * j] = f[j];
                bl[2 * j] = m;
                bempty[2 * j] = false;
                if m < l[j] {
                    bf[2 * j + 1] = m + 1;
                    bl[2 * j + 1] = l[j];
                    bempty[2 * j + 1] = false;
                }
            }
            let mut s = vec![f32::NEG_INFINITY; 2 * top];
            for h in 0..2 * top {
                s[h] = branch_score(qb, bf[h], bl[h], bempty[h]);
            }

            let mut taken = vec![false; 2 * top];
            for j in 0..top {
                let mut best: Option<usize> = None;
                for h in 0..2 * top {
                    if taken[h] {
                        continue;
                    }
                    best = match best {
                        None => Some(h),
                        Some(b) => {
                            let first_h = if bempty[h] { usize::MAX } else { bf[h] };
                            let first_b = if bempty[b] { usize::MAX } else { bf[b] };
                            let better = s[h] > s[b] || (s[h] == s[b] && first_h < first_b);
                            if better {
                                Some(h)
                            } else {
                                Some(b)
                            }
                        }
                    };
                }
                let t = best.expect("2k branches for k picks");
                taken[t] = true;
                f[j] = bf[t];
                l[j] = bl[t];
                empty[j] = bempty[t];
            }
        }

        let mut row = Vec::new();
        for j in 0..top {
            if empty[j] {
                continue;
            }
            if let Some(r) = (f[j]..=l[j]).find(|&r| mask.get(qb, r)) {
                row.push(r);
            }
        }
        row.sort();
        let row_scores = row.iter().map(|&r| branch_score(qb, r, r, false)).collect();
        rows.push(row);
        scores.push(row_scores);
    }
    Ok(SparseBlockMask::new(grid, top, rows, Some(scores)).map_err(StreamError::from)?)
}

/// Per-row recall of `est` against `exact`, and its mean over rows where the
/// exact selection is non-empty. A mask with no such rows has mean 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Recall {
    pub per_row: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn recall_against_exact(
    est: &SparseBlockMask,
    exact: &SparseBlockMask,
) -> Result<Recall, OracleError> {
    if est.grid() != exact.grid() {
        return Err(OracleError::GridMismatch(format!(
            "{:?} vs {:?}",
            est.grid(),
            exact.grid()
        )));
    }
    if est.k() != exact.k() {
        return Err(OracleError::GridMismatch(format!(
            "k = {} vs k = {}",
            est.k(),
            exact.k()
        )));
    }
    let per_row: Vec<Option<f64>> = est
        .rows()
        .iter()
        .zip(exact.rows())
        .map(|(e, x)| {
            if x.is_empty() {
                None
            } else {
                let hit = e.iter().filter(|r| x.binary_search(r).is_ok()).count();
                Some(hit as f64 / x.len() as f64)
            }
        })
        .collect();
    let present: Vec<f64> = per_row.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(Recall { per_row, mean })
}
