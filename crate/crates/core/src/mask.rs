//! Block-sparse selection masks and their JSON form.

use serde::{Deserialize, Serialize};

use crate::block_grid::{BlockCausalMask, BlockGrid, GridError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MaskError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("query block {q}: {reason}")]
    InvalidRow { q: usize, reason: String },
    #[error("malformed mask: {0}")]
    Malformed(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Selected key blocks per live query block, ascending, optionally with the
/// representative score of each selected block.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBlockMask {
    grid: BlockGrid,
    k: usize,
    rows: Vec<Vec<usize>>,
    scores: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskJson {
    #[serde(rename = "T")]
    t: usize,
    b_q: usize,
    b_k: usize,
    k: usize,
    rows: Vec<Vec<usize>>,
    scores: Option<Vec<Vec<f32>>>,
}

impl SparseBlockMask {
    /// Builds a mask from per-row selections. Rows are sorted and must be
    /// unique and in range; `rows.len()` must equal the grid's live query
    /// block count. Scores, if given, are permuted along with their row.
    pub fn new(
        grid: BlockGrid,
        k: usize,
        rows: Vec<Vec<usize>>,
        scores: Option<Vec<Vec<f32>>>,
    ) -> Result<Self, MaskError> {
        if rows.len() != grid.live_q() {
            return Err(MaskError::Malformed(format!(
                "{} rows for {} live query blocks",
                rows.len(),
                grid.live_q()
            )));
        }
        if let Some(s) = &scores {
            if s.len() != rows.len() || s.iter().zip(&rows).any(|(a, b)| a.len() != b.len()) {
                return Err(MaskError::Malformed("scores do not align with rows".into()));
            }
        }
        let mut sorted_rows = Vec::with_capacity(rows.len());
        let mut sorted_scores = scores.as_ref().map(|_| Vec::with_capacity(rows.len()));
        for (q, row) in rows.into_iter().enumerate() {
            let mut pairs: Vec<(usize, f32)> = match &scores {
                Some(s) => row.iter().copied().zip(s[q].iter().copied()).collect(),
                None => row.iter().map(|&r| (r, 0.0)).collect(),
            };
            pairs.sort_by_key(|p| p.0);
            if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(MaskError::InvalidRow {
                    q,
                    reason: "duplicate key block".into(),
                });
            }
            if let Some(&(r, _)) = pairs.last() {
                if r >= grid.live_k() {
                    return Err(MaskError::InvalidRow {
                        q,
                        reason: format!("key block {r} outside {} live blocks", grid.live_k()),
                    });
                }
            }
            sorted_rows.push(pairs.iter().map(|p| p.0).collect());
            if let Some(out) = sorted_scores.as_mut() {
                out.push(pairs.iter().map(|p| p.1).collect());
            }
        }
        Ok(Self {
            grid,
            k,
            rows: sorted_rows,
            scores: sorted_scores,
        })
    }

    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.rows[q]
    }

    pub fn scores(&self) -> Option<&[Vec<f32>]> {
        self.scores.as_deref()
    }

    pub fn contains(&self, q: usize, r: usize) -> bool {
        self.rows[q].binary_search(&r).is_ok()
    }

    /// Score of selected block `r` in row `q`, if scores are attached.
    pub fn score(&self, q: usize, r: usize) -> Option<f32> {
        let idx = self.rows[q].binary_search(&r).ok()?;
        self.scores.as_ref().map(|s| s[q][idx])
    }

    pub fn without_scores(mut self) -> Self {
        self.scores = None;
        self
    }

    /// Total number of selected tiles.
    pub fn selected_tiles(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Checks the estimator output contract against a block mask: every
    /// selected block is visible and each row holds
    /// `min(k, visible blocks)` entries.
    pub fn check_selection(&self, mask: &BlockCausalMask) -> Result<(), MaskError> {
        if mask.grid() != &self.grid {
            return Err(MaskError::GridMismatch(
                "selection and block mask use different grids".into(),
            ));
        }
        for (q, row) in self.rows.iter().enumerate() {
            if let Some(&r) = row.iter().find(|&&r| !mask.get(q, r)) {
                return Err(MaskError::InvalidRow {
                    q,
                    reason: format!("key block {r} is masked out"),
                });
            }
            let want = self.k.min(mask.valid_count(q));
            if row.len() != want {
                return Err(MaskError::InvalidRow {
                    q,
                    reason: format!("{} blocks selected, expected {want}", row.len()),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = MaskJson {
            t: self.grid.t_orig(),
            b_q: self.grid.b_q(),
            b_k: self.grid.b_k(),
            k: self.k,
            rows: self.rows.clone(),
            scores: self.scores.clone(),
        };
        serde_json::to_string(&doc).expect("mask serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MaskError> {
        let doc: MaskJson =
            serde_json::from_str(text).map_err(|e| MaskError::Malformed(e.to_string()))?;
        let grid = BlockGrid::new(doc.t, doc.b_q, doc.b_k)?;
        Self::new(grid, doc.k, doc.rows, doc.scores)
    }
}
