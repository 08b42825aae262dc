//! Vertical attention profiles, receiver-head ranking and sparsity figures.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::block_grid::BlockCausalMask;
use crate::mask::SparseBlockMask;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalyticsError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),
    #[error("no head has a non-degenerate profile")]
    NoValidProfiles,
    #[error("sparsity s = {0} outside (0, 1)")]
    SparsityOutOfRange(f64),
    #[error("mask carries no scores")]
    MissingScores,
    #[error("invalid mask: {0}")]
    InvalidMask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileSource {
    BlockMean,
    MaskFrequency,
    MaskScore,
}

impl ProfileSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileSource::BlockMean => "block_mean",
            ProfileSource::MaskFrequency => "mask_frequency",
            ProfileSource::MaskScore => "mask_score",
        }
    }
}

impl std::str::FromStr for ProfileSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "block_mean" => Ok(Self::BlockMean),
            "mask_frequency" => Ok(Self::MaskFrequency),
            "mask_score" => Ok(Self::MaskScore),
            other => Err(format!("unknown profile source `{other}`")),
        }
    }
}

/// What a vertical profile is computed from.
#[derive(Debug, Clone, Copy)]
pub enum ProfileInput<'a> {
    /// Block-mean attention matrix (`live_q x live_k`).
    BlockMean(&'a Matrix),
    /// Binary selection: fraction of visible query blocks selecting each key block.
    MaskFrequency(&'a SparseBlockMask),
    /// Score-weighted selection. Each row's representative scores, multiplied
    /// by `scale`, are softmax-normalized over the selected blocks.
    MaskScore(&'a SparseBlockMask, f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerticalProfile {
    pub layer: usize,
    pub head: usize,
    pub source: ProfileSource,
    pub values: Vec<f64>,
    /// Excess kurtosis; `None` when the profile is degenerate.
    pub kurtosis: Option<f64>,
}

fn check_mask_grid(sel: &SparseBlockMask, mask: &BlockCausalMask) -> Result<(), AnalyticsError> {
    if sel.grid() != mask.grid() {
        return Err(AnalyticsError::GridMismatch(format!(
            "selection grid {:?} vs block mask grid {:?}",
            sel.grid(),
            mask.grid()
        )));
    }
    Ok(())
}

/// Per-key-block column averages over the query blocks that can see it.
/// Only live key blocks are reported.
pub fn vertical_values(
    input: ProfileInput<'_>,
    mask: &BlockCausalMask,
) -> Result<Vec<f64>, AnalyticsError> {
    let grid = mask.grid();
    let (live_q, live_k) = (grid.live_q(), grid.live_k());
    let mut sums = vec![0.0f64; live_k];
    match input {
        ProfileInput::BlockMean(bm) => {
            if bm.shape() != [live_q, live_k] {
                return Err(AnalyticsError::GridMismatch(format!(
                    "block means are {:?}, grid has {live_q}x{live_k} live blocks",
                    bm.shape()
                )));
            }
            for q in 0..live_q {
                for (r, sum) in sums.iter_mut().enumerate() {
                    if mask.get(q, r) {
                        *sum += bm.get(q, r) as f64;
                    }
                }
            }
        }
        ProfileInput::MaskFrequency(sel) => {
            check_mask_grid(sel, mask)?;
            for (q, row) in sel.rows().iter().enumerate() {
                for &r in row {
                    if mask.get(q, r) {
                        sums[r] += 1.0;
                    }
                }
            }
        }
        ProfileInput::MaskScore(sel, scale) => {
            check_mask_grid(sel, mask)?;
            let scores = sel.scores().ok_or(AnalyticsError::MissingScores)?;
            for (q, (row, row_scores)) in sel.rows().iter().zip(scores).enumerate() {
                let max = row_scores
                    .iter()
                    .map(|&s| (s * scale) as f64)
                    .fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row_scores
                    .iter()
                    .map(|&s| ((s * scale) as f64 - max).exp())
                    .collect();
                let total: f64 = exps.iter().sum();
                for (&r, e) in row.iter().zip(exps) {
                    if mask.get(q, r) {
                        sums[r] += e / total;
                    }
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(r, s)| {
            let rows = (0..live_q).filter(|&q| mask.get(q, r)).count();
            if rows == 0 {
                0.0
            } else {
                s / rows as f64
            }
        })
        .collect())
}

pub fn vertical_profile(
    layer: usize,
    head: usize,
    input: ProfileInput<'_>,
    mask: &BlockCausalMask,
) -> Result<VerticalProfile, AnalyticsError> {
    let source = match input {
        ProfileInput::BlockMean(_) => ProfileSource::BlockMean,
        ProfileInput::MaskFrequency(_) => ProfileSource::MaskFrequency,
        ProfileInput::MaskScore(..) => ProfileSource::MaskScore,
    };
    let values = vertical_values(input, mask)?;
    let kurtosis = excess_kurtosis(&values).ok();
    Ok(VerticalProfile {
        layer,
        head,
        source,
        values,
        kurtosis,
    })
}

/// Fisher excess kurtosis `m4 / m2^2 - 3` with population moments.
pub fn excess_kurtosis(values: &[f64]) -> Result<f64, AnalyticsError> {
    if values.len() < 4 {
        return Err(AnalyticsError::DegenerateDistribution(format!(
            "{} values, need at least 4",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &x in values {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if m2.is_nan() || m2 <= 0.0 || !m4.is_finite() {
        return Err(AnalyticsError::DegenerateDistribution(
            "zero variance".into(),
        ));
    }
    Ok(m4 / (m2 * m2) - 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHead {
    pub layer: usize,
    pub head: usize,
    pub kurtosis: Option<f64>,
}

/// Orders heads by descending kurtosis; degenerate profiles go last. Ties
/// fall back to ascending `(layer, head)`.
pub fn rank_receiver_heads(
    profiles: &[VerticalProfile],
) -> Result<Vec<RankedHead>, AnalyticsError> {
    if profiles.iter().all(|p| p.kurtosis.is_none()) {
        return Err(AnalyticsError::NoValidProfiles);
    }
    let mut ranked: Vec<RankedHead> = profiles
        .iter()
        .map(|p| RankedHead {
            layer: p.layer,
            head: p.head,
            kurtosis: p.kurtosis,
        })
        .collect();
    ranked.sort_by(|a, b| {
        let key = |h: &RankedHead| h.kurtosis.unwrap_or(f64::NEG_INFINITY);
        key(b)
            .total_cmp(&key(a))
            .then((a.layer, a.head).cmp(&(b.layer, b.head)))
    });
    Ok(ranked)
}

/// Maps an effective sparsity `s` to a block count:
/// `k = floor(1 + (T / b_q - 1) * s)`, clamped to `[1, max(1, floor(T / b_q))]`.
pub fn effective_k(t: usize, b_q: usize, s: f64) -> Result<usize, AnalyticsError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(AnalyticsError::SparsityOutOfRange(s));
    }
    let ratio = t as f64 / b_q as f64;
    let k = (1.0 + (ratio - 1.0) * s).floor();
    let hi = ((t / b_q) as f64).max(1.0);
    Ok(k.clamp(1.0, hi) as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    #[serde(rename = "T")]
    pub t: usize,
    pub b_q: usize,
    pub b_k: usize,
    pub k: usize,
    pub selected_pairs: usize,
    pub valid_pairs: usize,
    pub pruned_fraction: f64,
}

/// Counts visible token pairs covered by the selection against all visible
/// pairs. Rows that have visible blocks but select none are rejected.
pub fn sparsity_stats(
    sel: &SparseBlockMask,
    mask: &BlockCausalMask,
) -> Result<SparsityStats, AnalyticsError> {
    check_mask_grid(sel, mask)?;
    for (q, row) in sel.rows().iter().enumerate() {
        if row.is_empty() && mask.valid_count(q) > 0 {
            return Err(AnalyticsError::InvalidMask(format!(
                "query block {q} selects nothing"
            )));
        }
    }
    let selected: usize = sel
        .rows()
        .iter()
        .enumerate()
        .flat_map(|(q, row)| row.iter().map(move |&r| (q, r)))
        .map(|(q, r)| mask.tile_pair_count(q, r))
        .sum();
    let valid = mask.total_pair_count();
    if valid == 0 {
        return Err(AnalyticsError::InvalidMask("no visible token pairs".into()));
    }
    let grid = sel.grid();
    Ok(SparsityStats {
        t: grid.t_orig(),
        b_q: grid.b_q(),
        b_k: grid.b_k(),
        k: sel.k(),
        selected_pairs: selected,
        valid_pairs: valid,
        pruned_fraction: 1.0 - selected as f64 / valid as f64,
    })
}

/// Mean profile value per category label; blocks without a label are skipped.
pub fn category_means(
    profile: &VerticalProfile,
    labels: &BTreeMap<usize, String>,
) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (r, &v) in profile.values.iter().enumerate() {
        if let Some(label) = labels.get(&r) {
            let e = acc.entry(label.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect()
}

/// `layer,head,source,block_index,value` rows.
pub fn profiles_csv(profiles: &[VerticalProfile]) -> String {
    let mut out = String::from("layer,head,source,block_index,value\n");
    for p in profiles {
        for (r, v) in p.values.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{r},{v}", p.layer, p.head, p.source.as_str());
        }
    }
    out
}

/// `layer,head,source,kurtosis` rows; degenerate profiles leave the value empty.
pub fn kurtosis_csv(profiles: &[VerticalProfile]) -> String {
    let mut out = String::from("layer,head,source,kurtosis\n");
    for p in profiles {
        let k = p.kurtosis.map(|k| k.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{k}", p.layer, p.head, p.source.as_str());
    }
    out
}
