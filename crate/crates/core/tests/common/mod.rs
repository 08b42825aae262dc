#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stream_trace::flow::{FlowGraph, MaskSet};
use stream_trace::{BlockGrid, Matrix, SparseBlockMask};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal-ish entries (sum of uniforms), reproducible per seed.
pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let s: f32 = (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).sum();
        s * 0.866
    })
}

/// Q/K whose block-max scores strictly decrease with key-block index:
/// Q entries in [1, 2], key rows of block `r` are `5^-r` times a vector with
/// entries in [1, 2], so every tile score lies in `5^-r * [d, 4d]`.
pub fn monotone_pair(rng: &mut ChaCha8Rng, t: usize, d: usize, b_k: usize) -> (Matrix, Matrix) {
    let q = Matrix::from_fn(t, d, |_, _| rng.gen_range(1.0f32..2.0));
    let k = Matrix::from_fn(t, d, |v, _| {
        let r = (v / b_k) as i32;
        rng.gen_range(1.0f32..2.0) * 5f32.powi(-r)
    });
    (q, k)
}

/// Random causal selections for `layers x heads`, `n_q` blocks of 4 tokens.
pub fn random_mask_set(
    seed: u64,
    layers: usize,
    heads: usize,
    n_q: usize,
    density: f64,
) -> MaskSet {
    let mut rng = rng(seed);
    let grid = BlockGrid::new(n_q * 4, 4, 4).unwrap();
    let mut set = MaskSet::new();
    for l in 0..layers {
        for h in 0..heads {
            let mut rows = Vec::new();
            let mut scores = Vec::new();
            for q in 0..n_q {
                let row: Vec<usize> = (0..=q).filter(|_| rng.gen_bool(density)).collect();
                scores.push(row.iter().map(|_| rng.gen_range(-2.0f32..2.0)).collect());
                rows.push(row);
            }
            set.insert(
                (l, h),
                SparseBlockMask::new(grid, n_q, rows, Some(scores)).unwrap(),
            );
        }
    }
    set
}

/// Edges on at least one needle-to-output path, by explicit path enumeration.
pub fn enumerate_path_edges(g: &FlowGraph) -> BTreeSet<(usize, usize, usize)> {
    let mut out_edges: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for e in &g.edges {
        out_edges.entry((e.layer, e.from)).or_default().push(e.to);
    }
    let mut marked = BTreeSet::new();
    let mut path: Vec<(usize, usize, usize)> = Vec::new();
    fn walk(
        layer: usize,
        block: usize,
        g: &FlowGraph,
        out_edges: &BTreeMap<(usize, usize), Vec<usize>>,
        path: &mut Vec<(usize, usize, usize)>,
        marked: &mut BTreeSet<(usize, usize, usize)>,
    ) {
        if layer == g.num_layers {
            if block == g.output {
                marked.extend(path.iter().copied());
            }
            return;
        }
        for &to in out_edges.get(&(layer, block)).into_iter().flatten() {
            path.push((layer, block, to));
            walk(layer + 1, to, g, out_edges, path, marked);
            path.pop();
        }
    }
    walk(0, g.needle, g, &out_edges, &mut path, &mut marked);
    marked
}
