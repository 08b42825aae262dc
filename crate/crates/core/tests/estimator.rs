mod common;

use proptest::prelude::*;
use stream_trace::oracle::{
    dense_scores, dense_softmax, exact_topk_mask, naive_stream_reference, recall_against_exact,
    DEFAULT_MAX_DENSE_T,
};
use stream_trace::stream::{apply_mask, iteration_count, masked_softmax};
use stream_trace::{
    block_mask, causal_block_mask, estimate_mask, estimate_mask_with_stats, BlockGrid, Matrix,
    StreamParams, TokenMask,
};

const BLOCKS: [usize; 4] = [4, 8, 16, 32];

fn case(seed: u64, t: usize, d: usize) -> (Matrix, Matrix) {
    let mut rng = common::rng(seed);
    let q = common::gaussian(&mut rng, t, d);
    let k = common::gaussian(&mut rng, t, d);
    (q, k)
}

#[test]
fn fixed_seed_t256_matches_reference() {
    let (q, k) = case(20251019, 256, 16);
    let mask = causal_block_mask(BlockGrid::new(256, 8, 8).unwrap());
    let params = StreamParams::new(8, 8, 4);
    let est = estimate_mask(&q, &k, &mask, &params).unwrap();
    let naive = naive_stream_reference(&q, &k, &mask, &params, DEFAULT_MAX_DENSE_T).unwrap();
    assert_eq!(est.rows(), naive.rows());
    assert_eq!(est.scores(), naive.scores());
    est.check_selection(&mask).unwrap();
}

#[test]
fn monotone_scores_are_exact() {
    let mut rng = common::rng(7);
    let (q, k) = common::monotone_pair(&mut rng, 256, 8, 8);
    let mask = causal_block_mask(BlockGrid::new(256, 8, 8).unwrap());
    let est = estimate_mask(&q, &k, &mask, &StreamParams::new(8, 8, 4)).unwrap();
    let exact = exact_topk_mask(&q, &k, &mask, 4, DEFAULT_MAX_DENSE_T).unwrap();
    for qb in 3..32 {
        assert_eq!(est.row(qb), &[0, 1, 2, 3]);
    }
    assert_eq!(est.rows(), exact.rows());
    assert_eq!(recall_against_exact(&est, &exact).unwrap().mean, 1.0);
}

#[test]
fn all_zero_queries_tie_identically() {
    let t = 128;
    let q = Matrix::zeros(t, 4);
    let (_, k) = case(3, t, 4);
    for b in [4, 8] {
        let mask = causal_block_mask(BlockGrid::new(t, b, b).unwrap());
        for top in 1..=5 {
            let p = StreamParams::new(b, b, top);
            let est = estimate_mask(&q, &k, &mask, &p).unwrap();
            let naive = naive_stream_reference(&q, &k, &mask, &p, DEFAULT_MAX_DENSE_T).unwrap();
            assert_eq!(est.rows(), naive.rows());
            est.check_selection(&mask).unwrap();
        }
    }
}

#[test]
fn full_k_sparse_scores_equal_dense() {
    let t = 100;
    let (q, k) = case(11, t, 8);
    let grid = BlockGrid::new(t, 16, 16).unwrap();
    let mask = causal_block_mask(grid);
    let sel = estimate_mask(&q, &k, &mask, &StreamParams::new(16, 16, grid.n_k())).unwrap();
    let sparse = apply_mask(&q, &k, &sel, &mask).unwrap();
    let dense = dense_scores(&q, &k, &mask, DEFAULT_MAX_DENSE_T).unwrap();
    assert_eq!(sparse.to_dense(f32::NEG_INFINITY), dense);

    let probs = masked_softmax(&sparse).unwrap().to_dense(0.0);
    let dense_p = dense_softmax(&dense);
    for (a, b) in probs.as_slice().iter().zip(dense_p.as_slice()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn sparse_rows_sum_to_one() {
    let t = 200;
    let (q, k) = case(12, t, 8);
    let grid = BlockGrid::new(t, 8, 8).unwrap();
    let mask = causal_block_mask(grid);
    let sel = estimate_mask(&q, &k, &mask, &StreamParams::new(8, 8, 3)).unwrap();
    let probs = masked_softmax(&apply_mask(&q, &k, &sel, &mask).unwrap()).unwrap();
    for u in 0..t {
        let sum: f64 = probs
            .row_entries(u, |_| true)
            .iter()
            .map(|e| e.1 as f64)
            .sum();
        assert!((sum - 1.0).abs() < 1e-6, "row {u}: {sum}");
    }
}

#[test]
fn mixed_block_sizes_can_leave_empty_token_rows() {
    // Query block 0 covers tokens 0..8; choosing only key block 1 (tokens 4..8)
    // leaves tokens 0..4 without a visible key.
    let grid = BlockGrid::new(8, 8, 4).unwrap();
    let mask = causal_block_mask(grid);
    let (q, k) = case(5, 8, 2);
    let sel = stream_trace::SparseBlockMask::new(grid, 1, vec![vec![1]], None).unwrap();
    let scores = apply_mask(&q, &k, &sel, &mask).unwrap();
    assert!(matches!(
        masked_softmax(&scores),
        Err(stream_trace::stream::StreamError::EmptyRow { token: 0 })
    ));
}

#[test]
fn custom_token_mask_matches_reference() {
    // Sliding window of 24 tokens plus a 4-token sink.
    let t = 96;
    let bits: Vec<bool> = (0..t * t)
        .map(|i| {
            let (u, v) = (i / t, i % t);
            v <= u && (u - v < 24 || v < 4)
        })
        .collect();
    let (q, k) = case(99, t, 8);
    let mask = block_mask(
        BlockGrid::new(t, 8, 8).unwrap(),
        TokenMask::custom(t, bits).unwrap(),
    )
    .unwrap();
    for top in 1..=4 {
        let p = StreamParams::new(8, 8, top);
        let est = estimate_mask(&q, &k, &mask, &p).unwrap();
        let naive = naive_stream_reference(&q, &k, &mask, &p, DEFAULT_MAX_DENSE_T).unwrap();
        assert_eq!(est.rows(), naive.rows());
        est.check_selection(&mask).unwrap();
    }
}

#[test]
fn random_recall_is_recorded() {
    // No recall bound is asserted for unstructured inputs; the figure is only
    // printed for inspection.
    let (q, k) = case(2024, 256, 16);
    let mask = causal_block_mask(BlockGrid::new(256, 8, 8).unwrap());
    let est = estimate_mask(&q, &k, &mask, &StreamParams::new(8, 8, 4)).unwrap();
    let exact = exact_topk_mask(&q, &k, &mask, 4, DEFAULT_MAX_DENSE_T).unwrap();
    let recall = recall_against_exact(&est, &exact).unwrap();
    assert!((0.0..=1.0).contains(&recall.mean));
    println!("random gaussian T=256 b=8 k=4 recall = {:.4}", recall.mean);
}

fn arb_case() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..=200, 0usize..4, 0usize..4, 1usize..=8, any::<u64>())
        .prop_map(|(t, bq, bk, k, seed)| (t, BLOCKS[bq], BLOCKS[bk], k, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_naive_reference((t, b_q, b_k, top, seed) in arb_case()) {
        let grid = BlockGrid::new(t, b_q, b_k).unwrap();
        let top = top.min(grid.n_k());
        let (q, k) = case(seed, t, 4);
        let mask = causal_block_mask(grid);
        let p = StreamParams::new(b_q, b_k, top);
        let (est, stats) = estimate_mask_with_stats(&q, &k, &mask, &p).unwrap();
        let naive = naive_stream_reference(&q, &k, &mask, &p, DEFAULT_MAX_DENSE_T).unwrap();
        prop_assert_eq!(est.rows(), naive.rows());
        est.check_selection(&mask).unwrap();

        let n_it = iteration_count(grid.n_k(), top);
        prop_assert!(stats.max_row_search_calls <= 2 * top * n_it);
        let log_nk = iteration_count(grid.n_k(), 1);
        prop_assert!(stats.search_score_calls <= grid.n_q() * 2 * top * log_nk);

        let sparse = apply_mask(&q, &k, &est, &mask).unwrap();
        prop_assert!(sparse.stored_entries() <= grid.n_q() * top * b_q * b_k);
    }

    #[test]
    fn deterministic_and_scale_invariant(seed in any::<u64>(), c in 0.01f32..100.0) {
        let (q, k) = case(seed, 120, 4);
        let mask = causal_block_mask(BlockGrid::new(120, 8, 8).unwrap());
        let p = StreamParams::new(8, 8, 3);
        let a = estimate_mask(&q, &k, &mask, &p).unwrap();
        let b = estimate_mask(&q, &k, &mask, &p).unwrap();
        prop_assert_eq!(&a, &b);
        // Power-of-two scaling is exact in f32, so scores keep their order bit for bit.
        let pow2 = 2f32.powi((c.log2().round()) as i32);
        let scaled = estimate_mask(&q.scaled(pow2), &k, &mask, &p).unwrap();
        prop_assert_eq!(a.rows(), scaled.rows());
    }

    #[test]
    fn monotone_constructions_are_exact(seed in any::<u64>(), t in 16usize..=256, bi in 0usize..3, top in 1usize..=6) {
        let b = BLOCKS[bi];
        let grid = BlockGrid::new(t, b, b).unwrap();
        let top = top.min(grid.n_k());
        let mut rng = common::rng(seed);
        let (q, k) = common::monotone_pair(&mut rng, t, 4, b);
        let mask = causal_block_mask(grid);
        let est = estimate_mask(&q, &k, &mask, &StreamParams::new(b, b, top)).unwrap();
        let exact = exact_topk_mask(&q, &k, &mask, top, DEFAULT_MAX_DENSE_T).unwrap();
        prop_assert_eq!(est.rows(), exact.rows());
        prop_assert_eq!(recall_against_exact(&est, &exact).unwrap().mean, 1.0);
    }

    #[test]
    fn block_mask_is_block_max_of_tokens(t in 1usize..=128, bq in 0usize..6, bk in 0usize..6) {
        let sizes = [1, 2, 4, 8, 16, 32];
        let grid = BlockGrid::new(t, sizes[bq], sizes[bk]).unwrap();
        let fast = causal_block_mask(grid);
        for q in 0..grid.n_q() {
            for r in 0..grid.n_k() {
                let mut any = false;
                for u in q * grid.b_q()..(q + 1) * grid.b_q() {
                    for v in r * grid.b_k()..(r + 1) * grid.b_k() {
                        any |= u < t && v < t && v <= u;
                    }
                }
                prop_assert_eq!(fast.get(q, r), any, "tile ({}, {})", q, r);
            }
        }
    }
}
