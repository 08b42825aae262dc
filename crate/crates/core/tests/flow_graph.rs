mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::Rng;
use stream_trace::flow::{
    build_graph, subtract_masks, EdgeClass, FlowGraph, GraphOptions, MaskSet,
};
use stream_trace::{causal_block_mask, BlockGrid};

#[test]
fn reachability_matches_path_enumeration_on_200_graphs() {
    let mut rng = common::rng(5150);
    for i in 0..200u64 {
        let layers = rng.gen_range(1..=4);
        let heads = rng.gen_range(1..=3);
        let n_q = rng.gen_range(2..=12);
        let set = common::random_mask_set(i, layers, heads, n_q, rng.gen_range(0.05..0.4));
        let needle = rng.gen_range(0..n_q);
        let output = rng.gen_range(needle..n_q);
        let residual = rng.gen_bool(0.3);
        let g = build_graph(
            &set,
            needle,
            output,
            GraphOptions {
                residual_edges: residual,
            },
        )
        .unwrap();
        assert!(g.edges.len() <= 500);
        let want = common::enumerate_path_edges(&g);
        let got: BTreeSet<_> = g
            .needle_path_edges()
            .map(|e| (e.layer, e.from, e.to))
            .collect();
        assert_eq!(got, want, "graph {i}");
    }
}

#[test]
fn subtraction_matches_dense_boolean_difference() {
    let success = common::random_mask_set(6, 3, 2, 10, 0.5);
    let fail = common::random_mask_set(3, 3, 2, 10, 0.3);
    let diff = subtract_masks(&success, &fail).unwrap();
    for (key, d) in &diff {
        let mut dense_s = [[false; 10]; 10];
        let mut dense_f = [[false; 10]; 10];
        for q in 0..10 {
            for &r in success[key].row(q) {
                dense_s[q][r] = true;
            }
            for &r in fail[key].row(q) {
                dense_f[q][r] = true;
            }
        }
        for q in 0..10 {
            for r in 0..10 {
                assert_eq!(d.contains(q, r), dense_s[q][r] && !dense_f[q][r]);
                if d.contains(q, r) {
                    assert_eq!(d.score(q, r), success[key].score(q, r));
                }
            }
        }
    }
}

#[test]
fn estimated_masks_subtract_cleanly() {
    // Success at k = 6 against fail at k = 3 on the same synthetic head.
    let mut rng = common::rng(42);
    let t = 256;
    let q = common::gaussian(&mut rng, t, 8);
    let k = common::gaussian(&mut rng, t, 8);
    let mask = causal_block_mask(BlockGrid::new(t, 16, 16).unwrap());
    let est = |top| {
        stream_trace::estimate_mask(&q, &k, &mask, &stream_trace::StreamParams::new(16, 16, top))
            .unwrap()
    };
    let success: MaskSet = [((0, 0), est(6))].into_iter().collect();
    let fail: MaskSet = [((0, 0), est(3))].into_iter().collect();
    let diff = subtract_masks(&success, &fail).unwrap();
    let d = &diff[&(0, 0)];
    for qb in 0..16 {
        for r in 0..16 {
            let want = success[&(0, 0)].contains(qb, r) && !fail[&(0, 0)].contains(qb, r);
            assert_eq!(d.contains(qb, r), want);
        }
    }
}

proptest! {
    #[test]
    fn diff_rows_are_subsets_and_disjoint(a in any::<u64>(), b in any::<u64>()) {
        let s = common::random_mask_set(a, 2, 2, 8, 0.5);
        let f = common::random_mask_set(b, 2, 2, 8, 0.5);
        let d = subtract_masks(&s, &f).unwrap();
        for (key, m) in &d {
            for q in 0..8 {
                for &r in m.row(q) {
                    prop_assert!(s[key].contains(q, r));
                    prop_assert!(!f[key].contains(q, r));
                }
            }
        }
    }

    #[test]
    fn head_labels_do_not_change_the_graph(seed in any::<u64>()) {
        let set = common::random_mask_set(seed, 2, 3, 8, 0.3);
        // Relabel heads h -> 2 - h; the collapsed edges must keep weight and class.
        let relabeled: MaskSet = set.iter().map(|(&(l, h), m)| ((l, 2 - h), m.clone())).collect();
        let g1 = build_graph(&set, 0, 7, GraphOptions::default()).unwrap();
        let g2 = build_graph(&relabeled, 0, 7, GraphOptions::default()).unwrap();
        prop_assert_eq!(g1.edges.len(), g2.edges.len());
        for (e1, e2) in g1.edges.iter().zip(&g2.edges) {
            prop_assert_eq!((e1.layer, e1.from, e1.to), (e2.layer, e2.from, e2.to));
            prop_assert_eq!(e1.weight, e2.weight);
            prop_assert_eq!(e1.class, e2.class);
            let mapped: BTreeSet<usize> = e1.heads.iter().map(|h| 2 - h).collect();
            prop_assert_eq!(mapped, e2.heads.iter().copied().collect::<BTreeSet<_>>());
        }
    }

    #[test]
    fn json_export_is_a_fixpoint(seed in any::<u64>()) {
        let g = build_graph(&common::random_mask_set(seed, 3, 2, 6, 0.4), 1, 5, GraphOptions::default()).unwrap();
        let json = g.to_json();
        let back = FlowGraph::from_json(&json).unwrap();
        prop_assert_eq!(back.to_json(), json);
        prop_assert_eq!(back.to_dot(), g.to_dot());
        prop_assert!(g.edges.iter().all(|e| e.from <= e.to));
        prop_assert!(g.edges.iter().all(|e| matches!(e.class, EdgeClass::NeedlePath | EdgeClass::Other)));
    }
}
