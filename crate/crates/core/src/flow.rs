//! Layered attention-flow graphs built from per-head block masks.
//!
//! A selected tile `(q, r)` of a head in traced layer `l` becomes an edge from
//! node `(l, r)` to node `(l + 1, q)`: the head reads key block `r` and writes
//! into the next residual state of query block `q`. Parallel edges from
//! different heads collapse to one edge carrying the largest weight and the
//! list of contributing heads.
//!
//! Traced layers are numbered densely: graph layer `i` is the `i`-th smallest
//! model layer present in the mask set, so dense leading layers that were
//! never masked do not leave gaps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::mask::SparseBlockMask;

/// Masks keyed by model `(layer, head)`.
pub type MaskSet = BTreeMap<(usize, usize), SparseBlockMask>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("layer/head set mismatch: {0}")]
    LayerSetMismatch(String),
    #[error("block {block} out of range for {n_q} query blocks")]
    BlockOutOfRange { block: usize, n_q: usize },
    #[error("malformed graph: {0}")]
    Malformed(String),
}

/// Per-row set difference `success \ fail`, keeping the success scores.
pub fn subtract_masks(success: &MaskSet, fail: &MaskSet) -> Result<MaskSet, FlowError> {
    let a: BTreeSet<_> = success.keys().collect();
    let b: BTreeSet<_> = fail.keys().collect();
    if a != b {
        let only: Vec<_> = a.symmetric_difference(&b).collect();
        return Err(FlowError::LayerSetMismatch(format!(
            "heads present in only one set: {only:?}"
        )));
    }
    let mut out = MaskSet::new();
    for (&key, s) in success {
        let f = &fail[&key];
        if s.grid() != f.grid() {
            return Err(FlowError::GridMismatch(format!(
                "layer {} head {}: {:?} vs {:?}",
                key.0,
                key.1,
                s.grid(),
                f.grid()
            )));
        }
        let mut rows = Vec::with_capacity(s.rows().len());
        let mut scores = s.scores().map(|_| Vec::with_capacity(s.rows().len()));
        for (q, row) in s.rows().iter().enumerate() {
            let keep: Vec<usize> = row.iter().copied().filter(|&r| !f.contains(q, r)).collect();
            if let Some(sc) = scores.as_mut() {
                sc.push(
                    keep.iter()
                        .map(|&r| s.score(q, r).expect("scored row"))
                        .collect(),
                );
            }
            rows.push(keep);
        }
        let diff = SparseBlockMask::new(*s.grid(), s.k(), rows, scores)
            .map_err(|e| FlowError::Malformed(e.to_string()))?;
        out.insert(key, diff);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeClass {
    NeedlePath,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEdge {
    /// Graph layer of the source node; the target sits at `layer + 1`.
    pub layer: usize,
    pub from: usize,
    pub to: usize,
    pub weight: f32,
    /// Contributing heads, ascending. Empty for residual edges.
    pub heads: Vec<usize>,
    pub class: EdgeClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowNode {
    pub layer: usize,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowGraph {
    #[serde(rename = "L")]
    pub num_layers: usize,
    pub n_q: usize,
    pub needle: usize,
    pub output: usize,
    /// Model layer traced by each graph layer.
    pub model_layers: Vec<usize>,
    pub nodes: Vec<FlowNode>,
    pub edges: Vec<FlowEdge>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GraphOptions {
    /// Add `(l, b) -> (l + 1, b)` residual edges.
    pub residual_edges: bool,
}

/// Builds the flow graph and marks every edge lying on a path from
/// `(0, needle)` to `(L, output)`.
pub fn build_graph(
    masks: &MaskSet,
    needle: usize,
    output: usize,
    opts: GraphOptions,
) -> Result<FlowGraph, FlowError> {
    let first = masks
        .values()
        .next()
        .ok_or_else(|| FlowError::LayerSetMismatch("no masks".into()))?;
    let grid = *first.grid();
    if grid.b_q() != grid.b_k() {
        return Err(FlowError::LayerSetMismatch(format!(
            "graph nodes need square blocks, got b_q = {} and b_k = {}",
            grid.b_q(),
            grid.b_k()
        )));
    }
    if let Some(((l, h), m)) = masks.iter().find(|(_, m)| m.grid() != &grid) {
        return Err(FlowError::LayerSetMismatch(format!(
            "layer {l} head {h} uses grid {:?}, expected {grid:?}",
            m.grid()
        )));
    }
    let n_q = grid.live_q();
    for block in [needle, output] {
        if block >= n_q {
            return Err(FlowError::BlockOutOfRange { block, n_q });
        }
    }

    let model_layers: Vec<usize> = masks
        .keys()
        .map(|&(l, _)| l)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let layer_index: BTreeMap<usize, usize> = model_layers
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();
    let num_layers = model_layers.len();

    let mut collapsed: BTreeMap<(usize, usize, usize), (f32, Vec<usize>)> = BTreeMap::new();
    for (&(layer, head), mask) in masks {
        let gl = layer_index[&layer];
        for (q, row) in mask.rows().iter().enumerate() {
            for &r in row {
                let w = mask.score(q, r).unwrap_or(1.0);
                let e = collapsed
                    .entry((gl, r, q))
                    .or_insert((f32::NEG_INFINITY, Vec::new()));
                e.0 = e.0.max(w);
                e.1.push(head);
            }
        }
    }
    if opts.residual_edges {
        for gl in 0..num_layers {
            for b in 0..n_q {
                collapsed.entry((gl, b, b)).or_insert((0.0, Vec::new()));
            }
        }
    }

    let mut edges: Vec<FlowEdge> = collapsed
        .into_iter()
        .map(|((layer, from, to), (weight, mut heads))| {
            heads.sort_unstable();
            heads.dedup();
            FlowEdge {
                layer,
                from,
                to,
                weight,
                heads,
                class: EdgeClass::Other,
            }
        })
        .collect();
    classify(&mut edges, num_layers, n_q, needle, output);

    let nodes = (0..=num_layers)
        .flat_map(|layer| (0..n_q).map(move |block| FlowNode { layer, block }))
        .collect();
    Ok(FlowGraph {
        num_layers,
        n_q,
        needle,
        output,
        model_layers,
        nodes,
        edges,
    })
}

/// Marks edges whose source is reachable from the needle and whose target
/// reaches the output. `edges` must be sorted by layer.
fn classify(edges: &mut [FlowEdge], num_layers: usize, n_q: usize, needle: usize, output: usize) {
    let mut fwd = vec![vec![false; n_q]; num_layers + 1];
    fwd[0][needle] = true;
    for e in edges.iter() {
        if fwd[e.layer][e.from] {
            fwd[e.layer + 1][e.to] = true;
        }
    }
    let mut bwd = vec![vec![false; n_q]; num_layers + 1];
    bwd[num_layers][output] = true;
    for e in edges.iter().rev() {
        if bwd[e.layer + 1][e.to] {
            bwd[e.layer][e.from] = true;
        }
    }
    for e in edges.iter_mut() {
        e.class = if fwd[e.layer][e.from] && bwd[e.layer + 1][e.to] {
            EdgeClass::NeedlePath
        } else {
            EdgeClass::Other
        };
    }
}

impl FlowGraph {
    pub fn needle_path_edges(&self) -> impl Iterator<Item = &FlowEdge> {
        self.edges
            .iter()
            .filter(|e| e.class == EdgeClass::NeedlePath)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, FlowError> {
        let g: FlowGraph =
            serde_json::from_str(text).map_err(|e| FlowError::Malformed(e.to_string()))?;
        if g.needle >= g.n_q || g.output >= g.n_q {
            return Err(FlowError::Malformed("needle/output outside n_q".into()));
        }
        if let Some(e) = g
            .edges
            .iter()
            .find(|e| e.layer >= g.num_layers || e.from >= g.n_q || e.to >= g.n_q)
        {
            return Err(FlowError::Malformed(format!("edge out of range: {e:?}")));
        }
        Ok(g)
    }

    /// Graphviz rendering: needle-path edges red, all others blue.
    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph flow {{");
        let _ = writeln!(out, "  rankdir=LR;");
        let _ = writeln!(out, "  node [shape=circle];");
        for n in &self.nodes {
            let mut attrs = format!("label=\"{}:{}\"", n.layer, n.block);
            if n.layer == 0 && n.block == self.needle {
                attrs.push_str(", style=filled, fillcolor=gold");
            } else if n.layer == self.num_layers && n.block == self.output {
                attrs.push_str(", style=filled, fillcolor=lightgreen");
            }
            let _ = writeln!(out, "  \"l{}_b{}\" [{attrs}];", n.layer, n.block);
        }
        for e in &self.edges {
            let color = match e.class {
                EdgeClass::NeedlePath => "red",
                EdgeClass::Other => "blue",
            };
            let _ = writeln!(
                out,
                "  \"l{}_b{}\" -> \"l{}_b{}\" [color={color}, label=\"{}\"];",
                e.layer,
                e.from,
                e.layer + 1,
                e.to,
                e.weight
            );
        }
        let _ = writeln!(out, "}}");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_grid::BlockGrid;

    fn mask_with(n_q: usize, entries: &[(usize, usize, f32)]) -> SparseBlockMask {
        let grid = BlockGrid::new(n_q * 4, 4, 4).unwrap();
        let mut rows = vec![Vec::new(); n_q];
        let mut scores = vec![Vec::new(); n_q];
        for &(q, r, s) in entries {
            rows[q].push(r);
            scores[q].push(s);
        }
        SparseBlockMask::new(grid, 8, rows, Some(scores)).unwrap()
    }

    #[test]
    fn subtract_identical_is_empty() {
        let m = mask_with(8, &[(5, 2, 1.0), (5, 5, 2.0), (3, 0, 0.5)]);
        let set: MaskSet = [((0, 0), m)].into_iter().collect();
        let diff = subtract_masks(&set, &set).unwrap();
        assert!(diff[&(0, 0)].rows().iter().all(Vec::is_empty));
    }

    #[test]
    fn subtract_row() {
        let s = mask_with(10, &[(9, 2, 0.1), (9, 5, 0.5), (9, 9, 0.9)]);
        let f = mask_with(10, &[(9, 2, 7.0)]);
        let a: MaskSet = [((1, 0), s)].into_iter().collect();
        let b: MaskSet = [((1, 0), f)].into_iter().collect();
        let d = subtract_masks(&a, &b).unwrap();
        assert_eq!(d[&(1, 0)].row(9), &[5, 9]);
        assert_eq!(d[&(1, 0)].score(9, 9), Some(0.9));
    }

    #[test]
    fn subtract_rejects_mismatched_sets() {
        let a: MaskSet = [((0, 0), mask_with(4, &[]))].into_iter().collect();
        let b: MaskSet = [((0, 1), mask_with(4, &[]))].into_iter().collect();
        assert!(matches!(
            subtract_masks(&a, &b),
            Err(FlowError::LayerSetMismatch(_))
        ));
        let c: MaskSet = [((0, 0), mask_with(5, &[]))].into_iter().collect();
        assert!(matches!(
            subtract_masks(&a, &c),
            Err(FlowError::GridMismatch(_))
        ));
    }

    #[test]
    fn single_edge_on_path() {
        let set: MaskSet = [((0, 0), mask_with(8, &[(5, 2, 1.5)]))]
            .into_iter()
            .collect();
        let g = build_graph(&set, 2, 5, GraphOptions::default()).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].class, EdgeClass::NeedlePath);
        let set: MaskSet = [((0, 0), mask_with(8, &[(5, 3, 1.5)]))]
            .into_iter()
            .collect();
        let g = build_graph(&set, 2, 5, GraphOptions::default()).unwrap();
        assert_eq!(g.edges[0].class, EdgeClass::Other);
    }

    #[test]
    fn two_layer_chain_with_stray() {
        let set: MaskSet = [
            ((0, 0), mask_with(32, &[(7, 2, 1.0), (10, 4, 1.0)])),
            ((1, 0), mask_with(32, &[(30, 7, 1.0)])),
        ]
        .into_iter()
        .collect();
        let g = build_graph(&set, 2, 30, GraphOptions::default()).unwrap();
        let class = |l, f, t| {
            g.edges
                .iter()
                .find(|e| (e.layer, e.from, e.to) == (l, f, t))
                .unwrap()
                .class
        };
        assert_eq!(class(0, 2, 7), EdgeClass::NeedlePath);
        assert_eq!(class(1, 7, 30), EdgeClass::NeedlePath);
        assert_eq!(class(0, 4, 10), EdgeClass::Other);
    }

    #[test]
    fn heads_collapse_by_max() {
        let set: MaskSet = [
            ((3, 1), mask_with(4, &[(3, 1, 0.5)])),
            ((3, 0), mask_with(4, &[(3, 1, 2.0)])),
        ]
        .into_iter()
        .collect();
        let g = build_graph(&set, 1, 3, GraphOptions::default()).unwrap();
        assert_eq!(g.model_layers, vec![3]);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].weight, 2.0);
        assert_eq!(g.edges[0].heads, vec![0, 1]);
    }

    #[test]
    fn residual_edges_connect_layers() {
        let set: MaskSet = [
            ((0, 0), mask_with(4, &[(2, 0, 1.0)])),
            ((1, 0), mask_with(4, &[(0, 0, 1.0)])),
        ]
        .into_iter()
        .collect();
        let without = build_graph(&set, 0, 2, GraphOptions::default()).unwrap();
        assert_eq!(without.needle_path_edges().count(), 0);
        let with = build_graph(
            &set,
            0,
            2,
            GraphOptions {
                residual_edges: true,
            },
        )
        .unwrap();
        // (0,0) -> (1,2) by attention, then (1,2) -> (2,2) by residual.
        assert_eq!(with.needle_path_edges().count(), 2);
    }

    #[test]
    fn range_and_shape_errors() {
        let set: MaskSet = [((0, 0), mask_with(4, &[]))].into_iter().collect();
        assert_eq!(
            build_graph(&set, 4, 0, GraphOptions::default()),
            Err(FlowError::BlockOutOfRange { block: 4, n_q: 4 })
        );
        assert!(build_graph(&MaskSet::new(), 0, 0, GraphOptions::default()).is_err());
        let grid = BlockGrid::new(16, 4, 8).unwrap();
        let rect = SparseBlockMask::new(grid, 1, vec![vec![]; 4], None).unwrap();
        let set: MaskSet = [((0, 0), rect)].into_iter().collect();
        assert!(matches!(
            build_graph(&set, 0, 0, GraphOptions::default()),
            Err(FlowError::LayerSetMismatch(_))
        ));
    }

    #[test]
    fn empty_graph_exports_nodes_only() {
        let set: MaskSet = [((0, 0), mask_with(2, &[]))].into_iter().collect();
        let g = build_graph(&set, 0, 1, GraphOptions::default()).unwrap();
        assert!(g.edges.is_empty());
        assert_eq!(g.nodes.len(), 4);
        let dot = g.to_dot();
        assert!(!dot.contains("->"));
        assert_eq!(dot.matches("label=").count(), 4);
    }

    #[test]
    fn one_edge_golden() {
        let set: MaskSet = [((2, 1), mask_with(2, &[(1, 0, 0.75)]))]
            .into_iter()
            .collect();
        let g = build_graph(&set, 0, 1, GraphOptions::default()).unwrap();
        let dot = "digraph flow {
  rankdir=LR;
  node [shape=circle];
  \"l0_b0\" [label=\"0:0\", style=filled, fillcolor=gold];
  \"l0_b1\" [label=\"0:1\"];
  \"l1_b0\" [label=\"1:0\"];
  \"l1_b1\" [label=\"1:1\", style=filled, fillcolor=lightgreen];
  \"l0_b0\" -> \"l1_b1\" [color=red, label=\"0.75\"];
}
";
        assert_eq!(g.to_dot(), dot);
        let json = g.to_json();
        let compact: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(
            compact["edges"],
            serde_json::json!([{"layer":0,"from":0,"to":1,"weight":0.75,"heads":[1],"class":"needle_path"}])
        );
        assert_eq!(compact["L"], 1);
        assert_eq!(compact["model_layers"], serde_json::json!([2]));
        assert_eq!(FlowGraph::from_json(&json).unwrap().to_json(), json);
    }
}
