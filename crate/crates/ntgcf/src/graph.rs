//! Bipartite interaction graph, the symmetrically normalized adjacency, and
//! the L-hop structural similarity operator.
//!
//! Nodes live in one unified id space: users occupy ids `0..num_users`,
//! items occupy `num_users..num_users+num_items`. The similarity operator
//! represents S = (1/(L+1)) * sum_{l=0..L} A_norm^l and is only ever applied
//! to matrices (or materialized row-by-row on request); the full S matrix is
//! never formed globally because its fill-in is quadratic in nodes.

use std::sync::Arc;

use crate::bits::BitSet;
use crate::data::DatasetBundle;
use crate::mat::{axpy, Mat};
use crate::rng::stream;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("edge ({user}, {item}) out of range for {num_users} users / {num_items} items")]
    EdgeOutOfRange { user: u32, item: u32, num_users: u32, num_items: u32 },
    #[error("input has {got} rows but the graph has {want} nodes")]
    DimensionMismatch { got: usize, want: usize },
    #[error(
        "row materialization budget exceeded at node {node}: row has {row_len} entries, \
         {used} of {budget} already used"
    )]
    BudgetExceeded { node: u32, row_len: usize, used: usize, budget: usize },
}

/// Which edges of a bundle form the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeSet {
    Train,
    TrainValid,
}

/// Compressed sparse rows over one side of the bipartite graph.
#[derive(Debug, Clone)]
pub struct Csr {
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl Csr {
    fn build(num_rows: usize, pairs: impl Iterator<Item = (u32, u32)> + Clone) -> Csr {
        let mut counts = vec![0usize; num_rows + 1];
        for (r, _) in pairs.clone() {
            counts[r as usize + 1] += 1;
        }
        for k in 1..counts.len() {
            counts[k] += counts[k - 1];
        }
        let mut targets = vec![0u32; counts[num_rows]];
        let mut cursor = counts.clone();
        for (r, c) in pairs {
            targets[cursor[r as usize]] = c;
            cursor[r as usize] += 1;
        }
        for r in 0..num_rows {
            targets[counts[r]..counts[r + 1]].sort_unstable();
        }
        Csr { offsets: counts, targets }
    }

    pub fn neighbors(&self, r: usize) -> &[u32] {
        &self.targets[self.offsets[r]..self.offsets[r + 1]]
    }

    pub fn len(&self, r: usize) -> usize {
        self.offsets[r + 1] - self.offsets[r]
    }
}

/// Immutable bipartite user-item graph.
#[derive(Debug, Clone)]
pub struct InteractionGraph {
    pub num_users: u32,
    pub num_items: u32,
    /// Per user: sorted item ids (item-local, i.e. 0-based item index).
    pub user_adj: Csr,
    /// Per item: sorted user ids. Transpose of `user_adj`.
    pub item_adj: Csr,
}

impl InteractionGraph {
    pub fn from_edges(
        num_users: u32,
        num_items: u32,
        edges: &[(u32, u32)],
    ) -> Result<Self, GraphError> {
        for &(u, i) in edges {
            if u >= num_users || i >= num_items {
                return Err(GraphError::EdgeOutOfRange {
                    user: u,
                    item: i,
                    num_users,
                    num_items,
                });
            }
        }
        let user_adj = Csr::build(num_users as usize, edges.iter().copied());
        let item_adj =
            Csr::build(num_items as usize, edges.iter().map(|&(u, i)| (i, u)));
        Ok(InteractionGraph { num_users, num_items, user_adj, item_adj })
    }

    pub fn num_nodes(&self) -> usize {
        (self.num_users + self.num_items) as usize
    }

    pub fn item_node(&self, item: u32) -> u32 {
        self.num_users + item
    }

    pub fn is_user_node(&self, node: u32) -> bool {
        node < self.num_users
    }

    /// Interaction count of a node (unified id).
    pub fn degree(&self, node: u32) -> usize {
        if self.is_user_node(node) {
            self.user_adj.len(node as usize)
        } else {
            self.item_adj.len((node - self.num_users) as usize)
        }
    }

    /// True if user u interacted with item i. Neighbor lists are sorted.
    pub fn has_edge(&self, u: u32, i: u32) -> bool {
        self.user_adj.neighbors(u as usize).binary_search(&i).is_ok()
    }
}

pub fn build_graph(bundle: &DatasetBundle, which: EdgeSet) -> Result<InteractionGraph, GraphError> {
    let mut edges = bundle.train.clone();
    if which == EdgeSet::TrainValid {
        edges.extend_from_slice(&bundle.valid);
    }
    InteractionGraph::from_edges(bundle.num_users, bundle.num_items, &edges)
}

/// Unified-node-space normalized adjacency in CSR form: weight on edge
/// (u, i) is 1/sqrt(deg(u) * deg(i)); rows of zero-degree nodes stay empty.
#[derive(Debug, Clone)]
struct NormalizedAdjacency {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<f64>,
}

impl NormalizedAdjacency {
    fn build(g: &InteractionGraph) -> Self {
        let n = g.num_nodes();
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0usize);
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for node in 0..n as u32 {
            let (neighbors, local): (&[u32], bool) = if g.is_user_node(node) {
                (g.user_adj.neighbors(node as usize), true)
            } else {
                (g.item_adj.neighbors((node - g.num_users) as usize), false)
            };
            let deg = neighbors.len() as f64;
            for &other in neighbors {
                let other_node = if local { g.item_node(other) } else { other };
                targets.push(other_node);
                weights.push(1.0 / (deg * g.degree(other_node) as f64).sqrt());
            }
            offsets.push(targets.len());
        }
        NormalizedAdjacency { offsets, targets, weights }
    }
}

/// The structural similarity operator S = (1/(L+1)) * sum_{l=0..L} A_norm^l.
#[derive(Clone)]
pub struct SimilarityOperator {
    graph: Arc<InteractionGraph>,
    layers: usize,
    adj: Arc<NormalizedAdjacency>,
}

impl SimilarityOperator {
    pub fn new(graph: Arc<InteractionGraph>, layers: usize) -> Self {
        let adj = Arc::new(NormalizedAdjacency::build(&graph));
        SimilarityOperator { graph, layers, adj }
    }

    pub fn graph(&self) -> &Arc<InteractionGraph> {
        &self.graph
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// y = A_norm * x. Row-parallel; each output row is an independent
    /// accumulation, so the result does not depend on thread count.
    fn spmm(&self, x: &Mat, y: &mut Mat) {
        let cols = x.cols();
        let adj = &*self.adj;
        let kernel = |r: usize, out: &mut [f64]| {
            out.fill(0.0);
            for e in adj.offsets[r]..adj.offsets[r + 1] {
                axpy(out, adj.weights[e], x.row(adj.targets[e] as usize));
            }
        };
        #[cfg(feature = "parallel")]
        y.as_mut_slice()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(r, out)| kernel(r, out));
        #[cfg(not(feature = "parallel"))]
        for (r, out) in y.as_mut_slice().chunks_mut(cols).enumerate() {
            kernel(r, out);
        }
    }

    /// (1/(L+1)) * sum_{l=0..L} A_norm^l * x, accumulated in ascending l.
    pub fn apply(&self, x: &Mat) -> Result<Mat, GraphError> {
        if x.rows() != self.graph.num_nodes() {
            return Err(GraphError::DimensionMismatch {
                got: x.rows(),
                want: self.graph.num_nodes(),
            });
        }
        let mut acc = x.clone();
        let mut cur = x.clone();
        let mut next = Mat::zeros(x.rows(), x.cols());
        for _ in 1..=self.layers {
            self.spmm(&cur, &mut next);
            acc.axpy(1.0, &next);
            std::mem::swap(&mut cur, &mut next);
        }
        acc.scale(1.0 / (self.layers as f64 + 1.0));
        Ok(acc)
    }

    /// Exact sparse similarity rows for the requested nodes, obtained by
    /// propagating blocks of unit vectors. `budget` caps the total number of
    /// stored entries.
    pub fn materialize_rows(
        &self,
        nodes: &[u32],
        budget: usize,
    ) -> Result<NeighborhoodIndex, GraphError> {
        let n = self.graph.num_nodes();
        let mut rows = Vec::with_capacity(nodes.len());
        let mut used = 0usize;
        for block in nodes.chunks(UNIT_BLOCK) {
            let mut x = Mat::zeros(n, block.len());
            for (c, &node) in block.iter().enumerate() {
                x.set(node as usize, c, 1.0);
            }
            let y = self.apply(&x)?;
            for (c, &node) in block.iter().enumerate() {
                let mut user_entries = Vec::new();
                let mut item_entries = Vec::new();
                let mut row_len = 0usize;
                for v in 0..n {
                    let w = y.get(v, c);
                    if w > 0.0 {
                        row_len += 1;
                        if used + row_len > budget {
                            // Finish counting this row for the error message.
                            let full =
                                (v..n).filter(|&k| y.get(k, c) > 0.0).count() + row_len - 1;
                            return Err(GraphError::BudgetExceeded {
                                node,
                                row_len: full,
                                used,
                                budget,
                            });
                        }
                        if self.graph.is_user_node(v as u32) {
                            user_entries.push((v as u32, w));
                        } else {
                            item_entries.push((v as u32, w));
                        }
                    }
                }
                used += row_len;
                rows.push(SimilarityRow { node, user_entries, item_entries });
            }
        }
        Ok(NeighborhoodIndex { rows, num_users: self.graph.num_users })
    }
}

const UNIT_BLOCK: usize = 128;

/// One sparse row of S, split by neighbor type. Entries are (unified node
/// id, weight), sorted by id, weights strictly positive.
#[derive(Debug, Clone)]
pub struct SimilarityRow {
    pub node: u32,
    pub user_entries: Vec<(u32, f64)>,
    pub item_entries: Vec<(u32, f64)>,
}

impl SimilarityRow {
    pub fn len(&self) -> usize {
        self.user_entries.len() + self.item_entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// S weight toward `v` (unified id); 0 when v is not an L-hop neighbor.
    pub fn weight(&self, v: u32) -> f64 {
        let list = if self.user_entries.last().map_or(false, |e| v <= e.0) {
            &self.user_entries
        } else {
            &self.item_entries
        };
        list.binary_search_by_key(&v, |e| e.0).map(|k| list[k].1).unwrap_or(0.0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.user_entries.iter().chain(self.item_entries.iter()).copied()
    }
}

/// Materialized S rows for a set of nodes.
#[derive(Debug, Clone)]
pub struct NeighborhoodIndex {
    rows: Vec<SimilarityRow>,
    num_users: u32,
}

impl NeighborhoodIndex {
    pub fn row(&self, node: u32) -> Option<&SimilarityRow> {
        self.rows.iter().find(|r| r.node == node)
    }

    pub fn rows(&self) -> &[SimilarityRow] {
        &self.rows
    }

    pub fn is_user_node(&self, node: u32) -> bool {
        node < self.num_users
    }
}

/// Mean neighbor-pair count and coverage per hop value.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCounts {
    pub hop: usize,
    pub mean_pairs: f64,
    pub coverage: f64,
}

/// For each L in `hops`, the mean over edges (u, i) of |N_u| * |N_i| where
/// N_x is the set of nodes reachable from x within L steps (the support of
/// x's similarity row), plus that mean normalized by (|U|+|I|)^2.
///
/// Reachability is computed with one bitset row per node, expanded one hop
/// at a time; memory is N^2 bits times two.
pub fn count_neighbor_pairs(
    graph: &InteractionGraph,
    edges: &[(u32, u32)],
    hops: &[usize],
) -> Result<Vec<PairCounts>, GraphError> {
    for &(u, i) in edges {
        if u >= graph.num_users || i >= graph.num_items {
            return Err(GraphError::EdgeOutOfRange {
                user: u,
                item: i,
                num_users: graph.num_users,
                num_items: graph.num_items,
            });
        }
    }
    let n = graph.num_nodes();
    let max_hop = hops.iter().copied().max().unwrap_or(0);
    let mut reach: Vec<BitSet> = (0..n)
        .map(|x| {
            let mut b = BitSet::new(n);
            b.set(x);
            b
        })
        .collect();
    let mut sizes_at: Vec<Vec<usize>> = Vec::new();
    let record = |reach: &[BitSet]| reach.iter().map(|b| b.count_ones()).collect::<Vec<_>>();
    let mut sizes_by_hop = vec![record(&reach)];
    for _ in 1..=max_hop {
        let expand = |x: usize| {
            let mut b = reach[x].clone();
            let neighbors: Box<dyn Iterator<Item = u32>> = if graph.is_user_node(x as u32) {
                Box::new(graph.user_adj.neighbors(x).iter().map(|&i| graph.item_node(i)))
            } else {
                Box::new(
                    graph
                        .item_adj
                        .neighbors(x - graph.num_users as usize)
                        .iter()
                        .copied(),
                )
            };
            for y in neighbors {
                b.union_with(&reach[y as usize]);
            }
            b
        };
        #[cfg(feature = "parallel")]
        let next: Vec<BitSet> = (0..n).into_par_iter().map(expand).collect();
        #[cfg(not(feature = "parallel"))]
        let next: Vec<BitSet> = (0..n).map(expand).collect();
        reach = next;
        sizes_by_hop.push(record(&reach));
    }
    sizes_at.extend(sizes_by_hop);

    let total = (n as f64) * (n as f64);
    Ok(hops
        .iter()
        .map(|&hop| {
            let sizes = &sizes_at[hop.min(max_hop)];
            let mean_pairs = if edges.is_empty() {
                0.0
            } else {
                edges
                    .iter()
                    .map(|&(u, i)| {
                        sizes[u as usize] as f64 * sizes[graph.item_node(i) as usize] as f64
                    })
                    .sum::<f64>()
                    / edges.len() as f64
            };
            PairCounts { hop, mean_pairs, coverage: mean_pairs / total }
        })
        .collect())
}

/// Deterministic random bipartite edge list for desk-scale checks: every
/// user gets 1..=max_degree distinct item neighbors.
pub fn random_edges(
    num_users: u32,
    num_items: u32,
    max_degree: u32,
    seed: u64,
) -> Vec<(u32, u32)> {
    use rand::Rng;
    let mut edges = Vec::new();
    for u in 0..num_users {
        let mut rng = stream(seed, "edges", u as u64, 0);
        let deg = rng.gen_range(1..=max_degree.min(num_items));
        let mut items: Vec<u32> = Vec::new();
        while (items.len() as u32) < deg {
            let i = rng.gen_range(0..num_items);
            if !items.contains(&i) {
                items.push(i);
            }
        }
        items.sort_unstable();
        edges.extend(items.into_iter().map(|i| (u, i)));
    }
    edges
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn g0() -> Arc<InteractionGraph> {
        Arc::new(InteractionGraph::from_edges(1, 2, &[(0, 0), (0, 1)]).unwrap())
    }

    #[test]
    fn degrees_and_transpose_on_g0() {
        let g = g0();
        assert_eq!(g.degree(0), 2);
        assert_eq!(g.degree(g.item_node(0)), 1);
        assert_eq!(g.degree(g.item_node(1)), 1);
        assert_eq!(g.user_adj.neighbors(0), &[0, 1]);
        assert_eq!(g.item_adj.neighbors(0), &[0]);
        assert_eq!(g.item_adj.neighbors(1), &[0]);
    }

    #[test]
    fn empty_graph_is_valid() {
        let g = InteractionGraph::from_edges(3, 2, &[]).unwrap();
        for node in 0..g.num_nodes() as u32 {
            assert_eq!(g.degree(node), 0);
        }
    }

    #[test]
    fn out_of_range_edge_rejected() {
        assert!(InteractionGraph::from_edges(1, 1, &[(0, 1)]).is_err());
    }

    #[test]
    fn zero_layers_is_identity() {
        let g = g0();
        let op = SimilarityOperator::new(g.clone(), 0);
        let mut x = Mat::zeros(g.num_nodes(), 2);
        x.set(0, 0, 1.5);
        x.set(2, 1, -2.0);
        let y = op.apply(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn one_layer_hand_value_on_g0() {
        let g = g0();
        let op = SimilarityOperator::new(g.clone(), 1);
        let mut x = Mat::zeros(3, 1);
        x.set(0, 0, 1.0); // indicator of u0
        let y = op.apply(&x).unwrap();
        assert!((y.get(0, 0) - 0.5).abs() < 1e-15);
        let expect = 0.5 / 2.0_f64.sqrt();
        assert!((y.get(1, 0) - expect).abs() < 1e-15);
        assert!((y.get(2, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn operator_matches_dense_powers_on_random_graphs() {
        for seed in 0..5 {
            let edges = random_edges(12, 20, 5, seed);
            let g = Arc::new(InteractionGraph::from_edges(12, 20, &edges).unwrap());
            for layers in [0, 1, 3] {
                let op = SimilarityOperator::new(g.clone(), layers);
                let s = dense::similarity(&g, layers);
                let n = g.num_nodes();
                let mut x = Mat::zeros(n, 3);
                let mut rng = stream(seed, "x", layers as u64, 0);
                for v in x.as_mut_slice() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                let y = op.apply(&x).unwrap();
                for r in 0..n {
                    for c in 0..3 {
                        let want: f64 =
                            (0..n).map(|k| s[r][k] * x.get(k, c)).sum();
                        assert!(
                            (y.get(r, c) - want).abs() < 1e-12,
                            "row {r} col {c}: {} vs {}",
                            y.get(r, c),
                            want
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn adjoint_symmetry() {
        let edges = random_edges(15, 25, 6, 99);
        let g = Arc::new(InteractionGraph::from_edges(15, 25, &edges).unwrap());
        let op = SimilarityOperator::new(g.clone(), 3);
        let n = g.num_nodes();
        let mut rng = stream(99, "xy", 0, 0);
        let mut x = Mat::zeros(n, 2);
        let mut y = Mat::zeros(n, 2);
        for v in x.as_mut_slice().iter_mut().chain(y.as_mut_slice()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let sx = op.apply(&x).unwrap();
        let sy = op.apply(&y).unwrap();
        let ip = |a: &Mat, b: &Mat| -> f64 {
            a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| p * q).sum()
        };
        let lhs = ip(&sx, &y);
        let rhs = ip(&x, &sy);
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn materialized_rows_match_hand_values_on_g0() {
        let g = g0();
        let op = SimilarityOperator::new(g.clone(), 2);
        let idx = op.materialize_rows(&[0, 1], usize::MAX).unwrap();
        let u0 = idx.row(0).unwrap();
        assert_eq!(u0.len(), 3);
        assert!((u0.weight(0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((u0.weight(1) - 1.0 / (3.0 * 2.0_f64.sqrt())).abs() < 1e-12);
        let i0 = idx.row(1).unwrap();
        assert!((i0.weight(2) - 1.0 / 6.0).abs() < 1e-15, "two-hop i0 -> i1");
        assert!(u0.user_entries.iter().all(|&(v, _)| v < 1));
        assert!(u0.item_entries.iter().all(|&(v, _)| v >= 1));
    }

    #[test]
    fn self_weight_at_least_one_over_layers_plus_one() {
        let edges = random_edges(8, 10, 4, 3);
        let g = Arc::new(InteractionGraph::from_edges(8, 10, &edges).unwrap());
        for layers in [0usize, 1, 2, 4] {
            let op = SimilarityOperator::new(g.clone(), layers);
            let nodes: Vec<u32> = (0..g.num_nodes() as u32).collect();
            let idx = op.materialize_rows(&nodes, usize::MAX).unwrap();
            for row in idx.rows() {
                assert!(row.weight(row.node) >= 1.0 / (layers as f64 + 1.0) - 1e-12);
                assert!(row.entries().all(|(_, w)| w > 0.0));
            }
        }
    }

    #[test]
    fn budget_guard_names_offending_node() {
        let g = g0();
        let op = SimilarityOperator::new(g.clone(), 2);
        match op.materialize_rows(&[0], 2) {
            Err(GraphError::BudgetExceeded { node, row_len, .. }) => {
                assert_eq!(node, 0);
                assert_eq!(row_len, 3);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn zero_degree_node_keeps_only_self_term() {
        // item 2 has no edges
        let g = Arc::new(InteractionGraph::from_edges(1, 3, &[(0, 0), (0, 1)]).unwrap());
        let op = SimilarityOperator::new(g.clone(), 3);
        let idx = op.materialize_rows(&[g.item_node(2)], usize::MAX).unwrap();
        let row = idx.row(g.item_node(2)).unwrap();
        assert_eq!(row.len(), 1);
        assert!((row.weight(g.item_node(2)) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn pair_counts_on_g0() {
        let g = g0();
        let counts = count_neighbor_pairs(&g, &[(0, 0)], &[0, 1]).unwrap();
        assert_eq!(counts[0].mean_pairs, 1.0);
        // L=1: u0 reaches {u0,i0,i1}, i0 reaches {i0,u0}
        assert_eq!(counts[1].mean_pairs, 6.0);
        assert!((counts[1].coverage - 6.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn reachability_matches_row_support() {
        let edges = random_edges(10, 14, 4, 17);
        let g = Arc::new(InteractionGraph::from_edges(10, 14, &edges).unwrap());
        let hops = [0usize, 1, 2, 3];
        let counts = count_neighbor_pairs(&g, &edges, &hops).unwrap();
        for (&hop, row) in hops.iter().zip(&counts) {
            let op = SimilarityOperator::new(g.clone(), hop);
            let nodes: Vec<u32> = (0..g.num_nodes() as u32).collect();
            let idx = op.materialize_rows(&nodes, usize::MAX).unwrap();
            let size =
                |node: u32| idx.row(node).unwrap().len() as f64;
            let want: f64 = edges
                .iter()
                .map(|&(u, i)| size(u) * size(g.item_node(i)))
                .sum::<f64>()
                / edges.len() as f64;
            assert!(
                (row.mean_pairs - want).abs() < 1e-9,
                "hop {hop}: {} vs {}",
                row.mean_pairs,
                want
            );
        }
    }
}
