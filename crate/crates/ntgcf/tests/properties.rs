use std::collections::HashSet;
use std::sync::Arc;

use ntgcf::analysis::retain_neighbors;
use ntgcf::data::{load_bundle, save_bundle, split_dataset, RawInteractions};
use ntgcf::eval::{ndcg_at, recall_at};
use ntgcf::graph::{random_edges, InteractionGraph, SimilarityOperator};
use ntgcf::losses::LossConfig;
use ntgcf::mat::{dot, Mat};
use ntgcf::model::{forward, EmbeddingTable};
use ntgcf::rng::stream;
use ntgcf::verify::{ssm_candidate_distribution, PairWeightView, WInstance};

use proptest::prelude::*;
use rand::Rng;

/// Random "user item" records with string keys; duplicates allowed (the
/// loader/splitter must cope with repeated pairs being pre-deduplicated).
fn raw_interactions(seed: u64, num_users: u32, num_items: u32, n: usize) -> RawInteractions {
    let mut rng = stream(seed, "prop-raw", num_users as u64, n as u64);
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for _ in 0..n {
        let u = rng.gen_range(0..num_users);
        let i = rng.gen_range(0..num_items);
        if seen.insert((u, i)) {
            records.push((format!("user:{u}"), format!("song-{i}")));
        }
    }
    RawInteractions { records, source_path: "synthetic".into() }
}

fn random_op(seed: u64, num_users: u32, num_items: u32, per_user: u32, layers: usize) -> SimilarityOperator {
    let edges = random_edges(num_users, num_items, per_user, seed);
    let g = Arc::new(InteractionGraph::from_edges(num_users, num_items, &edges).unwrap());
    SimilarityOperator::new(g, layers)
}

fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = stream(seed, "prop-mat", rows as u64, cols as u64);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Mat::from_vec(rows, cols, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Every interaction ends up in exactly one of train/valid/test, and the
    /// dense ids round-trip back to the original keys.
    #[test]
    fn split_partitions_records(seed in 0u64..1000, nu in 2u32..12, ni in 2u32..16, n in 10usize..120) {
        let raw = raw_interactions(seed, nu, ni, n);
        let bundle = split_dataset(&raw, [0.7, 0.1, 0.2], seed).unwrap();
        let total = bundle.train.len() + bundle.valid.len() + bundle.test.len();
        prop_assert_eq!(total, raw.records.len());
        let mut seen = HashSet::new();
        for &(u, i) in bundle.train.iter().chain(&bundle.valid).chain(&bundle.test) {
            prop_assert!(seen.insert((u, i)), "duplicate pair across splits");
            prop_assert!(u < bundle.num_users && i < bundle.num_items);
        }
        let keyed: HashSet<(String, String)> = seen
            .into_iter()
            .map(|(u, i)| (bundle.user_keys[u as usize].clone(), bundle.item_keys[i as usize].clone()))
            .collect();
        let original: HashSet<(String, String)> = raw.records.iter().cloned().collect();
        prop_assert_eq!(keyed, original);
    }

    /// A split written to disk and read back is the same split.
    #[test]
    fn bundle_roundtrips_through_disk(seed in 0u64..200, n in 10usize..80) {
        let raw = raw_interactions(seed, 6, 9, n);
        let bundle = split_dataset(&raw, [0.7, 0.1, 0.2], seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        prop_assert_eq!(back, bundle);
    }

    /// The propagation operator is symmetric: <Sx, y> = <x, Sy>.
    #[test]
    fn operator_is_self_adjoint(seed in 0u64..500, layers in 0usize..5) {
        let op = random_op(seed, 8, 11, 3, layers);
        let n = op.graph().num_nodes();
        let x = random_mat(n, 1, seed.wrapping_add(1));
        let y = random_mat(n, 1, seed.wrapping_add(2));
        let sx = op.apply(&x).unwrap();
        let sy = op.apply(&y).unwrap();
        let a = dot(sx.as_slice(), y.as_slice());
        let b = dot(x.as_slice(), sy.as_slice());
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
    }

    /// Materialized neighborhood rows have nonnegative weights that sum to
    /// at most 1 (row-stochasticity is lost by symmetric normalization, but
    /// mass never exceeds the averaged walk budget).
    #[test]
    fn similarity_rows_are_nonnegative(seed in 0u64..500, layers in 0usize..4) {
        let op = random_op(seed, 7, 10, 3, layers);
        let nodes: Vec<u32> = (0..op.graph().num_nodes() as u32).collect();
        let idx = op.materialize_rows(&nodes, usize::MAX).unwrap();
        for row in idx.rows() {
            for (_, w) in row.entries() {
                prop_assert!(w >= 0.0 && w.is_finite());
            }
        }
    }

    /// The forward pass is linear in the embedding table.
    #[test]
    fn forward_is_homogeneous(seed in 0u64..300, a in -3.0f64..3.0) {
        let op = random_op(seed, 6, 8, 3, 2);
        let n = op.graph().num_nodes();
        let x = random_mat(n, 4, seed);
        let mut ax = x.clone();
        ax.scale(a);
        let fx = forward(&op, &EmbeddingTable::from_mat(x)).unwrap();
        let fax = forward(&op, &EmbeddingTable::from_mat(ax)).unwrap();
        for (p, q) in fax.e.as_slice().iter().zip(fx.e.as_slice()) {
            prop_assert!((p - a * q).abs() <= 1e-12 * q.abs().max(1.0));
        }
    }

    /// Raising the retention ratio never drops a previously retained
    /// neighbor: the kept sets are nested along the ratio axis.
    #[test]
    fn retained_sets_nest(seed in 0u64..300, q_lo in 1.0f64..50.0, bump in 1.0f64..50.0) {
        let q_hi = (q_lo + bump).min(100.0);
        let op = random_op(seed, 6, 9, 3, 2);
        let nodes: Vec<u32> = (0..op.graph().num_nodes() as u32).collect();
        let small = retain_neighbors(&op, &nodes, q_lo).unwrap();
        let big = retain_neighbors(&op, &nodes, q_hi).unwrap();
        for &node in &nodes {
            let s = small.retained(node).unwrap();
            for &v in s {
                prop_assert!(big.contains(node, v), "node {node}: lost {v} going {q_lo} -> {q_hi}");
            }
        }
    }

    /// The sampled-softmax candidate distribution is a distribution.
    #[test]
    fn candidate_distribution_is_normalized(seed in 0u64..300, tau in 0.05f64..2.0) {
        let op = random_op(seed, 6, 9, 3, 2);
        let g = op.graph().clone();
        let nodes: Vec<u32> = (0..g.num_nodes() as u32).collect();
        let idx = op.materialize_rows(&nodes, usize::MAX).unwrap();
        let table = EmbeddingTable::init(g.num_nodes(), 4, seed);
        let w = PairWeightView::from_table(&table);
        let negs = [g.item_node(1), g.item_node(3), g.item_node(5)];
        let inst = WInstance { u: 0, i_node: g.item_node(0), neg_item_nodes: &negs, neg_user_nodes: &[] };
        let pi = ssm_candidate_distribution(&idx, &w, &inst, tau).unwrap();
        prop_assert_eq!(pi.len(), 1 + negs.len());
        let sum: f64 = pi.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(pi.iter().all(|p| *p > 0.0 && *p < 1.0 + 1e-12));
    }

    /// Ranking metrics stay in [0, 1], and a ranking whose prefix is exactly
    /// the ground truth is perfect.
    #[test]
    fn ranking_metrics_are_bounded(seed in 0u64..500, n_items in 5u32..40, n_truth in 1usize..10, n in 1usize..25) {
        let mut rng = stream(seed, "prop-rank", n_items as u64, 0);
        let mut ranked: Vec<u32> = (0..n_items).collect();
        for k in (1..ranked.len()).rev() {
            ranked.swap(k, rng.gen_range(0..=k));
        }
        let mut truth: Vec<u32> = ranked.iter().take(n_truth.min(ranked.len())).copied().collect();
        truth.sort_unstable();
        let r = recall_at(&ranked, &truth, n);
        let g = ndcg_at(&ranked, &truth, n);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&g));
        if n >= truth.len() {
            prop_assert!((r - 1.0).abs() < 1e-12);
            prop_assert!((g - 1.0).abs() < 1e-12);
        }
    }

    /// Negative-coefficient and non-finite loss settings are rejected, and
    /// validation never panics on arbitrary numeric inputs.
    #[test]
    fn loss_config_validation_is_total(tau in -1.0f64..2.0, a in -2.0f64..2.0, negs in 0usize..5) {
        let mut cfg = LossConfig::new(ntgcf::losses::LossKind::NtSsm);
        cfg.tau = tau;
        cfg.alpha_u_u = a;
        cfg.neg_items = negs;
        let res = cfg.validate();
        if tau <= 0.0 || a < 0.0 || negs == 0 {
            prop_assert!(res.is_err());
        } else {
            prop_assert!(res.is_ok());
        }
    }

    /// The counter-based generator is pure in its arguments: equal inputs
    /// give equal streams, distinct tags or counters give distinct streams.
    #[test]
    fn rng_streams_are_pure(seed in 0u64..10_000, a in 0u64..1000, b in 0u64..1000) {
        let x: u64 = stream(seed, "alpha", a, b).gen();
        let y: u64 = stream(seed, "alpha", a, b).gen();
        prop_assert_eq!(x, y);
        let z: u64 = stream(seed, "beta", a, b).gen();
        let w: u64 = stream(seed, "alpha", a.wrapping_add(1), b).gen();
        prop_assert_ne!(x, z);
        prop_assert_ne!(x, w);
    }
}
