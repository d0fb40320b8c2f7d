//! Full-ranking evaluation: Recall@N and NDCG@N over held-out interactions,
//! with the user's already-seen items excluded from the candidate pool.

use std::collections::HashMap;

use crate::data::DatasetBundle;
use crate::mat::Mat;
use crate::model::{PropagatedState, Similarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub n: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone)]
pub struct PerUserMetrics {
    pub user: u32,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone)]
pub struct RankingMetrics {
    pub rows: Vec<MetricRow>,
    pub users_evaluated: usize,
    pub per_user: Option<Vec<PerUserMetrics>>,
}

/// |top-N of ranked ∩ truth| / |truth|. `truth` must be sorted and
/// non-empty (users with empty ground truth are the caller's job to skip).
pub fn recall_at(ranked: &[u32], truth: &[u32], n: usize) -> f64 {
    assert!(!truth.is_empty(), "recall_at called with empty ground truth");
    let hits = ranked
        .iter()
        .take(n)
        .filter(|i| truth.binary_search(i).is_ok())
        .count();
    hits as f64 / truth.len() as f64
}

/// Binary-relevance NDCG with 1/log2(p+1) gains at 1-based position p;
/// ideal DCG places min(N, |truth|) hits up front.
pub fn ndcg_at(ranked: &[u32], truth: &[u32], n: usize) -> f64 {
    assert!(!truth.is_empty(), "ndcg_at called with empty ground truth");
    let gain = |p: usize| 1.0 / ((p + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, i)| truth.binary_search(i).is_ok())
        .map(|(p0, _)| gain(p0 + 1))
        .sum();
    let idcg: f64 = (1..=n.min(truth.len())).map(gain).sum();
    dcg / idcg
}

pub(crate) fn per_user_items(edges: &[(u32, u32)]) -> HashMap<u32, Vec<u32>> {
    let mut map: HashMap<u32, Vec<u32>> = HashMap::new();
    for &(u, i) in edges {
        map.entry(u).or_default().push(i);
    }
    for items in map.values_mut() {
        items.sort_unstable();
        items.dedup();
    }
    map
}

/// Evaluate every user with non-empty ground truth in the chosen split.
/// Exclusions: the user's training items, plus validation items when
/// evaluating the test split. Scores come from the propagated state under
/// `sim`; ranking ties break toward lower item ids.
pub fn evaluate_all(
    state: &PropagatedState,
    bundle: &DatasetBundle,
    which: SplitChoice,
    ns: &[usize],
    sim: Similarity,
    keep_per_user: bool,
) -> RankingMetrics {
    assert!(!ns.is_empty());
    let train_items = per_user_items(&bundle.train);
    let valid_items = per_user_items(&bundle.valid);
    let truth_map = match which {
        SplitChoice::Valid => per_user_items(&bundle.valid),
        SplitChoice::Test => per_user_items(&bundle.test),
    };
    let max_n = ns.iter().copied().max().unwrap();
    let num_items = bundle.num_items as usize;
    let d = state.e.cols();

    // item block of the embedding matrix, copied once for GEMM scoring
    let mut items = Mat::zeros(num_items, d);
    for i in 0..num_items {
        items
            .row_mut(i)
            .copy_from_slice(state.e.row(bundle.num_users as usize + i));
    }

    let mut users: Vec<u32> = truth_map.keys().copied().collect();
    users.sort_unstable();

    let mut sums: Vec<(f64, f64)> = vec![(0.0, 0.0); ns.len()];
    let mut per_user = keep_per_user.then(Vec::new);
    let mut evaluated = 0usize;
    let empty: Vec<u32> = Vec::new();
    for chunk in users.chunks(256) {
        let mut anchors = Mat::zeros(chunk.len(), d);
        for (r, &u) in chunk.iter().enumerate() {
            anchors.row_mut(r).copy_from_slice(state.e.row(u as usize));
        }
        let scores = anchors.matmul_nt(&items);
        for (r, &u) in chunk.iter().enumerate() {
            let truth = &truth_map[&u];
            let mut exclude: Vec<u32> =
                train_items.get(&u).unwrap_or(&empty).clone();
            if which == SplitChoice::Test {
                exclude.extend(valid_items.get(&u).unwrap_or(&empty));
                exclude.sort_unstable();
                exclude.dedup();
            }
            let row = scores.row(r);
            let mut scored: Vec<(f64, u32)> = (0..num_items as u32)
                .filter(|i| exclude.binary_search(i).is_err())
                .map(|i| {
                    let raw = row[i as usize];
                    let s = match sim {
                        Similarity::Inner => raw,
                        Similarity::Cosine => {
                            let den = state.norms[u as usize]
                                * state.norms[bundle.num_users as usize + i as usize];
                            if den == 0.0 {
                                0.0
                            } else {
                                raw / den
                            }
                        }
                    };
                    (s, i)
                })
                .collect();
            let cmp = |a: &(f64, u32), b: &(f64, u32)| {
                b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
            };
            let k = max_n.min(scored.len());
            if k > 0 && k < scored.len() {
                scored.select_nth_unstable_by(k - 1, cmp);
                scored.truncate(k);
            }
            scored.sort_unstable_by(cmp);
            let ranked: Vec<u32> = scored.into_iter().map(|(_, i)| i).collect();

            let mut rows = Vec::with_capacity(ns.len());
            for (slot, &n) in ns.iter().enumerate() {
                let rec = recall_at(&ranked, truth, n);
                let ndc = ndcg_at(&ranked, truth, n);
                sums[slot].0 += rec;
                sums[slot].1 += ndc;
                rows.push(MetricRow { n, recall: rec, ndcg: ndc });
            }
            if let Some(pu) = per_user.as_mut() {
                pu.push(PerUserMetrics { user: u, rows });
            }
            evaluated += 1;
        }
    }

    let rows = ns
        .iter()
        .zip(&sums)
        .map(|(&n, &(rec, ndc))| MetricRow {
            n,
            recall: if evaluated > 0 { rec / evaluated as f64 } else { 0.0 },
            ndcg: if evaluated > 0 { ndc / evaluated as f64 } else { 0.0 },
        })
        .collect();
    RankingMetrics { rows, users_evaluated: evaluated, per_user }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{InteractionGraph, SimilarityOperator};
    use crate::model::{forward, EmbeddingTable};
    use std::path::PathBuf;
    use std::sync::Arc;

    #[test]
    fn recall_hand_values() {
        assert_eq!(recall_at(&[1, 2, 3], &[1, 2, 3], 3), 1.0);
        assert_eq!(recall_at(&[0, 5], &[0, 1], 2), 0.5);
        assert_eq!(recall_at(&[7, 8], &[0, 1], 2), 0.0);
    }

    #[test]
    fn ndcg_hand_values() {
        assert_eq!(ndcg_at(&[4, 9], &[4], 2), 1.0);
        let want = 1.0 / 3.0_f64.log2();
        assert!((ndcg_at(&[9, 4], &[4], 2) - want).abs() < 1e-9);
        // truth {a, b}, ranked [a, x, b], N = 3
        let got = ndcg_at(&[0, 5, 1], &[0, 1], 3);
        let want = (1.0 + 0.5) / (1.0 + 1.0 / 3.0_f64.log2());
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        assert!((want - 0.91972).abs() < 1e-5);
    }

    fn tiny_bundle() -> DatasetBundle {
        DatasetBundle {
            num_users: 2,
            num_items: 4,
            train: vec![(0, 0), (1, 1)],
            valid: vec![(0, 1)],
            test: vec![(0, 2), (1, 3)],
            user_keys: vec!["a".into(), "b".into()],
            item_keys: vec!["w".into(), "x".into(), "y".into(), "z".into()],
            split_seed: 0,
            ratios: [0.7, 0.1, 0.2],
            users_without_train: 0,
            items_without_train: 0,
        }
    }

    #[test]
    fn constructed_perfect_ranking_scores_one() {
        let bundle = tiny_bundle();
        let g = Arc::new(
            InteractionGraph::from_edges(2, 4, &bundle.train).unwrap(),
        );
        let op = SimilarityOperator::new(g, 0); // identity: E = E0
        // u0's test item is 2; make e_u0 point exactly at e_i2
        let mut m = Mat::zeros(6, 2);
        m.set(0, 0, 1.0); // u0
        m.set(1, 1, 1.0); // u1
        m.set(2 + 2, 0, 1.0); // i2 aligned with u0
        m.set(2 + 3, 1, 1.0); // i3 aligned with u1
        let s = forward(&op, &EmbeddingTable::from_mat(m)).unwrap();
        let metrics =
            evaluate_all(&s, &bundle, SplitChoice::Test, &[20], Similarity::Inner, true);
        assert_eq!(metrics.users_evaluated, 2);
        assert_eq!(metrics.rows[0].ndcg, 1.0);
        assert_eq!(metrics.rows[0].recall, 1.0);
        let pu = metrics.per_user.unwrap();
        assert_eq!(pu.len(), 2);
        assert!(pu.iter().all(|p| p.rows[0].ndcg == 1.0));
    }

    #[test]
    fn training_items_are_excluded_and_order_invariance_holds() {
        let bundle = tiny_bundle();
        let g = Arc::new(InteractionGraph::from_edges(2, 4, &bundle.train).unwrap());
        let op = SimilarityOperator::new(g, 0);
        // u0 scores: i0 huge (but i0 is a train item), i2 moderate
        let mut m = Mat::zeros(6, 1);
        m.set(0, 0, 1.0);
        m.set(2, 0, 100.0); // i0: excluded anyway
        m.set(4, 0, 1.0); // i2: the test item
        let s = forward(&op, &EmbeddingTable::from_mat(m)).unwrap();
        let a = evaluate_all(&s, &bundle, SplitChoice::Test, &[1, 2], Similarity::Inner, false);
        // monotone transform of scores: scale embeddings of u0's candidates
        let mut m2 = Mat::zeros(6, 1);
        m2.set(0, 0, 1.0);
        m2.set(2, 0, 300.0);
        m2.set(4, 0, 3.0);
        let s2 = forward(&op, &EmbeddingTable::from_mat(m2)).unwrap();
        let b = evaluate_all(&s2, &bundle, SplitChoice::Test, &[1, 2], Similarity::Inner, false);
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x, y);
        }
        // u0's top-1 candidate must be i2 (i0 excluded), so recall@1 for u0 is 1
        assert!(a.rows[0].recall > 0.0);
    }

    #[test]
    fn valid_split_excludes_only_train() {
        let bundle = tiny_bundle();
        let g = Arc::new(InteractionGraph::from_edges(2, 4, &bundle.train).unwrap());
        let op = SimilarityOperator::new(g, 0);
        // u0's valid item is 1; u1 has no valid ground truth -> skipped
        let mut m = Mat::zeros(6, 1);
        m.set(0, 0, 1.0);
        m.set(3, 0, 5.0); // i1 ranks first
        let s = forward(&op, &EmbeddingTable::from_mat(m)).unwrap();
        let metrics =
            evaluate_all(&s, &bundle, SplitChoice::Valid, &[1], Similarity::Inner, false);
        assert_eq!(metrics.users_evaluated, 1);
        assert_eq!(metrics.rows[0].ndcg, 1.0);
        let _ = PathBuf::new();
    }

    #[test]
    fn random_embeddings_rank_poorly_on_wide_catalogs() {
        // 1 user, 500 items, 1 test item: expected NDCG@20 of a random
        // ranking is well below 0.02 x safety margin
        let num_items = 500u32;
        let train: Vec<(u32, u32)> = vec![(0, 0)];
        let bundle = DatasetBundle {
            num_users: 1,
            num_items,
            train: train.clone(),
            valid: vec![],
            test: vec![(0, 250)],
            user_keys: vec!["u".into()],
            item_keys: (0..num_items).map(|i| i.to_string()).collect(),
            split_seed: 0,
            ratios: [0.7, 0.1, 0.2],
            users_without_train: 0,
            items_without_train: 0,
        };
        let g = Arc::new(InteractionGraph::from_edges(1, num_items, &train).unwrap());
        let op = SimilarityOperator::new(g, 0);
        let mut hits = 0usize;
        for seed in 0..50 {
            let t = EmbeddingTable::init(1 + num_items as usize, 8, seed);
            let s = forward(&op, &t).unwrap();
            let m = evaluate_all(&s, &bundle, SplitChoice::Test, &[20], Similarity::Inner, false);
            if m.rows[0].ndcg > 0.0 {
                hits += 1;
            }
        }
        // hit probability is 20/499 ~ 4%; 50 trials should stay far from
        // the ~100% a leak would produce
        assert!(hits < 10, "random embeddings hit {hits}/50 times");
    }
}
