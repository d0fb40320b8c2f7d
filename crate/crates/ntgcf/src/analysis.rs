//! Training-free neighborhood analysis: per-node retained neighbor sets,
//! co-occurrence counting over training edges, the factorized heuristic
//! scorer built from them, and grid studies that evaluate the heuristic as
//! a ranker under varying user/item retention ratios.

use std::collections::HashMap;
use std::sync::Arc;

use crate::data::DatasetBundle;
use crate::eval::{ndcg_at, per_user_items};
use crate::graph::{
    build_graph, EdgeSet, GraphError, InteractionGraph, NeighborhoodIndex, SimilarityOperator,
    SimilarityRow,
};
use crate::mat::{axpy, Mat};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("retention ratio must lie in (0, 100], got {0}")]
    BadRatio(f64),
    #[error("no retained set or similarity row available for node {0}")]
    MissingRow(u32),
    #[error("invalid study input: {0}")]
    InvalidInput(String),
    #[error("estimated working set of {need} bytes exceeds the {budget}-byte budget")]
    MemoryBudget { need: usize, budget: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Number of neighbors kept at ratio `q` (percent) from a row of `len`
/// entries: max(1, ceil(q/100 * len)), so the strongest neighbor always
/// survives.
fn retained_count(q: f64, len: usize) -> usize {
    if len == 0 {
        return 0;
    }
    ((q / 100.0 * len as f64).ceil() as usize).clamp(1, len)
}

fn check_ratio(q: f64) -> Result<(), AnalysisError> {
    if q.is_finite() && q > 0.0 && q <= 100.0 {
        Ok(())
    } else {
        Err(AnalysisError::BadRatio(q))
    }
}

/// Ids of one similarity row ordered by descending weight (ties: ascending
/// id), optionally truncated to the top `keep`.
fn ranked_ids(row: &SimilarityRow, keep: usize) -> Vec<u32> {
    let mut entries: Vec<(u32, f64)> = row.entries().collect();
    let cmp = |a: &(u32, f64), b: &(u32, f64)| {
        b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0))
    };
    if keep > 0 && keep < entries.len() {
        entries.select_nth_unstable_by(keep - 1, cmp);
        entries.truncate(keep);
    }
    entries.sort_unstable_by(cmp);
    entries.into_iter().map(|(v, _)| v).collect()
}

/// Per-node strongest-neighbor subsets at a fixed retention ratio.
#[derive(Debug, Clone)]
pub struct RetainedNeighborhoods {
    pub q: f64,
    pub layers: usize,
    sets: HashMap<u32, Vec<u32>>,
}

impl RetainedNeighborhoods {
    /// Retained neighbor ids of `node`, ascending; None if the node was not
    /// part of the construction.
    pub fn retained(&self, node: u32) -> Option<&[u32]> {
        self.sets.get(&node).map(|v| v.as_slice())
    }

    pub fn contains(&self, node: u32, v: u32) -> bool {
        self.retained(node).map_or(false, |s| s.binary_search(&v).is_ok())
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Keep each requested node's top-q% neighbors by similarity weight (ties
/// toward lower ids). Every node retains at least its single strongest
/// neighbor; rows are never empty thanks to the self term.
pub fn retain_neighbors(
    op: &SimilarityOperator,
    nodes: &[u32],
    q: f64,
) -> Result<RetainedNeighborhoods, AnalysisError> {
    check_ratio(q)?;
    let idx = op.materialize_rows(nodes, usize::MAX)?;
    let mut sets = HashMap::with_capacity(nodes.len());
    for row in idx.rows() {
        let keep = retained_count(q, row.len());
        let mut ids = ranked_ids(row, keep);
        ids.truncate(keep);
        ids.sort_unstable();
        sets.insert(row.node, ids);
    }
    Ok(RetainedNeighborhoods { q, layers: op.layers(), sets })
}

/// Number of training edges (u', i') whose retained sets contain `v` on the
/// user side and `vp` on the item side. Direct enumeration; quadratic index
/// space, desk-scale graphs only (the study path never materializes this).
pub fn cooccurrence(
    graph: &InteractionGraph,
    ru: &RetainedNeighborhoods,
    ri: &RetainedNeighborhoods,
    v: u32,
    vp: u32,
) -> Result<u64, AnalysisError> {
    let mut count = 0u64;
    for u in 0..graph.num_users {
        let items = graph.user_adj.neighbors(u as usize);
        if items.is_empty() {
            continue;
        }
        let set_u = ru.retained(u).ok_or(AnalysisError::MissingRow(u))?;
        if set_u.binary_search(&v).is_err() {
            continue;
        }
        for &i in items {
            let node = graph.item_node(i);
            let set_i = ri.retained(node).ok_or(AnalysisError::MissingRow(node))?;
            if set_i.binary_search(&vp).is_ok() {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Heuristic score split by the (user-side, item-side) node types of the
/// contributing neighbor pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TypedScore {
    pub uu: f64,
    pub ii: f64,
    pub ui: f64,
    pub iu: f64,
}

impl TypedScore {
    pub fn total(&self) -> f64 {
        self.uu + self.ii + self.ui + self.iu
    }
}

/// Parameter-free scorer: score(u, i) sums, over all training edges
/// (u', i'), the product of u's similarity mass inside u''s retained set
/// and i's similarity mass inside i''s retained set. Equivalent to summing
/// pair weights S_uv * S_iv' over co-occurrence counts, with the quadratic
/// co-occurrence table factored away. This implementation materializes full
/// similarity rows and is meant for small graphs and oracle checks; the
/// grid study below uses a blocked dense pipeline instead.
pub struct HeuristicScorer {
    graph: Arc<InteractionGraph>,
    user_sets: RetainedNeighborhoods,
    item_sets: RetainedNeighborhoods,
    idx: NeighborhoodIndex,
}

impl HeuristicScorer {
    pub fn new(
        op: &SimilarityOperator,
        q_user: f64,
        q_item: f64,
    ) -> Result<Self, AnalysisError> {
        let graph = op.graph().clone();
        let users: Vec<u32> = (0..graph.num_users).collect();
        let items: Vec<u32> = (0..graph.num_items).map(|i| graph.item_node(i)).collect();
        let user_sets = retain_neighbors(op, &users, q_user)?;
        let item_sets = retain_neighbors(op, &items, q_item)?;
        let all: Vec<u32> = (0..graph.num_nodes() as u32).collect();
        let idx = op.materialize_rows(&all, usize::MAX)?;
        Ok(HeuristicScorer { graph, user_sets, item_sets, idx })
    }

    /// Similarity mass of `row` inside `set`, split into (user-node mass,
    /// item-node mass).
    fn typed_mass(&self, row: &SimilarityRow, set: &[u32]) -> (f64, f64) {
        let mut user = 0.0;
        let mut item = 0.0;
        for &v in set {
            let w = row.weight(v);
            if self.graph.is_user_node(v) {
                user += w;
            } else {
                item += w;
            }
        }
        (user, item)
    }

    pub fn score_typed(&self, u: u32, item: u32) -> Result<TypedScore, AnalysisError> {
        let i_node = self.graph.item_node(item);
        let row_u = self.idx.row(u).ok_or(AnalysisError::MissingRow(u))?;
        let row_i = self.idx.row(i_node).ok_or(AnalysisError::MissingRow(i_node))?;
        let mut item_mass: Vec<Option<(f64, f64)>> =
            vec![None; self.graph.num_items as usize];
        let mut out = TypedScore::default();
        for up in 0..self.graph.num_users {
            let partners = self.graph.user_adj.neighbors(up as usize);
            if partners.is_empty() {
                continue;
            }
            let set_u = self
                .user_sets
                .retained(up)
                .ok_or(AnalysisError::MissingRow(up))?;
            let (au, ai) = self.typed_mass(row_u, set_u);
            for &ip in partners {
                let (bu, bi) = match item_mass[ip as usize] {
                    Some(m) => m,
                    None => {
                        let node = self.graph.item_node(ip);
                        let set_i = self
                            .item_sets
                            .retained(node)
                            .ok_or(AnalysisError::MissingRow(node))?;
                        let m = self.typed_mass(row_i, set_i);
                        item_mass[ip as usize] = Some(m);
                        m
                    }
                };
                out.uu += au * bu;
                out.ii += ai * bi;
                out.ui += au * bi;
                out.iu += ai * bu;
            }
        }
        Ok(out)
    }

    pub fn score(&self, u: u32, item: u32) -> Result<f64, AnalysisError> {
        Ok(self.score_typed(u, item)?.total())
    }
}

/// Which neighbor-pair types contribute to the study scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreType {
    Full,
    UU,
    II,
    UI,
    IU,
}

impl ScoreType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreType::Full => "full",
            ScoreType::UU => "uu",
            ScoreType::II => "ii",
            ScoreType::UI => "ui",
            ScoreType::IU => "iu",
        }
    }
}

impl std::fmt::Display for ScoreType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionCell {
    /// User-side retention ratio (percent).
    pub q: f64,
    /// Item-side retention ratio (percent).
    pub q_item: f64,
    pub kind: ScoreType,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionStudyConfig {
    pub layers: usize,
    /// User-side retention ratios in percent.
    pub q_grid: Vec<f64>,
    /// Item-side retention ratios in percent.
    pub q_item_grid: Vec<f64>,
    pub kinds: Vec<ScoreType>,
    pub eval_n: usize,
    /// Cap on the dense working set plus neighbor-list storage, in bytes.
    pub memory_budget: usize,
}

impl RetentionStudyConfig {
    pub fn new(layers: usize) -> Self {
        RetentionStudyConfig {
            layers,
            q_grid: vec![0.1, 1.0, 10.0, 100.0],
            q_item_grid: vec![0.1, 1.0, 10.0, 100.0],
            kinds: vec![ScoreType::Full],
            eval_n: 20,
            // saturates on 32-bit targets (the study never runs there at
            // a scale where it matters)
            memory_budget: 4_500_000_000u64.min(usize::MAX as u64) as usize,
        }
    }
}

/// Weight-ordered neighbor id lists, truncated to the largest prefix any
/// configured ratio can request. `total` keeps the untruncated row length so
/// smaller ratios resolve their prefix sizes against the true row.
struct SortedLists {
    total: Vec<u32>,
    ids: Vec<Vec<u32>>,
}

impl SortedLists {
    fn prefix_len(&self, node: u32, q: f64) -> usize {
        retained_count(q, self.total[node as usize] as usize)
    }
}

fn build_sorted_lists(
    op: &SimilarityOperator,
    max_q_user: f64,
    max_q_item: f64,
    query_cols: &HashMap<u32, usize>,
    mt: &mut Mat,
    dense_bytes: usize,
    budget: usize,
) -> Result<SortedLists, AnalysisError> {
    let graph = op.graph();
    let n = graph.num_nodes();
    let mut lists = SortedLists { total: vec![0; n], ids: Vec::with_capacity(n) };
    let mut list_bytes = 0usize;
    const BLOCK: usize = 128;
    for start in (0..n).step_by(BLOCK) {
        let block: Vec<u32> = (start as u32..(start + BLOCK).min(n) as u32).collect();
        let mut x = Mat::zeros(n, block.len());
        for (c, &node) in block.iter().enumerate() {
            x.set(node as usize, c, 1.0);
        }
        let y = op.apply(&x)?;
        for (c, &node) in block.iter().enumerate() {
            let mut entries: Vec<(u32, f64)> = Vec::new();
            for v in 0..n {
                let w = y.get(v, c);
                if w > 0.0 {
                    entries.push((v as u32, w));
                }
            }
            let max_q = if graph.is_user_node(node) { max_q_user } else { max_q_item };
            let keep = retained_count(max_q, entries.len());
            lists.total[node as usize] = entries.len() as u32;
            let row = SimilarityRow {
                node,
                user_entries: Vec::new(),
                item_entries: entries,
            };
            let ids = ranked_ids(&row, keep);
            list_bytes += 4 * ids.len();
            if dense_bytes + list_bytes > budget {
                return Err(AnalysisError::MemoryBudget {
                    need: dense_bytes + list_bytes,
                    budget,
                });
            }
            lists.ids.push(ids);
            if let Some(&col) = query_cols.get(&node) {
                for v in 0..n {
                    mt.set(v, col, y.get(v, c));
                }
            }
        }
    }
    Ok(lists)
}

#[derive(Clone, Copy, PartialEq)]
enum TypePart {
    All,
    User,
    Item,
}

/// (similarity-side part, indicator-side part) for one score type, given
/// whether the query axis is the user side.
fn kind_parts(kind: ScoreType, user_query: bool) -> (TypePart, TypePart) {
    // First letter classifies the node reached from the user, second the
    // node reached from the item.
    let (tu, ti) = match kind {
        ScoreType::Full => (TypePart::All, TypePart::All),
        ScoreType::UU => (TypePart::User, TypePart::User),
        ScoreType::II => (TypePart::Item, TypePart::Item),
        ScoreType::UI => (TypePart::User, TypePart::Item),
        ScoreType::IU => (TypePart::Item, TypePart::User),
    };
    // With user queries the dense mass matrix carries the user-side sums and
    // the edge indicator matrix the item-side sums; item queries mirror it.
    if user_query {
        (tu, ti)
    } else {
        (ti, tu)
    }
}

fn select_part<'a>(
    part: TypePart,
    split: bool,
    u: &'a Mat,
    i: &'a Mat,
    scratch: &'a mut Mat,
) -> &'a Mat {
    match part {
        TypePart::All if split => {
            scratch.as_mut_slice().copy_from_slice(u.as_slice());
            scratch.axpy(1.0, i);
            scratch
        }
        TypePart::All | TypePart::User => u,
        TypePart::Item => i,
    }
}

/// Rank the test split of `bundle` with the retained-neighborhood heuristic
/// over the (q, q_item) grid and report mean NDCG@`eval_n` per cell, with
/// the user's training items excluded from the candidates.
///
/// The co-occurrence sum is factored as: per anchor node on one side of the
/// training edges, (a) the dense similarity mass of every query node inside
/// the anchor's retained prefix, and (b) a 0/1 accumulation of its edge
/// partners' retained prefixes. One matrix product and one propagation then
/// produce all scores for a cell. Retained sets at a smaller ratio are
/// prefixes of those at a larger one, so the grid is walked in ascending
/// ratio order with incremental updates.
pub fn retention_study(
    bundle: &DatasetBundle,
    cfg: &RetentionStudyConfig,
) -> Result<Vec<RetentionCell>, AnalysisError> {
    if cfg.q_grid.is_empty() || cfg.q_item_grid.is_empty() {
        return Err(AnalysisError::InvalidInput("empty retention grid".into()));
    }
    if cfg.kinds.is_empty() {
        return Err(AnalysisError::InvalidInput("no score types requested".into()));
    }
    if cfg.eval_n == 0 {
        return Err(AnalysisError::InvalidInput("eval_n must be >= 1".into()));
    }
    for &q in cfg.q_grid.iter().chain(&cfg.q_item_grid) {
        check_ratio(q)?;
    }

    let graph = Arc::new(build_graph(bundle, EdgeSet::Train)?);
    let op = SimilarityOperator::new(graph.clone(), cfg.layers);
    let n = graph.num_nodes();
    let num_users = bundle.num_users as usize;
    let num_items = bundle.num_items as usize;
    let train_map = per_user_items(&bundle.train);
    let test_map = per_user_items(&bundle.test);
    let mut eval_users: Vec<u32> = test_map.keys().copied().collect();
    eval_users.sort_unstable();
    if eval_users.is_empty() {
        return Err(AnalysisError::InvalidInput(
            "no users with test interactions".into(),
        ));
    }

    // Query axis = the side whose dense mass matrix is cheaper; the other
    // side's nodes become the edge anchors.
    let user_query =
        num_users * eval_users.len() <= num_items * num_items;
    let query_nodes: Vec<u32> = if user_query {
        eval_users.clone()
    } else {
        (0..graph.num_items).map(|i| graph.item_node(i)).collect()
    };
    let qn = query_nodes.len();
    let query_cols: HashMap<u32, usize> =
        query_nodes.iter().enumerate().map(|(c, &v)| (v, c)).collect();
    let anchor_count = if user_query { num_users } else { num_items };

    let split = cfg.kinds.iter().any(|k| *k != ScoreType::Full);
    let mats = if split { 2 } else { 1 };
    let scratch_mats = if split { 1 } else { 0 };
    let dense_bytes = 8
        * (5 * n * qn
            + (mats + scratch_mats) * anchor_count * qn
            + (mats + scratch_mats) * anchor_count * n);
    if dense_bytes > cfg.memory_budget {
        return Err(AnalysisError::MemoryBudget {
            need: dense_bytes,
            budget: cfg.memory_budget,
        });
    }

    // Ascending grids; anchor-side prefixes grow across the outer loop,
    // partner-side across the inner loop.
    let sorted_grid = |g: &[f64]| {
        let mut s = g.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s.dedup();
        s
    };
    let (ga, gb) = if user_query {
        (sorted_grid(&cfg.q_grid), sorted_grid(&cfg.q_item_grid))
    } else {
        (sorted_grid(&cfg.q_item_grid), sorted_grid(&cfg.q_grid))
    };
    let max_q_user = *sorted_grid(&cfg.q_grid).last().unwrap();
    let max_q_item = *sorted_grid(&cfg.q_item_grid).last().unwrap();

    let mut mt = Mat::zeros(n, qn);
    let lists = build_sorted_lists(
        &op,
        max_q_user,
        max_q_item,
        &query_cols,
        &mut mt,
        dense_bytes,
        cfg.memory_budget,
    )?;

    let anchor_node = |a: usize| -> u32 {
        if user_query {
            a as u32
        } else {
            graph.item_node(a as u32)
        }
    };
    let anchor_partners = |a: usize| -> Vec<u32> {
        if user_query {
            graph
                .user_adj
                .neighbors(a)
                .iter()
                .map(|&i| graph.item_node(i))
                .collect()
        } else {
            graph.item_adj.neighbors(a).to_vec()
        }
    };

    let mut at_u = Mat::zeros(anchor_count, qn);
    let mut at_i = if split { Mat::zeros(anchor_count, qn) } else { Mat::zeros(0, 0) };
    let mut e_u = Mat::zeros(anchor_count, n);
    let mut e_i = if split { Mat::zeros(anchor_count, n) } else { Mat::zeros(0, 0) };
    let mut scratch_at = if split { Mat::zeros(anchor_count, qn) } else { Mat::zeros(0, 0) };
    let mut scratch_e = if split { Mat::zeros(anchor_count, n) } else { Mat::zeros(0, 0) };

    let mut at_prev = vec![0usize; anchor_count];
    let mut cells = Vec::new();
    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(num_items);
    let empty: Vec<u32> = Vec::new();

    for &qa in &ga {
        // Advance the anchor-side mass matrix to the qa prefix.
        for a in 0..anchor_count {
            if anchor_partners(a).is_empty() {
                continue;
            }
            let node = anchor_node(a);
            let k = lists.prefix_len(node, qa).min(lists.ids[node as usize].len());
            for &v in &lists.ids[node as usize][at_prev[a]..k] {
                let dst = if split && !graph.is_user_node(v) { &mut at_i } else { &mut at_u };
                axpy(dst.row_mut(a), 1.0, mt.row(v as usize));
            }
            at_prev[a] = k;
        }

        e_u.fill(0.0);
        if split {
            e_i.fill(0.0);
        }
        let mut e_prev: HashMap<u32, usize> = HashMap::new();
        for &qb in &gb {
            // Advance the partner-side indicator matrix to the qb prefix.
            for a in 0..anchor_count {
                for partner in anchor_partners(a) {
                    let k0 = *e_prev.get(&partner).unwrap_or(&0);
                    let k = lists
                        .prefix_len(partner, qb)
                        .min(lists.ids[partner as usize].len());
                    for &v in &lists.ids[partner as usize][k0..k] {
                        let dst =
                            if split && !graph.is_user_node(v) { &mut e_i } else { &mut e_u };
                        dst.row_mut(a)[v as usize] += 1.0;
                    }
                }
            }
            for a in 0..anchor_count {
                for partner in anchor_partners(a) {
                    let k = lists
                        .prefix_len(partner, qb)
                        .min(lists.ids[partner as usize].len());
                    e_prev.insert(partner, k);
                }
            }

            let (q_user, q_item) = if user_query { (qa, qb) } else { (qb, qa) };
            for &kind in &cfg.kinds {
                let (pa, pe) = kind_parts(kind, user_query);
                let at_ref = select_part(pa, split, &at_u, &at_i, &mut scratch_at);
                let e_ref = select_part(pe, split, &e_u, &e_i, &mut scratch_e);
                let dt = e_ref.matmul_tn(at_ref);
                let f = op.apply(&dt)?;

                let mut sum = 0.0;
                for (qi, &u) in eval_users.iter().enumerate() {
                    let truth = &test_map[&u];
                    let exclude = train_map.get(&u).unwrap_or(&empty);
                    scored.clear();
                    for item in 0..num_items as u32 {
                        if exclude.binary_search(&item).is_ok() {
                            continue;
                        }
                        let s = if user_query {
                            f.get(num_users + item as usize, qi)
                        } else {
                            f.get(u as usize, item as usize)
                        };
                        scored.push((s, item));
                    }
                    let cmp = |a: &(f64, u32), b: &(f64, u32)| {
                        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
                    };
                    let k = cfg.eval_n.min(scored.len());
                    if k > 0 && k < scored.len() {
                        scored.select_nth_unstable_by(k - 1, cmp);
                        scored.truncate(k);
                    }
                    scored.sort_unstable_by(cmp);
                    let ranked: Vec<u32> = scored.iter().map(|&(_, i)| i).collect();
                    sum += ndcg_at(&ranked, truth, cfg.eval_n);
                }
                cells.push(RetentionCell {
                    q: q_user,
                    q_item,
                    kind,
                    ndcg: sum / eval_users.len() as f64,
                });
            }
        }
    }

    let kind_order =
        |k: ScoreType| cfg.kinds.iter().position(|&x| x == k).unwrap();
    cells.sort_by(|x, y| {
        x.q.partial_cmp(&y.q)
            .unwrap()
            .then(x.q_item.partial_cmp(&y.q_item).unwrap())
            .then(kind_order(x.kind).cmp(&kind_order(y.kind)))
    });
    Ok(cells)
}

/// CSV with header q,q_prime,type,ndcg.
pub fn retention_csv(cells: &[RetentionCell]) -> String {
    let mut out = String::from("q,q_prime,type,ndcg\n");
    for c in cells {
        out.push_str(&format!("{},{},{},{:.6}\n", c.q, c.q_item, c.kind, c.ndcg));
    }
    out
}
