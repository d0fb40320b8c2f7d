//! Thin wasm-bindgen façade over the ntgcf crate for the browser demo.
//!
//! Everything works on small, user-pasted edge lists, so each entry point
//! just re-parses the text instead of holding graph state across calls.
//! All results go back to JS as JSON strings.

use std::sync::Arc;

use ntgcf::data::{split_dataset, RawInteractions};
use ntgcf::graph::{InteractionGraph, SimilarityOperator};
use ntgcf::losses::{backprop_to_initial, build_batch, loss_grad, LossConfig, LossKind};
use ntgcf::model::{forward, EmbeddingTable, Similarity};
use ntgcf::train::{adam_step, AdamState, TrainConfig};
use ntgcf::verify::{
    ntssm_direction_distributions, pair_weight_grad_ntssm, pair_weight_grad_ssm,
    ssm_candidate_distribution, PairWeightView, WInstance,
};
use ntgcf::eval::{evaluate_all, SplitChoice};
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;
use wasm_bindgen::JsValue;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// "u i" per line, blank lines and `#` comments skipped.
fn parse_edges(text: &str) -> Result<Vec<(u32, u32)>, String> {
    let mut edges = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut f = line.split_whitespace();
        let (u, i) = match (f.next(), f.next()) {
            (Some(u), Some(i)) => (u, i),
            _ => return Err(err(format!("line {}: expected \"user item\"", ln + 1))),
        };
        let u: u32 = u.parse().map_err(|_| err(format!("line {}: bad user id", ln + 1)))?;
        let i: u32 = i.parse().map_err(|_| err(format!("line {}: bad item id", ln + 1)))?;
        edges.push((u, i));
    }
    if edges.is_empty() {
        return Err(err("no edges given"));
    }
    Ok(edges)
}

fn build_op(edges: &[(u32, u32)], layers: usize) -> Result<SimilarityOperator, String> {
    let num_users = edges.iter().map(|e| e.0).max().unwrap() + 1;
    let num_items = edges.iter().map(|e| e.1).max().unwrap() + 1;
    let g = InteractionGraph::from_edges(num_users, num_items, edges).map_err(err)?;
    Ok(SimilarityOperator::new(Arc::new(g), layers))
}

#[derive(Serialize)]
struct RowEntry {
    id: u32,
    kind: &'static str,
    /// item-local id for item nodes, same as `id` for users
    local: u32,
    weight: f64,
}

#[derive(Serialize)]
struct RowReport {
    node: u32,
    kind: &'static str,
    layers: usize,
    entries: Vec<RowEntry>,
}

/// Multi-hop similarity weights of one node: who influences its final
/// embedding, and with how much mass. `node` is a unified id (users first,
/// then items).
pub fn similarity_row_impl(edges_text: &str, node: u32, layers: usize) -> Result<String, String> {
    let edges = parse_edges(edges_text)?;
    let op = build_op(&edges, layers)?;
    let g = op.graph().clone();
    if node as usize >= g.num_nodes() {
        return Err(err(format!("node {node} out of range (graph has {} nodes)", g.num_nodes())));
    }
    let idx = op.materialize_rows(&[node], usize::MAX).map_err(err)?;
    let row = idx.row(node).ok_or_else(|| err("row missing"))?;
    let mut entries: Vec<RowEntry> = row
        .entries()
        .map(|(v, w)| RowEntry {
            id: v,
            kind: if g.is_user_node(v) { "user" } else { "item" },
            local: if g.is_user_node(v) { v } else { v - g.num_users },
            weight: w,
        })
        .collect();
    entries.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.id.cmp(&b.id)));
    let report = RowReport {
        node,
        kind: if g.is_user_node(node) { "user" } else { "item" },
        layers,
        entries,
    };
    serde_json::to_string(&report).map_err(err)
}

#[derive(Serialize)]
struct PairGrad {
    v: u32,
    vp: u32,
    v_kind: &'static str,
    vp_kind: &'static str,
    s_uv: f64,
    s_ivp: f64,
    plain: f64,
    typed: f64,
}

#[derive(Serialize)]
struct PairGradReport {
    u: u32,
    item: u32,
    num_users: u32,
    negatives: Vec<u32>,
    pairs: Vec<PairGrad>,
}

/// Closed-form pair-weight gradients for one (user, item) interaction:
/// the plain softmax pull/push on every neighbor pair (v, v') versus the
/// neighbor-typed version under the given direction coefficients.
#[allow(clippy::too_many_arguments)]
pub fn pair_weight_gradients_impl(
    edges_text: &str,
    u: u32,
    item: u32,
    layers: usize,
    tau: f64,
    alpha_u_u: f64,
    alpha_u_i: f64,
    alpha_i_u: f64,
    alpha_i_i: f64,
    seed: u64,
) -> Result<String, String> {
    let edges = parse_edges(edges_text)?;
    let op = build_op(&edges, layers)?;
    let g = op.graph().clone();
    if u >= g.num_users || item >= g.num_items {
        return Err(err("user or item id out of range"));
    }
    let i_node = g.item_node(item);
    let nodes: Vec<u32> = (0..g.num_nodes() as u32).collect();
    let idx = op.materialize_rows(&nodes, usize::MAX).map_err(err)?;

    // negatives: up to 3 other items and 3 other users, smallest ids first
    let neg_items: Vec<u32> =
        (0..g.num_items).filter(|x| *x != item).take(3).map(|x| g.item_node(x)).collect();
    let neg_users: Vec<u32> = (0..g.num_users).filter(|x| *x != u).take(3).collect();
    if neg_items.is_empty() || neg_users.is_empty() {
        return Err(err("need at least two users and two items"));
    }

    let table = EmbeddingTable::init(g.num_nodes(), 8, seed);
    let w = PairWeightView::from_table(&table);
    let inst = WInstance { u, i_node, neg_item_nodes: &neg_items, neg_user_nodes: &neg_users };

    let mut cfg = LossConfig::new(LossKind::NtSsm);
    cfg.tau = tau;
    cfg.alpha_u_u = alpha_u_u;
    cfg.alpha_u_i = alpha_u_i;
    cfg.alpha_i_u = alpha_i_u;
    cfg.alpha_i_i = alpha_i_i;
    cfg.neg_items = neg_items.len();
    cfg.neg_users = neg_users.len();

    let pi = ssm_candidate_distribution(&idx, &w, &inst, tau).map_err(err)?;
    let (item_dir, user_dir) = ntssm_direction_distributions(&idx, &w, &inst, &cfg).map_err(err)?;

    let ru = idx.row(u).ok_or_else(|| err("missing user row"))?;
    let ri = idx.row(i_node).ok_or_else(|| err("missing item row"))?;
    let vs: Vec<u32> = ru.entries().map(|(v, _)| v).collect();
    let vps: Vec<u32> = ri.entries().map(|(v, _)| v).collect();
    let mut pairs = Vec::with_capacity(vs.len() * vps.len());
    for &v in &vs {
        for &vp in &vps {
            let plain =
                pair_weight_grad_ssm(&idx, u, i_node, &neg_items, &pi, v, vp, tau).map_err(err)?;
            let typed = pair_weight_grad_ntssm(
                &idx, u, i_node, &neg_items, &neg_users, &item_dir, &user_dir, v, vp, &cfg,
            )
            .map_err(err)?;
            pairs.push(PairGrad {
                v,
                vp,
                v_kind: if g.is_user_node(v) { "user" } else { "item" },
                vp_kind: if g.is_user_node(vp) { "user" } else { "item" },
                s_uv: ru.weight(v),
                s_ivp: ri.weight(vp),
                plain,
                typed,
            });
        }
    }
    pairs.sort_by(|a, b| (b.plain.abs() + b.typed.abs()).total_cmp(&(a.plain.abs() + a.typed.abs())));
    let report = PairGradReport {
        u,
        item,
        num_users: g.num_users,
        negatives: neg_items.iter().map(|n| n - g.num_users).collect(),
        pairs,
    };
    serde_json::to_string(&report).map_err(err)
}

#[derive(Serialize)]
struct DemoEpoch {
    epoch: usize,
    loss: f64,
    ndcg10: Option<f64>,
}

#[derive(Serialize)]
struct DemoRun {
    num_users: u32,
    num_items: u32,
    train_edges: usize,
    valid_edges: usize,
    history: Vec<DemoEpoch>,
}

/// Train a tiny model in the page: full-batch updates, validation NDCG@10
/// each epoch. Loss is one of bpr / ssm / nt-bpr / nt-ssm.
pub fn train_demo_impl(
    edges_text: &str,
    loss: &str,
    epochs: usize,
    layers: usize,
    d: usize,
    lr: f64,
    seed: u64,
) -> Result<String, String> {
    let edges = parse_edges(edges_text)?;
    let kind = match loss {
        "bpr" => LossKind::Bpr,
        "ssm" => LossKind::Ssm,
        "nt-bpr" => LossKind::NtBpr,
        "nt-ssm" => LossKind::NtSsm,
        other => return Err(err(format!("unknown loss {other}"))),
    };
    if epochs == 0 || epochs > 2000 || d == 0 || d > 128 {
        return Err(err("epochs must be 1..=2000 and d 1..=128"));
    }
    let raw = RawInteractions {
        records: edges.iter().map(|(u, i)| (u.to_string(), i.to_string())).collect(),
        source_path: "demo".into(),
    };
    let bundle = split_dataset(&raw, [0.8, 0.1, 0.1], seed).map_err(err)?;
    let g = Arc::new(
        InteractionGraph::from_edges(bundle.num_users, bundle.num_items, &bundle.train)
            .map_err(err)?,
    );
    let op = SimilarityOperator::new(g.clone(), layers);

    let mut loss_cfg = LossConfig::new(kind);
    loss_cfg.neg_items = 4.min(bundle.num_items as usize - 1).max(1);
    loss_cfg.neg_users = 4.min(bundle.num_users as usize - 1).max(1);
    let mut cfg = TrainConfig::new(loss_cfg.clone());
    cfg.lr = lr;
    cfg.l2 = 0.0;
    cfg.seed = seed;
    cfg.validate().map_err(err)?;

    let mut table = EmbeddingTable::init(g.num_nodes(), d, seed);
    let mut adam = AdamState::new(g.num_nodes(), d);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let batch =
            build_batch(&g, &bundle.train, &loss_cfg, seed, epoch as u64, 0).map_err(err)?;
        let state = forward(&op, &table).map_err(err)?;
        let buf = loss_grad(&state, &batch, &loss_cfg).map_err(err)?;
        let g0 = backprop_to_initial(&op, &buf).map_err(err)?;
        adam_step(&mut table, &g0, &mut adam, &cfg).map_err(err)?;

        let state = forward(&op, &table).map_err(err)?;
        let metrics =
            evaluate_all(&state, &bundle, SplitChoice::Valid, &[10], Similarity::Inner, false);
        let ndcg = (metrics.users_evaluated > 0).then(|| metrics.rows[0].ndcg);
        history.push(DemoEpoch { epoch: epoch + 1, loss: buf.loss, ndcg10: ndcg });
    }
    let run = DemoRun {
        num_users: bundle.num_users,
        num_items: bundle.num_items,
        train_edges: bundle.train.len(),
        valid_edges: bundle.valid.len(),
        history,
    };
    serde_json::to_string(&run).map_err(err)
}

// JsValue is only constructible on wasm targets, so the exported bindings
// stay thin and everything testable lives in the _impl functions above.

#[wasm_bindgen]
pub fn similarity_row(edges_text: &str, node: u32, layers: usize) -> Result<String, JsValue> {
    similarity_row_impl(edges_text, node, layers).map_err(JsValue::from)
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn pair_weight_gradients(
    edges_text: &str,
    u: u32,
    item: u32,
    layers: usize,
    tau: f64,
    alpha_u_u: f64,
    alpha_u_i: f64,
    alpha_i_u: f64,
    alpha_i_i: f64,
    seed: u64,
) -> Result<String, JsValue> {
    pair_weight_gradients_impl(
        edges_text, u, item, layers, tau, alpha_u_u, alpha_u_i, alpha_i_u, alpha_i_i, seed,
    )
    .map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn train_demo(
    edges_text: &str,
    loss: &str,
    epochs: usize,
    layers: usize,
    d: usize,
    lr: f64,
    seed: u64,
) -> Result<String, JsValue> {
    train_demo_impl(edges_text, loss, epochs, layers, d, lr, seed).map_err(JsValue::from)
}
