//! Verification oracles. Two independent routes validate the gradients:
//!
//! 1. `finite_diff_check` central-differences the end-to-end loss with
//!    respect to E0 entries and compares against the analytic gradient.
//! 2. The pair-weight route treats every product e_v0 . e_v'0 as a free
//!    parameter W_vv' (scores become bilinear forms over materialized
//!    similarity rows), re-evaluates the losses in terms of W, and checks
//!    the closed-form per-pair gradient formulas against differences on W.
//!
//! Everything here runs in 64-bit on desk-scale graphs.

use std::sync::Arc;

use rand::Rng;

use crate::graph::{
    random_edges, GraphError, InteractionGraph, NeighborhoodIndex, SimilarityOperator,
};
use crate::losses::{
    backprop_to_initial, build_batch, loss_grad, LossConfig, LossError, LossKind,
};
use crate::mat::Mat;
use crate::model::{forward, EmbeddingTable, ModelError, Similarity};
use crate::rng::stream;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("invalid step: h must be positive and finite")]
    InvalidStep,
    #[error("similarity row for node {0} is not materialized")]
    MissingRow(u32),
    #[error("distribution length {got} does not match candidate count {want}")]
    DistributionMismatch { got: usize, want: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Pairwise weights W_vv' standing in for e_v0 . e_v'0, treated as free
/// parameters over all nodes of a small graph. Indexing is ordered: the
/// first index always plays the user-side neighbor role.
#[derive(Debug, Clone)]
pub struct PairWeightView {
    pub w: Mat,
}

impl PairWeightView {
    pub fn zeros(num_nodes: usize) -> Self {
        PairWeightView { w: Mat::zeros(num_nodes, num_nodes) }
    }

    /// W_vv' = e_v0 . e_v'0 from an actual table.
    pub fn from_table(table: &EmbeddingTable) -> Self {
        let w = table.values().matmul_nt(table.values());
        PairWeightView { w }
    }
}

/// One positive interaction plus its sampled negatives, everything in
/// unified node ids, for the W-parametrized losses.
#[derive(Debug, Clone)]
pub struct WInstance<'a> {
    pub u: u32,
    pub i_node: u32,
    pub neg_item_nodes: &'a [u32],
    pub neg_user_nodes: &'a [u32],
}

fn row<'a>(idx: &'a NeighborhoodIndex, node: u32) -> Result<&'a crate::graph::SimilarityRow, VerifyError> {
    idx.row(node).ok_or(VerifyError::MissingRow(node))
}

/// s(a, b) = sum_{v in N_a, v' in N_b} S_av S_bv' W_vv'; `a` is the
/// user-side operand.
fn score_w(
    idx: &NeighborhoodIndex,
    w: &PairWeightView,
    a: u32,
    b: u32,
) -> Result<f64, VerifyError> {
    typed_score_w(idx, w, a, b, 1.0, 1.0, TypedOn::None)
}

#[derive(Clone, Copy, PartialEq)]
enum TypedOn {
    None,
    /// coefficients keyed by the type of v' (the second operand's neighbor)
    SecondOperand,
    /// coefficients keyed by the type of v (the first operand's neighbor)
    FirstOperand,
}

/// Bilinear score with optional neighbor-type coefficients applied on one
/// side: alpha_user scales user-type neighbors, alpha_item item-type ones.
fn typed_score_w(
    idx: &NeighborhoodIndex,
    w: &PairWeightView,
    a: u32,
    b: u32,
    alpha_user: f64,
    alpha_item: f64,
    on: TypedOn,
) -> Result<f64, VerifyError> {
    let ra = row(idx, a)?;
    let rb = row(idx, b)?;
    let mut s = 0.0;
    for (v, wv) in ra.entries() {
        let cv = match on {
            TypedOn::FirstOperand => {
                if ra.user_entries.iter().any(|&(x, _)| x == v) {
                    alpha_user
                } else {
                    alpha_item
                }
            }
            _ => 1.0,
        };
        for (vp, wvp) in rb.entries() {
            let cvp = match on {
                TypedOn::SecondOperand => {
                    if rb.user_entries.iter().any(|&(x, _)| x == vp) {
                        alpha_user
                    } else {
                        alpha_item
                    }
                }
                _ => 1.0,
            };
            s += cv * cvp * wv * wvp * w.w.get(v as usize, vp as usize);
        }
    }
    Ok(s)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn lse(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// The configured loss for one positive, with all scores computed from W
/// instead of embeddings.
pub fn w_parametrized_loss(
    idx: &NeighborhoodIndex,
    w: &PairWeightView,
    inst: &WInstance,
    cfg: &LossConfig,
) -> Result<f64, VerifyError> {
    cfg.validate()?;
    let pos = score_w(idx, w, inst.u, inst.i_node)?;
    let item_logits = |typed: bool| -> Result<Vec<f64>, VerifyError> {
        let mut logits = vec![pos / cfg.tau];
        for &j in inst.neg_item_nodes {
            let s = if typed {
                typed_score_w(idx, w, inst.u, j, cfg.alpha_i_u, cfg.alpha_i_i, TypedOn::SecondOperand)?
            } else {
                score_w(idx, w, inst.u, j)?
            };
            logits.push(s / cfg.tau);
        }
        Ok(logits)
    };
    let user_logits = || -> Result<Vec<f64>, VerifyError> {
        let mut logits = vec![pos / cfg.tau];
        for &k in inst.neg_user_nodes {
            let s = typed_score_w(idx, w, k, inst.i_node, cfg.alpha_u_u, cfg.alpha_u_i, TypedOn::FirstOperand)?;
            logits.push(s / cfg.tau);
        }
        Ok(logits)
    };
    Ok(match cfg.kind {
        LossKind::Ssm => {
            let logits = item_logits(false)?;
            lse(&logits) - logits[0]
        }
        LossKind::Bpr => {
            let neg = score_w(idx, w, inst.u, inst.neg_item_nodes[0])?;
            softplus(-(pos - neg))
        }
        LossKind::NtSsm => {
            let mut l = 0.0;
            if cfg.use_item_direction {
                let logits = item_logits(true)?;
                l += lse(&logits) - logits[0];
            }
            if cfg.use_user_direction {
                let logits = user_logits()?;
                l += lse(&logits) - logits[0];
            }
            l
        }
        LossKind::NtBpr => {
            let mut l = 0.0;
            if cfg.use_item_direction {
                let neg = typed_score_w(
                    idx,
                    w,
                    inst.u,
                    inst.neg_item_nodes[0],
                    cfg.alpha_i_u,
                    cfg.alpha_i_i,
                    TypedOn::SecondOperand,
                )?;
                l += softplus(-(pos - neg));
            }
            if cfg.use_user_direction {
                let neg = typed_score_w(
                    idx,
                    w,
                    inst.neg_user_nodes[0],
                    inst.i_node,
                    cfg.alpha_u_u,
                    cfg.alpha_u_i,
                    TypedOn::FirstOperand,
                )?;
                l += softplus(-(pos - neg));
            }
            l
        }
    })
}

/// Softmax distribution over the SSM candidates [positive, negatives...]
/// induced by the W scores.
pub fn ssm_candidate_distribution(
    idx: &NeighborhoodIndex,
    w: &PairWeightView,
    inst: &WInstance,
    tau: f64,
) -> Result<Vec<f64>, VerifyError> {
    let mut logits = vec![score_w(idx, w, inst.u, inst.i_node)? / tau];
    for &j in inst.neg_item_nodes {
        logits.push(score_w(idx, w, inst.u, j)? / tau);
    }
    Ok(softmax(&logits))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let z = lse(logits);
    logits.iter().map(|l| (l - z).exp()).collect()
}

/// Per-direction pieces of the neighbor-typed softmax: the renormalized
/// distribution over negatives and the total negative mass.
pub struct DirectionMass {
    /// pi_hat over negatives (sums to 1)
    pub pi_hat: Vec<f64>,
    /// Pi: total probability mass on the negatives = 1 - pi(positive)
    pub mass: f64,
}

pub fn ntssm_direction_distributions(
    idx: &NeighborhoodIndex,
    w: &PairWeightView,
    inst: &WInstance,
    cfg: &LossConfig,
) -> Result<(DirectionMass, DirectionMass), VerifyError> {
    let pos = score_w(idx, w, inst.u, inst.i_node)?;
    let build = |neg_logits: Vec<f64>| {
        let mut logits = vec![pos / cfg.tau];
        logits.extend(neg_logits);
        let pi = softmax(&logits);
        let mass: f64 = pi[1..].iter().sum();
        let pi_hat = pi[1..].iter().map(|p| p / mass).collect();
        DirectionMass { pi_hat, mass }
    };
    let mut item_neg = Vec::new();
    for &j in inst.neg_item_nodes {
        item_neg.push(
            typed_score_w(idx, w, inst.u, j, cfg.alpha_i_u, cfg.alpha_i_i, TypedOn::SecondOperand)?
                / cfg.tau,
        );
    }
    let mut user_neg = Vec::new();
    for &k in inst.neg_user_nodes {
        user_neg.push(
            typed_score_w(idx, w, k, inst.i_node, cfg.alpha_u_u, cfg.alpha_u_i, TypedOn::FirstOperand)?
                / cfg.tau,
        );
    }
    Ok((build(item_neg), build(user_neg)))
}

/// Closed-form derivative of the (single-positive) sampled-softmax loss
/// with respect to the pair weight W_vv':
/// (S_uv / tau) * (E_{x ~ pi}[S_xv'] - S_iv'),
/// where pi is the candidate distribution over [i, negatives...].
pub fn pair_weight_grad_ssm(
    idx: &NeighborhoodIndex,
    u: u32,
    i_node: u32,
    neg_item_nodes: &[u32],
    pi: &[f64],
    v: u32,
    vp: u32,
    tau: f64,
) -> Result<f64, VerifyError> {
    if pi.len() != neg_item_nodes.len() + 1 {
        return Err(VerifyError::DistributionMismatch {
            got: pi.len(),
            want: neg_item_nodes.len() + 1,
        });
    }
    let s_uv = row(idx, u)?.weight(v);
    if s_uv == 0.0 {
        return Ok(0.0);
    }
    let s_ivp = row(idx, i_node)?.weight(vp);
    let mut expect = pi[0] * s_ivp;
    for (k, &x) in neg_item_nodes.iter().enumerate() {
        expect += pi[k + 1] * row(idx, x)?.weight(vp);
    }
    Ok(s_uv / tau * (expect - s_ivp))
}

/// Closed-form derivative of the bidirectional neighbor-typed softmax loss
/// with respect to W_vv': the item-direction term
/// (Pi_u S_uv / tau) * (alpha_I^(type of v') E_{j ~ pi_hat_u}[S_jv'] - S_iv')
/// plus the symmetric user-direction term. Directions follow the config's
/// direction flags.
#[allow(clippy::too_many_arguments)]
pub fn pair_weight_grad_ntssm(
    idx: &NeighborhoodIndex,
    u: u32,
    i_node: u32,
    neg_item_nodes: &[u32],
    neg_user_nodes: &[u32],
    item_dir: &DirectionMass,
    user_dir: &DirectionMass,
    v: u32,
    vp: u32,
    cfg: &LossConfig,
) -> Result<f64, VerifyError> {
    if item_dir.pi_hat.len() != neg_item_nodes.len() {
        return Err(VerifyError::DistributionMismatch {
            got: item_dir.pi_hat.len(),
            want: neg_item_nodes.len(),
        });
    }
    if user_dir.pi_hat.len() != neg_user_nodes.len() {
        return Err(VerifyError::DistributionMismatch {
            got: user_dir.pi_hat.len(),
            want: neg_user_nodes.len(),
        });
    }
    let s_uv = row(idx, u)?.weight(v);
    let s_ivp = row(idx, i_node)?.weight(vp);
    let mut total = 0.0;
    if cfg.use_item_direction && s_uv != 0.0 {
        let alpha = if idx.is_user_node(vp) { cfg.alpha_i_u } else { cfg.alpha_i_i };
        let mut expect = 0.0;
        for (k, &j) in neg_item_nodes.iter().enumerate() {
            expect += item_dir.pi_hat[k] * row(idx, j)?.weight(vp);
        }
        total += item_dir.mass * s_uv / cfg.tau * (alpha * expect - s_ivp);
    }
    if cfg.use_user_direction && s_ivp != 0.0 {
        let alpha = if idx.is_user_node(v) { cfg.alpha_u_u } else { cfg.alpha_u_i };
        let mut expect = 0.0;
        for (k, &kk) in neg_user_nodes.iter().enumerate() {
            expect += user_dir.pi_hat[k] * row(idx, kk)?.weight(v);
        }
        total += user_dir.mass * s_ivp / cfg.tau * (alpha * expect - s_uv);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// end-to-end finite differences on E0

/// Desk-scale randomized instance description for gradient checks.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct FdInstance {
    pub num_users: u32,
    pub num_items: u32,
    pub max_degree: u32,
    pub layers: usize,
    pub d: usize,
    pub positives: usize,
    pub seed: u64,
}

impl FdInstance {
    pub fn desk(seed: u64) -> Self {
        FdInstance {
            num_users: 12,
            num_items: 18,
            max_degree: 5,
            layers: 3,
            d: 6,
            positives: 8,
            seed,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct FdReport {
    pub kind: LossKind,
    pub similarity: Similarity,
    pub seed: u64,
    pub coords: usize,
    pub h: f64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare the analytic gradient w.r.t. E0 against central differences of
/// the loss at `coords` random E0 coordinates. Relative error uses
/// max(|analytic|, |numeric|, 1e-3) as the denominator so near-zero
/// coordinates do not divide by zero.
pub fn finite_diff_check(
    kind: LossKind,
    similarity: Similarity,
    inst: &FdInstance,
    coords: usize,
    h: f64,
    tolerance: f64,
) -> Result<FdReport, VerifyError> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(VerifyError::InvalidStep);
    }
    let edges = random_edges(inst.num_users, inst.num_items, inst.max_degree, inst.seed);
    let graph = Arc::new(InteractionGraph::from_edges(
        inst.num_users,
        inst.num_items,
        &edges,
    )?);
    let op = SimilarityOperator::new(graph.clone(), inst.layers);
    let n = graph.num_nodes();
    let table = EmbeddingTable::init(n, inst.d, inst.seed ^ 0x5eed);

    let mut cfg = LossConfig::new(kind);
    cfg.similarity = similarity;
    cfg.tau = 0.2;
    cfg.neg_items = 4;
    cfg.neg_users = 4;
    if kind.is_neighbor_typed() {
        // exercise the alpha paths away from the reduction point
        cfg.alpha_u_u = 1.2;
        cfg.alpha_u_i = 0.8;
        cfg.alpha_i_u = 0.9;
        cfg.alpha_i_i = 1.1;
    }
    let positives: Vec<(u32, u32)> = edges
        .iter()
        .step_by((edges.len() / inst.positives).max(1))
        .take(inst.positives)
        .copied()
        .collect();
    let batch = build_batch(&graph, &positives, &cfg, inst.seed ^ 0xbac, 0, 0)?;

    let state = forward(&op, &table)?;
    let analytic = backprop_to_initial(&op, &loss_grad(&state, &batch, &cfg)?)?;

    let loss_at = |t: &EmbeddingTable| -> Result<f64, VerifyError> {
        let s = forward(&op, t)?;
        Ok(loss_grad(&s, &batch, &cfg)?.loss)
    };

    let mut rng = stream(inst.seed, "fd-coords", kind as u64, 0);
    let mut max_rel_err: f64 = 0.0;
    for _ in 0..coords {
        let r = rng.gen_range(0..n);
        let c = rng.gen_range(0..inst.d);
        let base = table.values().get(r, c);
        let mut plus = table.clone();
        plus.values_mut().set(r, c, base + h);
        let mut minus = table.clone();
        minus.values_mut().set(r, c, base - h);
        let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
        let a = analytic.get(r, c);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(FdReport {
        kind,
        similarity,
        seed: inst.seed,
        coords,
        h,
        tolerance,
        max_rel_err,
        pass: max_rel_err < tolerance,
    })
}
