//! Contrastive objectives over propagated embeddings: BPR and sampled
//! softmax, plus their bidirectional neighbor-type-aware variants, all with
//! exact analytic gradients (cosine norm terms included).
//!
//! Gradients are produced with respect to the *final* embeddings E. For the
//! neighbor-type variants, the pieces that multiply a type coefficient are
//! accumulated separately against the user-sourced / item-sourced component
//! matrices; `backprop_to_initial` pulls everything back to E0 through the
//! (symmetric) similarity operator.

use rand::Rng;

use crate::graph::{GraphError, InteractionGraph, SimilarityOperator};
use crate::mat::{axpy, dot, Mat};
use crate::model::{PropagatedState, Similarity};
use crate::rng::stream;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("negative sampling exhausted for {kind} {id}: {draws} draws rejected")]
    SamplingExhausted { kind: &'static str, id: u32, draws: usize },
    #[error("non-finite loss at positive ({u}, {i})")]
    NonFinite { u: u32, i: u32 },
    #[error("non-finite embeddings passed to loss")]
    NonFiniteEmbeddings,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Bpr,
    NtBpr,
    Ssm,
    NtSsm,
}

impl LossKind {
    pub fn is_neighbor_typed(self) -> bool {
        matches!(self, LossKind::NtBpr | LossKind::NtSsm)
    }
}

/// Objective configuration. The four `alpha_*` coefficients rescale the
/// neighbor-type components of negative similarities: `alpha_i_u` /
/// `alpha_i_i` weight the user-/item-sourced parts of negative *items*
/// (item direction), `alpha_u_u` / `alpha_u_i` those of negative *users*
/// (user direction). The direction flags exist for ablations; plain
/// BPR/SSM ignore them and always use the item direction only.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub similarity: Similarity,
    pub tau: f64,
    pub alpha_u_u: f64,
    pub alpha_u_i: f64,
    pub alpha_i_u: f64,
    pub alpha_i_i: f64,
    pub neg_items: usize,
    pub neg_users: usize,
    #[serde(default = "default_true")]
    pub use_item_direction: bool,
    #[serde(default = "default_true")]
    pub use_user_direction: bool,
}

fn default_true() -> bool {
    true
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        let bpr_like = matches!(kind, LossKind::Bpr | LossKind::NtBpr);
        LossConfig {
            kind,
            similarity: Similarity::Inner,
            tau: 0.2,
            alpha_u_u: 1.0,
            alpha_u_i: 1.0,
            alpha_i_u: 1.0,
            alpha_i_i: 1.0,
            neg_items: if bpr_like { 1 } else { 256 },
            neg_users: if bpr_like { 1 } else { 256 },
            use_item_direction: true,
            use_user_direction: kind.is_neighbor_typed(),
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let fail = |msg: String| Err(LossError::InvalidConfig(msg));
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        for (name, a) in [
            ("alpha_u_u", self.alpha_u_u),
            ("alpha_u_i", self.alpha_u_i),
            ("alpha_i_u", self.alpha_i_u),
            ("alpha_i_i", self.alpha_i_i),
        ] {
            if !(a > 0.0) {
                return fail(format!("{name} must be positive, got {a}"));
            }
        }
        if self.kind.is_neighbor_typed() && !self.use_item_direction && !self.use_user_direction {
            return fail("at least one direction must be enabled".to_string());
        }
        let needs_items =
            !self.kind.is_neighbor_typed() || self.use_item_direction;
        if needs_items && self.neg_items < 1 {
            return fail("neg_items must be >= 1".to_string());
        }
        if self.kind.is_neighbor_typed() && self.use_user_direction && self.neg_users < 1 {
            return fail("neg_users must be >= 1 for bidirectional losses".to_string());
        }
        Ok(())
    }
}

/// A mini-batch of positive edges with per-positive negative samples laid
/// out row-major: negatives of positive `p` occupy `p*k .. (p+1)*k`.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub positives: Vec<(u32, u32)>,
    pub neg_items: Vec<u32>,
    pub k_items: usize,
    pub neg_users: Vec<u32>,
    pub k_users: usize,
}

/// Uniform with replacement over items, rejecting training positives of u.
/// Bails out after 1000 * count rejected draws (near-complete users).
pub fn sample_negatives(
    graph: &InteractionGraph,
    u: u32,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<u32>, LossError> {
    let mut out = Vec::with_capacity(count);
    let limit = 1000 * count;
    let mut draws = 0usize;
    while out.len() < count {
        let j = rng.gen_range(0..graph.num_items);
        if graph.has_edge(u, j) {
            draws += 1;
            if draws >= limit {
                return Err(LossError::SamplingExhausted { kind: "user", id: u, draws });
            }
        } else {
            out.push(j);
        }
    }
    Ok(out)
}

/// Uniform over users, rejecting users that interacted with item i.
pub fn sample_negative_users(
    graph: &InteractionGraph,
    i: u32,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<u32>, LossError> {
    let interacted = graph.item_adj.neighbors(i as usize);
    let mut out = Vec::with_capacity(count);
    let limit = 1000 * count;
    let mut draws = 0usize;
    while out.len() < count {
        let k = rng.gen_range(0..graph.num_users);
        if interacted.binary_search(&k).is_ok() {
            draws += 1;
            if draws >= limit {
                return Err(LossError::SamplingExhausted { kind: "item", id: i, draws });
            }
        } else {
            out.push(k);
        }
    }
    Ok(out)
}

/// Sample negatives for a slice of positives. The stream for positive `t`
/// is keyed by (seed, epoch, base_index + t), so batches are reproducible
/// regardless of batching or thread scheduling.
pub fn build_batch(
    graph: &InteractionGraph,
    positives: &[(u32, u32)],
    cfg: &LossConfig,
    seed: u64,
    epoch: u64,
    base_index: u64,
) -> Result<TrainBatch, LossError> {
    cfg.validate()?;
    let k_items = if !cfg.kind.is_neighbor_typed() || cfg.use_item_direction {
        if cfg.kind.is_neighbor_typed() || matches!(cfg.kind, LossKind::Ssm) {
            cfg.neg_items
        } else {
            1 // plain BPR consumes a single negative
        }
    } else {
        0
    };
    let k_items = match cfg.kind {
        LossKind::Bpr => 1,
        LossKind::NtBpr if cfg.use_item_direction => 1,
        LossKind::NtBpr => 0,
        _ => k_items,
    };
    let k_users = match cfg.kind {
        LossKind::NtBpr if cfg.use_user_direction => 1,
        LossKind::NtSsm if cfg.use_user_direction => cfg.neg_users,
        _ => 0,
    };
    let mut neg_items = Vec::with_capacity(positives.len() * k_items);
    let mut neg_users = Vec::with_capacity(positives.len() * k_users);
    for (t, &(u, i)) in positives.iter().enumerate() {
        if k_items > 0 {
            let mut rng = stream(seed, "neg-item", epoch, base_index + t as u64);
            neg_items.extend(sample_negatives(graph, u, k_items, &mut rng)?);
        }
        if k_users > 0 {
            let mut rng = stream(seed, "neg-user", epoch, base_index + t as u64);
            neg_users.extend(sample_negative_users(graph, i, k_users, &mut rng)?);
        }
    }
    Ok(TrainBatch { positives: positives.to_vec(), neg_items, k_items, neg_users, k_users })
}

/// Batch-mean loss and its gradients. `grad_from_user`/`grad_from_item`
/// carry the type-coefficient-scaled parts and are only present for the
/// neighbor-typed objectives.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub grad_e: Mat,
    pub grad_from_user: Option<Mat>,
    pub grad_from_item: Option<Mat>,
    pub loss: f64,
}

pub fn loss_grad(
    state: &PropagatedState,
    batch: &TrainBatch,
    cfg: &LossConfig,
) -> Result<GradientBuffer, LossError> {
    cfg.validate()?;
    if !state.e.is_finite() {
        return Err(LossError::NonFiniteEmbeddings);
    }
    if cfg.kind.is_neighbor_typed() && !state.has_decomposition() {
        return Err(LossError::InvalidConfig(
            "neighbor-typed losses need a forward with the type decomposition".into(),
        ));
    }
    match cfg.kind {
        LossKind::Bpr => bpr_loss_grad(state, batch, cfg),
        LossKind::Ssm => ssm_loss_grad(state, batch, cfg),
        LossKind::NtBpr => nt_bpr_loss_grad(state, batch, cfg),
        LossKind::NtSsm => nt_ssm_loss_grad(state, batch, cfg),
    }
}

// ---------------------------------------------------------------------------
// shared numeric pieces

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), overflow-safe.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Max-shifted log-sum-exp and the softmax probabilities of `logits`.
fn log_sum_exp(logits: &[f64], probs: &mut Vec<f64>) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    probs.clear();
    let mut z = 0.0;
    for &l in logits {
        let e = (l - m).exp();
        probs.push(e);
        z += e;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    m + z.ln()
}

/// Plain similarity between two rows of E.
fn plain_score(state: &PropagatedState, a: usize, b: usize, sim: Similarity) -> f64 {
    let raw = dot(state.e.row(a), state.e.row(b));
    match sim {
        Similarity::Inner => raw,
        Similarity::Cosine => {
            let d = state.norms[a] * state.norms[b];
            if d == 0.0 {
                0.0
            } else {
                raw / d
            }
        }
    }
}

/// Accumulate c * d(sim(a, b))/dE for an undecomposed pair.
fn plain_score_grad(
    state: &PropagatedState,
    grad_e: &mut Mat,
    a: usize,
    b: usize,
    c: f64,
    sim: Similarity,
) {
    match sim {
        Similarity::Inner => {
            axpy(grad_e.row_mut(a), c, state.e.row(b));
            axpy(grad_e.row_mut(b), c, state.e.row(a));
        }
        Similarity::Cosine => {
            let (na, nb) = (state.norms[a], state.norms[b]);
            if na == 0.0 || nb == 0.0 {
                return;
            }
            let inv = 1.0 / (na * nb);
            let s = dot(state.e.row(a), state.e.row(b)) * inv;
            let (ea, eb) = (state.e.row(a), state.e.row(b));
            {
                let ga = grad_e.row_mut(a);
                axpy(ga, c * inv, eb);
                axpy(ga, -c * s / (na * na), ea);
            }
            let gb = grad_e.row_mut(b);
            axpy(gb, c * inv, ea);
            axpy(gb, -c * s / (nb * nb), eb);
        }
    }
}

/// One direction of a neighbor-typed objective: the anchor keeps its full
/// embedding, negatives are recombined as
/// m_x = alpha_user_type * e_x^(U) + alpha_item_type * e_x^(I).
struct TypedSide<'a> {
    state: &'a PropagatedState,
    sim: Similarity,
    alpha_user: f64,
    alpha_item: f64,
}

impl<'a> TypedSide<'a> {
    /// e_anchor . m_x without materializing m_x: the two dot products
    /// against the typed components are cheaper than building the blend,
    /// and this is the innermost loop of every NT training step.
    fn raw_score(&self, anchor: usize, x: usize) -> f64 {
        let ea = self.state.e.row(anchor);
        self.alpha_user * dot(ea, self.state.from_user.row(x))
            + self.alpha_item * dot(ea, self.state.from_item.row(x))
    }

    fn score(&self, anchor: usize, x: usize) -> f64 {
        let raw = self.raw_score(anchor, x);
        match self.sim {
            Similarity::Inner => raw,
            Similarity::Cosine => {
                let d = self.state.norms[anchor] * self.state.norms[x];
                if d == 0.0 {
                    0.0
                } else {
                    raw / d
                }
            }
        }
    }

    /// Accumulate c * d(score)/d(E, E_fromU, E_fromI).
    fn score_grad(
        &self,
        grad_e: &mut Mat,
        grad_fu: &mut Mat,
        grad_fi: &mut Mat,
        anchor: usize,
        x: usize,
        c: f64,
    ) {
        let ea = self.state.e.row(anchor);
        let (fu, fi) = (self.state.from_user.row(x), self.state.from_item.row(x));
        match self.sim {
            Similarity::Inner => {
                {
                    let ga = grad_e.row_mut(anchor);
                    axpy(ga, c * self.alpha_user, fu);
                    axpy(ga, c * self.alpha_item, fi);
                }
                axpy(grad_fu.row_mut(x), c * self.alpha_user, ea);
                axpy(grad_fi.row_mut(x), c * self.alpha_item, ea);
            }
            Similarity::Cosine => {
                let (na, nx) = (self.state.norms[anchor], self.state.norms[x]);
                if na == 0.0 || nx == 0.0 {
                    return;
                }
                let inv = 1.0 / (na * nx);
                let s = self.raw_score(anchor, x) * inv;
                {
                    let ga = grad_e.row_mut(anchor);
                    axpy(ga, c * inv * self.alpha_user, fu);
                    axpy(ga, c * inv * self.alpha_item, fi);
                    axpy(ga, -c * s / (na * na), ea);
                }
                axpy(grad_fu.row_mut(x), c * self.alpha_user * inv, ea);
                axpy(grad_fi.row_mut(x), c * self.alpha_item * inv, ea);
                // the norm in the denominator is the norm of the *full* e_x
                axpy(grad_e.row_mut(x), -c * s / (nx * nx), self.state.e.row(x));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// plain objectives

pub fn bpr_loss_grad(
    state: &PropagatedState,
    batch: &TrainBatch,
    cfg: &LossConfig,
) -> Result<GradientBuffer, LossError> {
    assert!(matches!(cfg.kind, LossKind::Bpr));
    assert!(batch.k_items >= 1, "BPR needs one negative item per positive");
    let n = state.e.rows();
    let mut grad_e = Mat::zeros(n, state.e.cols());
    let mut loss = 0.0;
    let scale = 1.0 / batch.positives.len().max(1) as f64;
    for (p, &(u, i)) in batch.positives.iter().enumerate() {
        let a = u as usize;
        let b = state.num_users() as usize + i as usize;
        let j = batch.neg_items[p * batch.k_items] as usize + state.num_users() as usize;
        let z = plain_score(state, a, b, cfg.similarity)
            - plain_score(state, a, j, cfg.similarity);
        let l = softplus(-z);
        if !l.is_finite() {
            return Err(LossError::NonFinite { u, i });
        }
        loss += scale * l;
        let c = -sigmoid(-z) * scale; // d(loss)/d(positive score)
        plain_score_grad(state, &mut grad_e, a, b, c, cfg.similarity);
        plain_score_grad(state, &mut grad_e, a, j, -c, cfg.similarity);
    }
    Ok(GradientBuffer { grad_e, grad_from_user: None, grad_from_item: None, loss })
}

pub fn ssm_loss_grad(
    state: &PropagatedState,
    batch: &TrainBatch,
    cfg: &LossConfig,
) -> Result<GradientBuffer, LossError> {
    assert!(matches!(cfg.kind, LossKind::Ssm));
    let n = state.e.rows();
    let mut grad_e = Mat::zeros(n, state.e.cols());
    let mut loss = 0.0;
    let scale = 1.0 / batch.positives.len().max(1) as f64;
    let mut logits = Vec::with_capacity(batch.k_items + 1);
    let mut probs = Vec::with_capacity(batch.k_items + 1);
    for (p, &(u, i)) in batch.positives.iter().enumerate() {
        let a = u as usize;
        let b = state.num_users() as usize + i as usize;
        let negs = &batch.neg_items[p * batch.k_items..(p + 1) * batch.k_items];
        logits.clear();
        logits.push(plain_score(state, a, b, cfg.similarity) / cfg.tau);
        for &j in negs {
            let jr = state.num_users() as usize + j as usize;
            logits.push(plain_score(state, a, jr, cfg.similarity) / cfg.tau);
        }
        let lse = log_sum_exp(&logits, &mut probs);
        let l = lse - logits[0];
        if !l.is_finite() {
            return Err(LossError::NonFinite { u, i });
        }
        loss += scale * l;
        let c0 = (probs[0] - 1.0) / cfg.tau * scale;
        plain_score_grad(state, &mut grad_e, a, b, c0, cfg.similarity);
        for (k, &j) in negs.iter().enumerate() {
            let jr = state.num_users() as usize + j as usize;
            let cj = probs[k + 1] / cfg.tau * scale;
            plain_score_grad(state, &mut grad_e, a, jr, cj, cfg.similarity);
        }
    }
    Ok(GradientBuffer { grad_e, grad_from_user: None, grad_from_item: None, loss })
}

// ---------------------------------------------------------------------------
// neighbor-typed objectives

struct NtBuffers {
    grad_e: Mat,
    grad_fu: Mat,
    grad_fi: Mat,
}

fn nt_ssm_direction(
    state: &PropagatedState,
    cfg: &LossConfig,
    bufs: &mut NtBuffers,
    anchor: usize,
    pos: usize,
    neg_rows: impl Iterator<Item = usize> + Clone,
    side: &TypedSide,
    scale: f64,
) -> f64 {
    let mut logits = Vec::new();
    let mut probs = Vec::new();
    logits.push(plain_score(state, anchor, pos, cfg.similarity) / cfg.tau);
    for x in neg_rows.clone() {
        logits.push(side.score(anchor, x) / cfg.tau);
    }
    let lse = log_sum_exp(&logits, &mut probs);
    let loss = lse - logits[0];
    let c0 = (probs[0] - 1.0) / cfg.tau * scale;
    plain_score_grad(state, &mut bufs.grad_e, anchor, pos, c0, cfg.similarity);
    for (k, x) in neg_rows.enumerate() {
        let c = probs[k + 1] / cfg.tau * scale;
        side.score_grad(&mut bufs.grad_e, &mut bufs.grad_fu, &mut bufs.grad_fi, anchor, x, c);
    }
    loss
}

fn nt_bpr_direction(
    state: &PropagatedState,
    cfg: &LossConfig,
    bufs: &mut NtBuffers,
    anchor: usize,
    pos: usize,
    neg: usize,
    side: &TypedSide,
    scale: f64,
) -> f64 {
    let z = plain_score(state, anchor, pos, cfg.similarity) - side.score(anchor, neg);
    let c = -sigmoid(-z) * scale;
    plain_score_grad(state, &mut bufs.grad_e, anchor, pos, c, cfg.similarity);
    side.score_grad(&mut bufs.grad_e, &mut bufs.grad_fu, &mut bufs.grad_fi, anchor, neg, -c);
    softplus(-z)
}

fn nt_loss_grad(
    state: &PropagatedState,
    batch: &TrainBatch,
    cfg: &LossConfig,
) -> Result<GradientBuffer, LossError> {
    let n = state.e.rows();
    let d = state.e.cols();
    let mut bufs = NtBuffers {
        grad_e: Mat::zeros(n, d),
        grad_fu: Mat::zeros(n, d),
        grad_fi: Mat::zeros(n, d),
    };
    let mut loss = 0.0;
    let scale = 1.0 / batch.positives.len().max(1) as f64;
    let nu = state.num_users() as usize;
    let item_side = TypedSide {
        state,
        sim: cfg.similarity,
        alpha_user: cfg.alpha_i_u,
        alpha_item: cfg.alpha_i_i,
    };
    let user_side = TypedSide {
        state,
        sim: cfg.similarity,
        alpha_user: cfg.alpha_u_u,
        alpha_item: cfg.alpha_u_i,
    };
    for (p, &(u, i)) in batch.positives.iter().enumerate() {
        let a = u as usize;
        let b = nu + i as usize;
        let mut l = 0.0;
        match cfg.kind {
            LossKind::NtSsm => {
                if cfg.use_item_direction {
                    let negs = &batch.neg_items[p * batch.k_items..(p + 1) * batch.k_items];
                    l += nt_ssm_direction(
                        state,
                        cfg,
                        &mut bufs,
                        a,
                        b,
                        negs.iter().map(|&j| nu + j as usize),
                        &item_side,
                        scale,
                    );
                }
                if cfg.use_user_direction {
                    let negs = &batch.neg_users[p * batch.k_users..(p + 1) * batch.k_users];
                    l += nt_ssm_direction(
                        state,
                        cfg,
                        &mut bufs,
                        b,
                        a,
                        negs.iter().map(|&k| k as usize),
                        &user_side,
                        scale,
                    );
                }
            }
            LossKind::NtBpr => {
                if cfg.use_item_direction {
                    let j = nu + batch.neg_items[p * batch.k_items] as usize;
                    l += nt_bpr_direction(state, cfg, &mut bufs, a, b, j, &item_side, scale);
                }
                if cfg.use_user_direction {
                    let k = batch.neg_users[p * batch.k_users] as usize;
                    l += nt_bpr_direction(state, cfg, &mut bufs, b, a, k, &user_side, scale);
                }
            }
            _ => unreachable!(),
        }
        if !l.is_finite() {
            return Err(LossError::NonFinite { u, i });
        }
        loss += scale * l;
    }
    Ok(GradientBuffer {
        grad_e: bufs.grad_e,
        grad_from_user: Some(bufs.grad_fu),
        grad_from_item: Some(bufs.grad_fi),
        loss,
    })
}

pub fn nt_ssm_loss_grad(
    state: &PropagatedState,
    batch: &TrainBatch,
    cfg: &LossConfig,
) -> Result<GradientBuffer, LossError> {
    assert!(matches!(cfg.kind, LossKind::NtSsm));
    nt_loss_grad(state, batch, cfg)
}

pub fn nt_bpr_loss_grad(
    state: &PropagatedState,
    batch: &TrainBatch,
    cfg: &LossConfig,
) -> Result<GradientBuffer, LossError> {
    assert!(matches!(cfg.kind, LossKind::NtBpr));
    nt_loss_grad(state, batch, cfg)
}

/// Pull gradients w.r.t. (E, E_fromU, E_fromI) back to E0. Because the
/// operator is symmetric and the typed components are masked propagations
/// (E_fromU = S (maskU . E0)), the pullback of a typed buffer is the
/// propagated buffer with rows of the non-matching type zeroed.
pub fn backprop_to_initial(
    op: &SimilarityOperator,
    buf: &GradientBuffer,
) -> Result<Mat, LossError> {
    let num_users = op.graph().num_users as usize;
    let n = op.graph().num_nodes();
    let mut g0 = op.apply(&buf.grad_e)?;
    if let Some(gfu) = &buf.grad_from_user {
        let mut t = op.apply(gfu)?;
        t.zero_rows(num_users, n);
        g0.axpy(1.0, &t);
    }
    if let Some(gfi) = &buf.grad_from_item {
        let mut t = op.apply(gfi)?;
        t.zero_rows(0, num_users);
        g0.axpy(1.0, &t);
    }
    Ok(g0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::random_edges;
    use crate::model::{forward, EmbeddingTable};
    use std::sync::Arc;

    fn setup(
        num_users: u32,
        num_items: u32,
        layers: usize,
        seed: u64,
        d: usize,
    ) -> (Arc<InteractionGraph>, SimilarityOperator, PropagatedState, EmbeddingTable) {
        let edges = random_edges(num_users, num_items, 4, seed);
        let g = Arc::new(InteractionGraph::from_edges(num_users, num_items, &edges).unwrap());
        let op = SimilarityOperator::new(g.clone(), layers);
        let t = EmbeddingTable::init((num_users + num_items) as usize, d, seed ^ 0xabc);
        let s = forward(&op, &t).unwrap();
        (g, op, s, t)
    }

    #[test]
    fn sampling_respects_positives_and_determinism() {
        let g = InteractionGraph::from_edges(2, 10, &[(0, 3), (0, 7), (1, 0)]).unwrap();
        let mut rng = stream(1, "t", 0, 0);
        let negs = sample_negatives(&g, 0, 1000, &mut rng).unwrap();
        assert!(negs.iter().all(|&j| j != 3 && j != 7));
        let mut rng2 = stream(1, "t", 0, 0);
        assert_eq!(negs, sample_negatives(&g, 0, 1000, &mut rng2).unwrap());
        assert!(sample_negatives(&g, 0, 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn forced_outcome_for_near_complete_user() {
        let edges: Vec<(u32, u32)> = (0..9).map(|i| (0, i)).collect();
        let g = InteractionGraph::from_edges(1, 10, &edges).unwrap();
        let mut rng = stream(2, "t", 0, 0);
        let negs = sample_negatives(&g, 0, 50, &mut rng).unwrap();
        assert!(negs.iter().all(|&j| j == 9));
    }

    #[test]
    fn complete_user_exhausts_sampling() {
        let edges: Vec<(u32, u32)> = (0..5).map(|i| (0, i)).collect();
        let g = InteractionGraph::from_edges(1, 5, &edges).unwrap();
        let mut rng = stream(3, "t", 0, 0);
        assert!(matches!(
            sample_negatives(&g, 0, 2, &mut rng),
            Err(LossError::SamplingExhausted { .. })
        ));
    }

    #[test]
    fn sampling_is_uniform_over_valid_items() {
        let g = InteractionGraph::from_edges(1, 10, &[(0, 2), (0, 5)]).unwrap();
        let mut rng = stream(4, "t", 0, 0);
        let n = 100_000;
        let negs = sample_negatives(&g, 0, n, &mut rng).unwrap();
        let mut counts = [0usize; 10];
        for j in negs {
            counts[j as usize] += 1;
        }
        let p = 1.0 / 8.0;
        let sigma = (p * (1.0 - p) * n as f64).sqrt();
        for (j, &c) in counts.iter().enumerate() {
            if j == 2 || j == 5 {
                assert_eq!(c, 0);
            } else {
                assert!(
                    (c as f64 - p * n as f64).abs() < 5.0 * sigma,
                    "item {j} count {c}"
                );
            }
        }
    }

    #[test]
    fn bpr_closed_form_at_equal_scores() {
        // zero embeddings -> all scores equal -> per-pair loss ln 2
        let (g, op, _, _) = setup(4, 6, 2, 1, 3);
        let t = EmbeddingTable::from_mat(Mat::zeros(10, 3));
        let s = forward(&op, &t).unwrap();
        let cfg = LossConfig::new(LossKind::Bpr);
        let batch = build_batch(&g, &[(0, 0), (1, 1)], &cfg, 7, 0, 0).unwrap();
        let out = bpr_loss_grad(&s, &batch, &cfg).unwrap();
        assert!((out.loss - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ssm_closed_forms() {
        // tau=1, s(u,i)=1, one negative with s=0 -> loss = ln(1 + e^-1)
        let g = Arc::new(InteractionGraph::from_edges(1, 2, &[(0, 0), (0, 1)]).unwrap());
        let op = SimilarityOperator::new(g.clone(), 0); // identity: E = E0
        let mut m = Mat::zeros(3, 1);
        m.set(0, 0, 1.0);
        m.set(1, 0, 1.0); // s(u0, i0) = 1, s(u0, i1) = 0
        let s = forward(&op, &EmbeddingTable::from_mat(m)).unwrap();
        let mut cfg = LossConfig::new(LossKind::Ssm);
        cfg.tau = 1.0;
        cfg.neg_items = 1;
        let batch = TrainBatch {
            positives: vec![(0, 0)],
            neg_items: vec![1],
            k_items: 1,
            neg_users: vec![],
            k_users: 0,
        };
        let out = ssm_loss_grad(&s, &batch, &cfg).unwrap();
        assert!((out.loss - (1.0 + (-1.0_f64).exp()).ln()).abs() < 1e-12);

        // all scores equal, m negatives -> loss = ln(m + 1)
        let zero = forward(&op, &EmbeddingTable::from_mat(Mat::zeros(3, 1))).unwrap();
        let batch = TrainBatch {
            positives: vec![(0, 0)],
            neg_items: vec![1, 1, 0],
            k_items: 3,
            neg_users: vec![],
            k_users: 0,
        };
        let out = ssm_loss_grad(&zero, &batch, &cfg).unwrap();
        assert!((out.loss - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_probs_sum_to_one_and_shift_invariant() {
        let logits = vec![0.3, -2.0, 5.5, 0.0];
        let mut probs = Vec::new();
        let lse = log_sum_exp(&logits, &mut probs);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|x| x + 123.0).collect();
        let mut probs2 = Vec::new();
        let lse2 = log_sum_exp(&shifted, &mut probs2);
        assert!((lse2 - lse - 123.0).abs() < 1e-9);
        for (a, b) in probs.iter().zip(&probs2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ssm_loss_is_translation_invariant_and_nonnegative() {
        let (g, _, s, _) = setup(8, 12, 2, 5, 4);
        let mut cfg = LossConfig::new(LossKind::Ssm);
        cfg.neg_items = 6;
        let batch = build_batch(&g, &g.user_adj.neighbors(0).iter().map(|&i| (0, i)).collect::<Vec<_>>(), &cfg, 11, 0, 0).unwrap();
        let out = ssm_loss_grad(&s, &batch, &cfg).unwrap();
        assert!(out.loss >= 0.0);
    }

    fn reduction_check(plain_kind: LossKind, nt_kind: LossKind, sim: Similarity) {
        let (g, op, s, _) = setup(10, 14, 3, 9, 5);
        let mut plain = LossConfig::new(plain_kind);
        plain.similarity = sim;
        plain.neg_items = 5;
        let mut nt = LossConfig::new(nt_kind);
        nt.similarity = sim;
        nt.neg_items = 5;
        nt.use_user_direction = false; // item direction only
        let positives: Vec<(u32, u32)> = (0..10)
            .filter_map(|u| g.user_adj.neighbors(u).first().map(|&i| (u as u32, i)))
            .collect();
        let batch = build_batch(&g, &positives, &plain, 13, 0, 0).unwrap();
        // same negatives drive both objectives
        let out_plain = loss_grad(&s, &batch, &plain).unwrap();
        let out_nt = loss_grad(&s, &batch, &nt).unwrap();
        assert_eq!(
            out_plain.loss, out_nt.loss,
            "alpha=1 single-direction loss must reduce bitwise"
        );
        let g_plain = backprop_to_initial(&op, &out_plain).unwrap();
        let g_nt = backprop_to_initial(&op, &out_nt).unwrap();
        for (a, b) in g_plain.as_slice().iter().zip(g_nt.as_slice()) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn nt_ssm_reduces_to_ssm_at_unit_alpha() {
        reduction_check(LossKind::Ssm, LossKind::NtSsm, Similarity::Inner);
        reduction_check(LossKind::Ssm, LossKind::NtSsm, Similarity::Cosine);
    }

    #[test]
    fn nt_bpr_reduces_to_bpr_at_unit_alpha() {
        reduction_check(LossKind::Bpr, LossKind::NtBpr, Similarity::Inner);
        reduction_check(LossKind::Bpr, LossKind::NtBpr, Similarity::Cosine);
    }

    #[test]
    fn bidirectional_unit_alpha_equals_sum_of_directions() {
        let (g, _, s, _) = setup(9, 13, 2, 3, 4);
        let mut cfg = LossConfig::new(LossKind::NtSsm);
        cfg.neg_items = 4;
        cfg.neg_users = 4;
        let positives = vec![(0u32, g.user_adj.neighbors(0)[0]), (3, g.user_adj.neighbors(3)[0])];
        let batch = build_batch(&g, &positives, &cfg, 21, 0, 0).unwrap();
        let both = nt_ssm_loss_grad(&s, &batch, &cfg).unwrap();
        let mut item_only = cfg;
        item_only.use_user_direction = false;
        let mut user_only = cfg;
        user_only.use_item_direction = false;
        let li = nt_ssm_loss_grad(&s, &batch, &item_only).unwrap();
        let lu = nt_ssm_loss_grad(&s, &batch, &user_only).unwrap();
        assert!((both.loss - li.loss - lu.loss).abs() < 1e-12);
    }

    #[test]
    fn nt_bpr_closed_form_on_zero_embeddings() {
        let (g, op, _, _) = setup(5, 8, 2, 8, 3);
        let t = EmbeddingTable::from_mat(Mat::zeros(13, 3));
        let s = forward(&op, &t).unwrap();
        let cfg = LossConfig::new(LossKind::NtBpr);
        let batch = build_batch(&g, &[(0, g.user_adj.neighbors(0)[0])], &cfg, 5, 0, 0).unwrap();
        let out = nt_bpr_loss_grad(&s, &batch, &cfg).unwrap();
        assert!((out.loss - 2.0 * 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn untouched_rows_have_zero_gradient() {
        let (g, _, s, _) = setup(10, 12, 2, 2, 4);
        let mut cfg = LossConfig::new(LossKind::NtSsm);
        cfg.neg_items = 2;
        cfg.neg_users = 2;
        let batch = build_batch(&g, &[(0, g.user_adj.neighbors(0)[0])], &cfg, 1, 0, 0).unwrap();
        let out = nt_ssm_loss_grad(&s, &batch, &cfg).unwrap();
        let mut touched = vec![false; 22];
        touched[0] = true;
        touched[10 + g.user_adj.neighbors(0)[0] as usize] = true;
        for &j in &batch.neg_items {
            touched[10 + j as usize] = true;
        }
        for &k in &batch.neg_users {
            touched[k as usize] = true;
        }
        for r in 0..22 {
            let zero = out.grad_e.row(r).iter().all(|&v| v == 0.0)
                && out.grad_from_user.as_ref().unwrap().row(r).iter().all(|&v| v == 0.0);
            if !touched[r] {
                assert!(zero, "row {r} should be untouched");
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = LossConfig::new(LossKind::NtSsm);
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = LossConfig::new(LossKind::NtSsm);
        cfg.alpha_i_u = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = LossConfig::new(LossKind::NtBpr);
        cfg.use_item_direction = false;
        cfg.use_user_direction = false;
        assert!(cfg.validate().is_err());
        assert!(LossConfig::new(LossKind::Ssm).validate().is_ok());
    }
}
