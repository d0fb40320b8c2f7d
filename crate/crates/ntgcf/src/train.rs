//! Training loop: Adam on the initial embeddings against any configured
//! objective, early stopping on validation NDCG@20, checkpointing, and a
//! deterministic alpha-coefficient sweep.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::DatasetBundle;
use crate::eval::{evaluate_all, SplitChoice};
use crate::graph::{build_graph, EdgeSet, GraphError, SimilarityOperator};
use crate::losses::{backprop_to_initial, build_batch, loss_grad, LossConfig, LossError};
use crate::mat::Mat;
use crate::model::{
    forward, forward_combined, EmbeddingTable, ModelError, PropagatedState, Similarity,
};
use crate::rng::stream;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient at epoch {epoch}")]
    NonFiniteGradient { epoch: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: LossError,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub d: usize,
    pub layers: usize,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn new(loss: LossConfig) -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            // decoupled decay hits every coordinate every step, which on
            // sparse per-epoch signal (tens of batches) swamps the data
            // gradient long before convergence; default to none
            l2: 0.0,
            epochs: 200,
            batch_size: 2048,
            patience: 10,
            eval_every: 1,
            seed: 0,
            d: 64,
            layers: 3,
            loss,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if self.l2 < 0.0 {
            return fail("l2 must be non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.patience == 0 {
            return fail("patience must be >= 1".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1".into());
        }
        if self.d == 0 {
            return fail("d must be >= 1".into());
        }
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Mat,
    pub v: Mat,
    pub t: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState { m: Mat::zeros(rows, cols), v: Mat::zeros(rows, cols), t: 0 }
    }
}

/// One Adam update with bias correction on grad + 2 * l2 * E0.
pub fn adam_step(
    table: &mut EmbeddingTable,
    grad: &Mat,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if !grad.is_finite() {
        return Err(TrainError::NonFiniteGradient { epoch: 0 });
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let e0 = table.values_mut();
    let (m, v) = (state.m.as_mut_slice(), state.v.as_mut_slice());
    for (k, x) in e0.as_mut_slice().iter_mut().enumerate() {
        let g = grad.as_slice()[k] + 2.0 * cfg.l2 * *x;
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[k] / bc1;
        let vhat = v[k] / bc2;
        *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub recall20: Option<f64>,
    pub ndcg20: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_ndcg: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainHistory {
    /// CSV rows (epoch, loss, recall20, ndcg20, seconds); metric fields are
    /// empty on epochs without an evaluation. The seconds column is wall
    /// clock and therefore varies between reruns; every other column is a
    /// pure function of (bundle, config, seed, threads).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,recall20,ndcg20,seconds\n");
        for r in &self.records {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{},{},{:.3}\n",
                r.epoch,
                r.loss,
                fmt(r.recall20),
                fmt(r.ndcg20),
                r.seconds
            ));
        }
        out
    }
}

pub struct TrainOutcome {
    pub table: EmbeddingTable,
    pub history: TrainHistory,
}

#[cfg(not(target_arch = "wasm32"))]
fn now() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn now() -> Option<std::time::Instant> {
    None
}

fn elapsed(start: &Option<std::time::Instant>) -> f64 {
    start.map(|s| s.elapsed().as_secs_f64()).unwrap_or(0.0)
}

/// Train E0 on the bundle's training edges. Per epoch: shuffle positives,
/// then for every mini-batch propagate, differentiate, pull back to E0 and
/// take an Adam step. Validation NDCG@20 is measured every `eval_every`
/// epochs (inner-product ranking); training stops after `patience`
/// consecutive evaluations without improvement and the best table is
/// returned. With `out_dir` set, the best checkpoint and history.csv are
/// written there (history is flushed even when training diverges).
pub fn train(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let graph = std::sync::Arc::new(build_graph(bundle, EdgeSet::Train)?);
    let op = SimilarityOperator::new(graph.clone(), cfg.layers);
    let n = graph.num_nodes();
    let mut table = EmbeddingTable::init(n, cfg.d, cfg.seed);
    let mut adam = AdamState::new(n, cfg.d);
    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, EmbeddingTable)> = None;
    let mut evals_since_best = 0usize;

    let flush = |history: &TrainHistory| -> Result<(), TrainError> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| TrainError::Io { path: dir.to_path_buf(), source: e })?;
            let path = dir.join("history.csv");
            std::fs::write(&path, history.to_csv())
                .map_err(|e| TrainError::Io { path, source: e })?;
        }
        Ok(())
    };

    // Plain objectives never read the user-/item-sourced components, so
    // skip the two masked propagations in their favor of one combined pass.
    let propagate = |table: &EmbeddingTable| -> Result<PropagatedState, ModelError> {
        if cfg.loss.kind.is_neighbor_typed() {
            forward(&op, table)
        } else {
            forward_combined(&op, table)
        }
    };

    let mut order: Vec<(u32, u32)> = bundle.train.clone();
    'epochs: for epoch in 1..=cfg.epochs {
        let start = now();
        let mut rng = stream(cfg.seed, "shuffle", epoch as u64, 0);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut base_index = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch =
                build_batch(&graph, chunk, &cfg.loss, cfg.seed, epoch as u64, base_index)?;
            base_index += chunk.len() as u64;
            let state = propagate(&table)?;
            let buf = match loss_grad(&state, &batch, &cfg.loss) {
                Ok(buf) => buf,
                Err(e @ (LossError::NonFinite { .. } | LossError::NonFiniteEmbeddings)) => {
                    flush(&history)?;
                    return Err(TrainError::Diverged { epoch, source: e });
                }
                Err(e) => return Err(e.into()),
            };
            loss_sum += buf.loss * chunk.len() as f64;
            let grad0 = backprop_to_initial(&op, &buf)?;
            adam_step(&mut table, &grad0, &mut adam, cfg)
                .map_err(|_| TrainError::NonFiniteGradient { epoch })?;
        }
        let mean_loss = loss_sum / order.len().max(1) as f64;

        let mut record = EpochRecord {
            epoch,
            loss: mean_loss,
            recall20: None,
            ndcg20: None,
            seconds: 0.0,
        };
        if epoch % cfg.eval_every == 0 {
            let state = propagate(&table)?;
            state.ensure_fresh(&table)?;
            let metrics = evaluate_all(
                &state,
                bundle,
                SplitChoice::Valid,
                &[20],
                Similarity::Inner,
                false,
            );
            record.recall20 = Some(metrics.rows[0].recall);
            record.ndcg20 = Some(metrics.rows[0].ndcg);
            let ndcg = metrics.rows[0].ndcg;
            let improved = best.as_ref().map_or(true, |(_, b, _)| ndcg > *b);
            if improved {
                best = Some((epoch, ndcg, table.clone()));
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
            }
            record.seconds = elapsed(&start);
            history.records.push(record);
            if evals_since_best >= cfg.patience {
                break 'epochs;
            }
        } else {
            record.seconds = elapsed(&start);
            history.records.push(record);
        }
    }

    if let Some((epoch, ndcg, best_table)) = best {
        history.best_epoch = Some(epoch);
        history.best_ndcg = Some(ndcg);
        table = best_table;
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| TrainError::Io { path: dir.to_path_buf(), source: e })?;
        let ckpt = dir.join("checkpoint.ntgcf");
        let sidecar = serde_json::json!({
            "config": cfg,
            "best_epoch": history.best_epoch,
            "best_valid_ndcg20": history.best_ndcg,
            "num_users": bundle.num_users,
            "num_items": bundle.num_items,
        });
        table.save(&ckpt, &sidecar)?;
        history.best_checkpoint = Some(ckpt);
    }
    flush(&history)?;
    Ok(TrainOutcome { table, history })
}

/// One sweep trial's coefficients and score.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SweepRecord {
    pub trial: usize,
    /// (alpha_u_u, alpha_u_i, alpha_i_u, alpha_i_i)
    pub alphas: [f64; 4],
    pub valid_ndcg20: f64,
}

/// Deterministic alpha search: the coarse grid {0.8, 1.0, 1.2}^4 (all-1.0
/// point first, then lexicographic), followed by seeded uniform refinement
/// in [0.5, 1.5]^4, truncated to `budget` trials; returns records sorted by
/// validation NDCG@20 descending, ties by lexicographic alphas.
pub fn sweep_alpha(
    bundle: &DatasetBundle,
    base: &TrainConfig,
    budget: usize,
) -> Result<Vec<SweepRecord>, TrainError> {
    if budget < 1 {
        return Err(TrainError::InvalidConfig("sweep budget must be >= 1".into()));
    }
    let vals = [0.8, 1.0, 1.2];
    let mut grid: Vec<[f64; 4]> = vec![[1.0; 4]];
    for a in vals {
        for b in vals {
            for c in vals {
                for e in vals {
                    let point = [a, b, c, e];
                    if point != [1.0; 4] {
                        grid.push(point);
                    }
                }
            }
        }
    }
    let mut records = Vec::new();
    for trial in 0..budget {
        let alphas = if trial < grid.len() {
            grid[trial]
        } else {
            let mut rng = stream(base.seed, "sweep", trial as u64, 0);
            let mut a = [0.0; 4];
            for x in &mut a {
                *x = rng.gen_range(0.5..=1.5);
            }
            a
        };
        let mut cfg = *base;
        cfg.loss.alpha_u_u = alphas[0];
        cfg.loss.alpha_u_i = alphas[1];
        cfg.loss.alpha_i_u = alphas[2];
        cfg.loss.alpha_i_i = alphas[3];
        let outcome = train(bundle, &cfg, None)?;
        records.push(SweepRecord {
            trial,
            alphas,
            valid_ndcg20: outcome.history.best_ndcg.unwrap_or(0.0),
        });
    }
    records.sort_by(|x, y| {
        y.valid_ndcg20
            .partial_cmp(&x.valid_ndcg20)
            .unwrap()
            .then_with(|| x.alphas.partial_cmp(&y.alphas).unwrap())
    });
    Ok(records)
}
