//! Learnable embedding table, propagated (and type-decomposed) embeddings,
//! scoring, and top-K ranking.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::graph::{GraphError, SimilarityOperator};
use crate::mat::{dot, norm, Mat};
use crate::rng::stream;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("propagated state is stale: embeddings changed since forward")]
    Stale,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },
}

/// The learnable initial embeddings. Users occupy rows 0..num_users, items
/// the rows after. Every mutable access bumps a version counter used to
/// detect stale propagated states.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    data: Mat,
    version: u64,
}

impl EmbeddingTable {
    /// Xavier-uniform init on [-b, b] with b = sqrt(6 / (num_rows + d)),
    /// from a seed-derived stream.
    pub fn init(num_rows: usize, d: usize, seed: u64) -> Self {
        assert!(d >= 1);
        let bound = (6.0 / (num_rows as f64 + d as f64)).sqrt();
        let mut rng = stream(seed, "init", num_rows as u64, d as u64);
        let mut data = Mat::zeros(num_rows, d);
        for v in data.as_mut_slice() {
            *v = rng.gen_range(-bound..=bound);
        }
        EmbeddingTable { data, version: 0 }
    }

    pub fn from_mat(data: Mat) -> Self {
        EmbeddingTable { data, version: 0 }
    }

    pub fn num_rows(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn values(&self) -> &Mat {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut Mat {
        self.version += 1;
        &mut self.data
    }

    /// Binary checkpoint: ASCII header "NTGCF1 num_rows d\n" followed by
    /// row-major 32-bit little-endian floats, plus a `<path>.json` sidecar.
    pub fn save(&self, path: &Path, sidecar: &serde_json::Value) -> Result<(), ModelError> {
        let io = |source| ModelError::Io { path: path.to_path_buf(), source };
        let file = fs::File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        write!(w, "NTGCF1 {} {}\n", self.num_rows(), self.dim()).map_err(io)?;
        for &v in self.data.as_slice() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)?;
        let side_path = sidecar_path(path);
        let body = format!("{:#}\n", sidecar);
        fs::write(&side_path, body)
            .map_err(|source| ModelError::Io { path: side_path.clone(), source })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<serde_json::Value>), ModelError> {
        let io = |source| ModelError::Io { path: path.to_path_buf(), source };
        let bad = |reason: &str| ModelError::BadCheckpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut file = fs::File::open(path).map_err(io)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line"))?;
        let header =
            std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("non-ascii header"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("NTGCF1") {
            return Err(bad("bad magic, expected NTGCF1"));
        }
        let rows: usize = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad row count"))?;
        let d: usize = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad dimension"))?;
        let payload = &bytes[nl + 1..];
        if payload.len() != rows * d * 4 {
            return Err(bad(&format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                rows * d * 4
            )));
        }
        let mut data = Mat::zeros(rows, d);
        for (slot, chunk) in data.as_mut_slice().iter_mut().zip(payload.chunks_exact(4)) {
            *slot = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        let side_path = sidecar_path(path);
        let sidecar = match fs::read(&side_path) {
            Ok(bytes) => Some(serde_json::from_slice(&bytes).map_err(|e| {
                ModelError::BadCheckpoint {
                    path: side_path,
                    reason: format!("sidecar parse error: {e}"),
                }
            })?),
            Err(_) => None,
        };
        Ok((EmbeddingTable::from_mat(data), sidecar))
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Inner,
    Cosine,
}

/// Propagated embeddings E = S E0 with the user-/item-sourced components.
/// Read-only after `forward`; `ensure_fresh` guards against scoring with an
/// embedding table that has changed since propagation.
#[derive(Debug, Clone)]
pub struct PropagatedState {
    pub e: Mat,
    pub from_user: Mat,
    pub from_item: Mat,
    pub norms: Vec<f64>,
    num_users: u32,
    source_version: u64,
}

/// Propagate the table through the operator. The user-sourced and
/// item-sourced components are each one masked propagation; their sum *is*
/// the final embedding matrix (the decomposition is exact by construction).
pub fn forward(
    op: &SimilarityOperator,
    table: &EmbeddingTable,
) -> Result<PropagatedState, ModelError> {
    let g = op.graph();
    let n = g.num_nodes();
    if table.num_rows() != n {
        return Err(GraphError::DimensionMismatch { got: table.num_rows(), want: n }.into());
    }
    let num_users = g.num_users as usize;
    let mut masked = table.values().clone();
    masked.zero_rows(num_users, n);
    let from_user = op.apply(&masked)?;
    let mut masked = table.values().clone();
    masked.zero_rows(0, num_users);
    let from_item = op.apply(&masked)?;
    let mut e = from_user.clone();
    e.axpy(1.0, &from_item);
    let norms = (0..n).map(|r| norm(e.row(r))).collect();
    Ok(PropagatedState {
        e,
        from_user,
        from_item,
        norms,
        num_users: g.num_users,
        source_version: table.version(),
    })
}

/// Propagate the table without the user-/item-sourced decomposition: one
/// propagation instead of two masked ones. The resulting state supports
/// plain scoring and ranking but not `score_decomposed` or the
/// neighbor-typed losses; `has_decomposition` distinguishes the two. Up to
/// summation order the combined embeddings match `forward`'s.
pub fn forward_combined(
    op: &SimilarityOperator,
    table: &EmbeddingTable,
) -> Result<PropagatedState, ModelError> {
    let g = op.graph();
    let n = g.num_nodes();
    if table.num_rows() != n {
        return Err(GraphError::DimensionMismatch { got: table.num_rows(), want: n }.into());
    }
    let e = op.apply(table.values())?;
    let norms = (0..n).map(|r| norm(e.row(r))).collect();
    Ok(PropagatedState {
        e,
        from_user: Mat::zeros(0, 0),
        from_item: Mat::zeros(0, 0),
        norms,
        num_users: g.num_users,
        source_version: table.version(),
    })
}

impl PropagatedState {
    pub fn num_users(&self) -> u32 {
        self.num_users
    }

    /// Whether the user-/item-sourced components were computed.
    pub fn has_decomposition(&self) -> bool {
        self.from_user.rows() == self.e.rows()
    }

    pub fn num_items(&self) -> u32 {
        (self.e.rows() - self.num_users as usize) as u32
    }

    pub fn is_fresh(&self, table: &EmbeddingTable) -> bool {
        table.version() == self.source_version
    }

    pub fn ensure_fresh(&self, table: &EmbeddingTable) -> Result<(), ModelError> {
        if self.is_fresh(table) {
            Ok(())
        } else {
            Err(ModelError::Stale)
        }
    }

    fn item_row(&self, item: u32) -> usize {
        self.num_users as usize + item as usize
    }

    /// Similarity between user u and item i (item-local id). Cosine maps
    /// zero-norm operands to 0 so untrained rows never produce NaN.
    pub fn score(&self, u: u32, item: u32, kind: Similarity) -> f64 {
        let (a, b) = (u as usize, self.item_row(item));
        let raw = dot(self.e.row(a), self.e.row(b));
        match kind {
            Similarity::Inner => raw,
            Similarity::Cosine => {
                let d = self.norms[a] * self.norms[b];
                if d == 0.0 {
                    0.0
                } else {
                    raw / d
                }
            }
        }
    }

    /// Inner score split by neighbor-pair type: (UU, II, UI, IU), where the
    /// first letter is the type of the user-side source and the second the
    /// item-side source. The four parts sum to `score(u, i, Inner)`.
    pub fn score_decomposed(&self, u: u32, item: u32) -> (f64, f64, f64, f64) {
        assert!(
            self.has_decomposition(),
            "state was built with forward_combined; use forward for typed scores"
        );
        let (a, b) = (u as usize, self.item_row(item));
        let uu = dot(self.from_user.row(a), self.from_user.row(b));
        let ii = dot(self.from_item.row(a), self.from_item.row(b));
        let ui = dot(self.from_user.row(a), self.from_item.row(b));
        let iu = dot(self.from_item.row(a), self.from_user.row(b));
        (uu, ii, ui, iu)
    }

    /// Top-K items for user u, excluding `exclude` (sorted item-local ids).
    /// Ties break toward the lower item id; fewer than K candidates returns
    /// all of them.
    pub fn rank_topk(&self, u: u32, k: usize, exclude: &[u32], kind: Similarity) -> Vec<u32> {
        assert!(k >= 1);
        debug_assert!(exclude.windows(2).all(|w| w[0] < w[1]));
        let mut scored: Vec<(f64, u32)> = (0..self.num_items())
            .filter(|i| exclude.binary_search(i).is_err())
            .map(|i| (self.score(u, i, kind), i))
            .collect();
        let cmp = |a: &(f64, u32), b: &(f64, u32)| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
        };
        let k = k.min(scored.len());
        if k > 0 && k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        scored.into_iter().map(|(_, i)| i).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{random_edges, InteractionGraph, NeighborhoodIndex};
    use std::sync::Arc;

    fn g0_op(layers: usize) -> SimilarityOperator {
        let g = Arc::new(InteractionGraph::from_edges(1, 2, &[(0, 0), (0, 1)]).unwrap());
        SimilarityOperator::new(g, layers)
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = EmbeddingTable::init(2, 1, 5);
        let b = EmbeddingTable::init(2, 1, 5);
        assert_eq!(a.values(), b.values());
        let bound = (6.0 / 3.0_f64).sqrt();
        assert!(a.values().as_slice().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_sample_mean_is_small() {
        let t = EmbeddingTable::init(1000, 100, 7);
        let n = 1e5;
        let bound = (6.0 / 1100.0_f64).sqrt();
        let mean: f64 = t.values().as_slice().iter().sum::<f64>() / n;
        // std of the mean of n uniforms on [-b, b] is b / sqrt(3 n)
        assert!(mean.abs() < 3.0 * bound / (3.0 * n).sqrt());
    }

    #[test]
    fn forward_on_zero_table_is_zero() {
        let op = g0_op(2);
        let t = EmbeddingTable::from_mat(Mat::zeros(3, 4));
        let s = forward(&op, &t).unwrap();
        assert!(s.e.as_slice().iter().all(|&v| v == 0.0));
        assert!(s.norms.iter().all(|&v| v == 0.0));
        assert_eq!(s.score(0, 0, Similarity::Cosine), 0.0);
    }

    #[test]
    fn forward_hand_value_on_g0() {
        let op = g0_op(1);
        let mut m = Mat::zeros(3, 2);
        m.set(0, 0, 1.0); // e_u0 = (1, 0)
        m.set(1, 1, 1.0); // e_i0 = (0, 1)
        let t = EmbeddingTable::from_mat(m);
        let s = forward(&op, &t).unwrap();
        let c = 0.5 / 2.0_f64.sqrt();
        assert!((s.e.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.e.get(0, 1) - c).abs() < 1e-15);
    }

    #[test]
    fn decomposition_is_exact_and_sums_to_score() {
        let edges = random_edges(10, 15, 4, 21);
        let g = Arc::new(InteractionGraph::from_edges(10, 15, &edges).unwrap());
        let op = SimilarityOperator::new(g, 3);
        let t = EmbeddingTable::init(25, 8, 3);
        let s = forward(&op, &t).unwrap();
        let mut sum_check = s.from_user.clone();
        sum_check.axpy(1.0, &s.from_item);
        assert_eq!(sum_check, s.e, "masked components must sum exactly to E");
        for (u, i) in [(0u32, 0u32), (3, 7), (9, 14)] {
            let (uu, ii, ui, iu) = s.score_decomposed(u, i);
            let total = s.score(u, i, Similarity::Inner);
            assert!((uu + ii + ui + iu - total).abs() <= 1e-6 * total.abs().max(1.0));
        }
    }

    #[test]
    fn combined_forward_matches_masked_sum() {
        let edges = random_edges(12, 18, 4, 33);
        let g = Arc::new(InteractionGraph::from_edges(12, 18, &edges).unwrap());
        let op = SimilarityOperator::new(g, 3);
        let t = EmbeddingTable::init(30, 8, 5);
        let full = forward(&op, &t).unwrap();
        let combined = forward_combined(&op, &t).unwrap();
        assert!(full.has_decomposition());
        assert!(!combined.has_decomposition());
        for (a, b) in combined.e.as_slice().iter().zip(full.e.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        for (a, b) in combined.norms.iter().zip(&full.norms) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    #[should_panic(expected = "use forward for typed scores")]
    fn combined_forward_rejects_typed_scores() {
        let op = g0_op(2);
        let t = EmbeddingTable::init(3, 4, 1);
        let s = forward_combined(&op, &t).unwrap();
        let _ = s.score_decomposed(0, 0);
    }

    #[test]
    fn score_matches_neighbor_pair_double_sum() {
        // Eq-style oracle: sum over v in N_u, v' in N_i of
        // S_uv * S_iv' * (e_v . e_v')
        let edges = random_edges(6, 9, 3, 11);
        let g = Arc::new(InteractionGraph::from_edges(6, 9, &edges).unwrap());
        let op = SimilarityOperator::new(g.clone(), 2);
        let t = EmbeddingTable::init(15, 5, 9);
        let s = forward(&op, &t).unwrap();
        let nodes: Vec<u32> = (0..15).collect();
        let idx: NeighborhoodIndex = op.materialize_rows(&nodes, usize::MAX).unwrap();
        for (u, i) in [(0u32, 0u32), (2, 5), (5, 8)] {
            let ru = idx.row(u).unwrap();
            let ri = idx.row(g.item_node(i)).unwrap();
            let mut want = 0.0;
            for (v, wv) in ru.entries() {
                for (vp, wvp) in ri.entries() {
                    want += wv
                        * wvp
                        * crate::mat::dot(
                            t.values().row(v as usize),
                            t.values().row(vp as usize),
                        );
                }
            }
            let got = s.score(u, i, Similarity::Inner);
            assert!((got - want).abs() < 1e-8, "({u},{i}): {got} vs {want}");
        }
    }

    #[test]
    fn zeroed_user_rows_kill_user_sourced_parts() {
        let edges = random_edges(5, 7, 3, 2);
        let g = Arc::new(InteractionGraph::from_edges(5, 7, &edges).unwrap());
        let op = SimilarityOperator::new(g, 2);
        let mut m = EmbeddingTable::init(12, 4, 1).values().clone();
        m.zero_rows(0, 5);
        let t = EmbeddingTable::from_mat(m);
        let s = forward(&op, &t).unwrap();
        for (u, i) in [(0u32, 0u32), (4, 6)] {
            let (uu, _, ui, _) = s.score_decomposed(u, i);
            assert_eq!(uu, 0.0);
            assert_eq!(ui, 0.0);
        }
    }

    #[test]
    fn cosine_of_identical_and_orthogonal_vectors() {
        let op = g0_op(0); // identity operator: E = E0
        let mut m = Mat::zeros(3, 2);
        m.set(0, 0, 2.0);
        m.set(1, 0, 1.0); // i0 parallel to u0
        m.set(2, 1, 3.0); // i1 orthogonal
        let t = EmbeddingTable::from_mat(m);
        let s = forward(&op, &t).unwrap();
        assert!((s.score(0, 0, Similarity::Cosine) - 1.0).abs() < 1e-15);
        assert_eq!(s.score(0, 1, Similarity::Cosine), 0.0);
        assert_eq!(s.score(0, 1, Similarity::Inner), 0.0);
    }

    #[test]
    fn staleness_detected_after_mutation() {
        let op = g0_op(1);
        let mut t = EmbeddingTable::init(3, 2, 0);
        let s = forward(&op, &t).unwrap();
        assert!(s.ensure_fresh(&t).is_ok());
        t.values_mut().set(0, 0, 9.0);
        assert!(matches!(s.ensure_fresh(&t), Err(ModelError::Stale)));
    }

    #[test]
    fn topk_orders_scores_and_breaks_ties_by_id() {
        let op = g0_op(0);
        // u0 = (1), i0 = (0.1), i1 = (0.9) -> but we need 3 items; rebuild
        let g = Arc::new(
            InteractionGraph::from_edges(1, 3, &[(0, 0), (0, 1), (0, 2)]).unwrap(),
        );
        let op3 = SimilarityOperator::new(g, 0);
        let m = Mat::from_vec(4, 1, vec![1.0, 0.1, 0.9, 0.5]);
        let t = EmbeddingTable::from_mat(m);
        let s = forward(&op3, &t).unwrap();
        assert_eq!(s.rank_topk(0, 2, &[], Similarity::Inner), vec![1, 2]);
        assert_eq!(s.rank_topk(0, 10, &[], Similarity::Inner), vec![1, 2, 0]);
        assert_eq!(s.rank_topk(0, 2, &[1], Similarity::Inner), vec![2, 0]);
        assert_eq!(s.rank_topk(0, 2, &[0, 1, 2], Similarity::Inner), Vec::<u32>::new());
        let zero = EmbeddingTable::from_mat(Mat::zeros(4, 1));
        let sz = forward(&op3, &zero).unwrap();
        assert_eq!(sz.rank_topk(0, 3, &[], Similarity::Inner), vec![0, 1, 2]);
        let _ = op;
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let t = EmbeddingTable::init(7, 3, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ntgcf");
        let meta = serde_json::json!({"d": 3, "seed": 4});
        t.save(&path, &meta).unwrap();
        let (loaded, sidecar) = EmbeddingTable::load(&path).unwrap();
        assert_eq!(sidecar.unwrap()["seed"], 4);
        assert_eq!(loaded.num_rows(), 7);
        assert_eq!(loaded.dim(), 3);
        for (a, b) in t.values().as_slice().iter().zip(loaded.values().as_slice()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*b, (*a as f32) as f64);
        }
        // header sanity
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"NTGCF1 7 3\n"));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ntgcf");
        fs::write(&path, b"NTGCF1 2 2\n\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            EmbeddingTable::load(&path),
            Err(ModelError::BadCheckpoint { .. })
        ));
    }

    #[test]
    fn forward_linearity() {
        let edges = random_edges(8, 11, 4, 6);
        let g = Arc::new(InteractionGraph::from_edges(8, 11, &edges).unwrap());
        let op = SimilarityOperator::new(g, 3);
        let x = EmbeddingTable::init(19, 6, 1);
        let y = EmbeddingTable::init(19, 6, 2);
        let mut combo = x.values().clone();
        combo.scale(2.0);
        combo.axpy(-0.5, y.values());
        let sc = forward(&op, &EmbeddingTable::from_mat(combo)).unwrap();
        let sx = forward(&op, &x).unwrap();
        let sy = forward(&op, &y).unwrap();
        for (k, &v) in sc.e.as_slice().iter().enumerate() {
            let want = 2.0 * sx.e.as_slice()[k] - 0.5 * sy.e.as_slice()[k];
            assert!((v - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }
}
