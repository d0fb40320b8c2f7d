//! `ntgcf` binary: dataset splitting, training, evaluation, alpha sweeps,
//! gradient checks, and the neighborhood analysis studies, all driven by a
//! JSON config plus flag overrides.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime error. Every
//! subcommand is a pure function of (inputs, config, seed, thread count) to
//! its output files, except for the wall-clock seconds column in
//! history.csv.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ntgcf::analysis::{
    retention_csv, retention_study, AnalysisError, RetentionStudyConfig, ScoreType,
};
use ntgcf::data::{load_bundle, load_interactions, save_bundle, split_dataset, DataError};
use ntgcf::eval::{evaluate_all, SplitChoice};
use ntgcf::graph::{
    build_graph, count_neighbor_pairs, EdgeSet, GraphError, SimilarityOperator,
};
use ntgcf::losses::{LossConfig, LossError, LossKind};
use ntgcf::model::{forward, EmbeddingTable, ModelError, Similarity};
use ntgcf::train::{sweep_alpha, train, TrainConfig, TrainError};
use ntgcf::verify::{finite_diff_check, FdInstance, VerifyError};

#[derive(Parser)]
#[command(
    name = "ntgcf",
    version,
    about = "Neighbor-typed graph collaborative filtering toolkit",
    disable_help_subcommand = true
)]
struct Cli {
    /// Worker threads (fallback: NTGCF_THREADS env var, then all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split a raw interaction file into a train/valid/test bundle
    Split(SplitArgs),
    /// Train embeddings and write checkpoint + history.csv
    Train(TrainArgs),
    /// Rank held-out interactions with a checkpoint and report Recall/NDCG
    Eval(EvalArgs),
    /// Search the four neighbor-type coefficients by validation NDCG@20
    Sweep(SweepArgs),
    /// Compare analytic loss gradients against finite differences
    GradCheck(GradCheckArgs),
    /// Count multi-hop neighbor pairs per training interaction
    AnalyzePairs(AnalyzePairsArgs),
    /// Evaluate the training-free heuristic over a retention-ratio grid
    RetentionStudy(RetentionStudyArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// Raw interactions, one "user<TAB>item" pair per line
    #[arg(long)]
    input: PathBuf,
    /// Train/valid/test fractions, e.g. --ratios 0.7 0.1 0.2
    #[arg(long, num_args = 3, default_values_t = [0.7, 0.1, 0.2])]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output bundle directory
    #[arg(long)]
    out: PathBuf,
}

/// Flat key set mirroring the training and loss config fields; JSON config
/// files use exactly these names, and flags override file values.
#[derive(Debug, Default, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    patience: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<LossKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    similarity: Option<Similarity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_u_u: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_u_i: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_i_u: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_i_i: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    neg_items: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    neg_users: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    use_item_direction: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    use_user_direction: Option<bool>,
}

#[derive(Args, Default)]
struct TrainOverrides {
    /// JSON config file with flat keys (lr, epochs, kind, tau, ...)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Objective: bpr, nt-bpr, ssm, or nt-ssm
    #[arg(long, value_parser = parse_loss_kind)]
    loss: Option<LossKind>,
    /// Score function: inner or cosine
    #[arg(long, value_parser = parse_similarity)]
    similarity: Option<Similarity>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding dimension
    #[arg(long)]
    d: Option<usize>,
    /// Propagation depth L
    #[arg(long)]
    layers: Option<usize>,
    /// Softmax temperature
    #[arg(long)]
    tau: Option<f64>,
    /// User-direction coefficient on user-type neighbors
    #[arg(long)]
    alpha_u_u: Option<f64>,
    /// User-direction coefficient on item-type neighbors
    #[arg(long)]
    alpha_u_i: Option<f64>,
    /// Item-direction coefficient on user-type neighbors
    #[arg(long)]
    alpha_i_u: Option<f64>,
    /// Item-direction coefficient on item-type neighbors
    #[arg(long)]
    alpha_i_i: Option<f64>,
    #[arg(long)]
    neg_items: Option<usize>,
    #[arg(long)]
    neg_users: Option<usize>,
    /// Enable/disable the item-direction loss term (neighbor-typed kinds)
    #[arg(long)]
    use_item_direction: Option<bool>,
    /// Enable/disable the user-direction loss term (neighbor-typed kinds)
    #[arg(long)]
    use_user_direction: Option<bool>,
}

#[derive(Args)]
struct TrainArgs {
    /// Bundle directory produced by `split`
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which held-out split to rank: valid or test
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: SplitChoice,
    /// Cutoffs N for Recall@N / NDCG@N
    #[arg(long, num_args = 1.., default_values_t = [10usize, 20])]
    ns: Vec<usize>,
    #[arg(long, value_parser = parse_similarity)]
    similarity: Option<Similarity>,
    /// Propagation depth; defaults to the checkpoint sidecar's value
    #[arg(long)]
    layers: Option<usize>,
    /// Also write a per-user metric breakdown
    #[arg(long)]
    per_user: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Total trials: coarse grid first, then seeded random refinement
    #[arg(long, default_value_t = 100)]
    budget: usize,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, value_parser = parse_loss_kind)]
    loss: LossKind,
    #[arg(long, default_value = "inner", value_parser = parse_similarity)]
    similarity: Similarity,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    /// Maximum accepted relative error
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Sampled embedding coordinates per check
    #[arg(long, default_value_t = 20)]
    coords: usize,
    /// Optional directory for report.json (always printed to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzePairsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Hop counts L to evaluate
    #[arg(long, num_args = 1.., default_values_t = [1usize, 2, 3])]
    hops: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetentionStudyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// User-side retention ratios in percent
    #[arg(long, num_args = 1.., default_values_t = [0.1, 1.0, 10.0, 100.0])]
    q_grid: Vec<f64>,
    /// Item-side retention ratios in percent
    #[arg(long, num_args = 1.., default_values_t = [0.1, 1.0, 10.0, 100.0])]
    q_item_grid: Vec<f64>,
    /// Score variants: full, uu, ii, ui, iu
    #[arg(long, num_args = 1.., default_values = ["full"], value_parser = parse_score_type)]
    types: Vec<ScoreType>,
    /// NDCG cutoff
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Working-set cap in bytes
    #[arg(long, default_value_t = 4_500_000_000)]
    memory_budget: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_loss_kind(s: &str) -> Result<LossKind, String> {
    match s {
        "bpr" => Ok(LossKind::Bpr),
        "nt-bpr" => Ok(LossKind::NtBpr),
        "ssm" => Ok(LossKind::Ssm),
        "nt-ssm" => Ok(LossKind::NtSsm),
        _ => Err(format!("unknown loss '{s}' (expected bpr, nt-bpr, ssm, nt-ssm)")),
    }
}

fn parse_similarity(s: &str) -> Result<Similarity, String> {
    match s {
        "inner" => Ok(Similarity::Inner),
        "cosine" => Ok(Similarity::Cosine),
        _ => Err(format!("unknown similarity '{s}' (expected inner or cosine)")),
    }
}

fn parse_split(s: &str) -> Result<SplitChoice, String> {
    match s {
        "valid" => Ok(SplitChoice::Valid),
        "test" => Ok(SplitChoice::Test),
        _ => Err(format!("unknown split '{s}' (expected valid or test)")),
    }
}

fn parse_score_type(s: &str) -> Result<ScoreType, String> {
    match s {
        "full" => Ok(ScoreType::Full),
        "uu" => Ok(ScoreType::UU),
        "ii" => Ok(ScoreType::II),
        "ui" => Ok(ScoreType::UI),
        "iu" => Ok(ScoreType::IU),
        _ => Err(format!("unknown score type '{s}' (expected full, uu, ii, ui, iu)")),
    }
}

#[derive(Debug, thiserror::Error)]
enum AppError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl AppError {
    fn exit_code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 1,
            AppError::Runtime(_) => 2,
        }
    }
}

fn validation(msg: impl Into<String>) -> AppError {
    AppError::Validation(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> AppError {
    AppError::Runtime(msg.to_string())
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => runtime(e),
            _ => validation(e.to_string()),
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => validation(e.to_string()),
            TrainError::Loss(LossError::InvalidConfig(_)) => validation(e.to_string()),
            _ => runtime(e),
        }
    }
}

impl From<LossError> for AppError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::InvalidConfig(_) => validation(e.to_string()),
            _ => runtime(e),
        }
    }
}

impl From<GraphError> for AppError {
    fn from(e: GraphError) -> Self {
        runtime(e)
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadCheckpoint { .. } => validation(e.to_string()),
            _ => runtime(e),
        }
    }
}

impl From<AnalysisError> for AppError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::BadRatio(_) | AnalysisError::InvalidInput(_) => {
                validation(e.to_string())
            }
            _ => runtime(e),
        }
    }
}

impl From<VerifyError> for AppError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::InvalidStep => validation(e.to_string()),
            _ => runtime(e),
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::process::exit(run(std::env::args_os()));
}

fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    init_threads(cli.threads);
    match execute(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_threads(flag: Option<usize>) {
    let threads = flag.or_else(|| {
        std::env::var("NTGCF_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        // A second in-process call (tests) leaves the first pool in place.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
}

fn execute(cmd: Cmd) -> Result<(), AppError> {
    match cmd {
        Cmd::Split(a) => cmd_split(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
        Cmd::AnalyzePairs(a) => cmd_analyze_pairs(a),
        Cmd::RetentionStudy(a) => cmd_retention_study(a),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), AppError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_split(a: SplitArgs) -> Result<(), AppError> {
    let raw = load_interactions(&a.input)?;
    let ratios = [a.ratios[0], a.ratios[1], a.ratios[2]];
    let bundle = split_dataset(&raw, ratios, a.seed)?;
    save_bundle(&bundle, &a.out)?;
    println!(
        "split: {} users, {} items, {}/{}/{} train/valid/test -> {}",
        bundle.num_users,
        bundle.num_items,
        bundle.train.len(),
        bundle.valid.len(),
        bundle.test.len(),
        a.out.display()
    );
    Ok(())
}

/// defaults <- config file <- CLI flags, in increasing precedence.
fn merge_train_config(o: &TrainOverrides) -> Result<TrainConfig, AppError> {
    let file: FlatConfig = match &o.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| validation(format!("bad config {}: {e}", path.display())))?
        }
        None => FlatConfig::default(),
    };
    let kind = o.loss.or(file.kind).unwrap_or(LossKind::Bpr);
    let mut cfg = TrainConfig::new(LossConfig::new(kind));

    macro_rules! take {
        ($dst:expr, $($f:ident),+) => { $( if let Some(v) = file.$f { $dst.$f = v; } )+ };
    }
    take!(cfg, lr, beta1, beta2, eps, l2, epochs, batch_size, patience, eval_every, seed, d, layers);
    take!(cfg.loss, similarity, tau, alpha_u_u, alpha_u_i, alpha_i_u, alpha_i_i, neg_items, neg_users, use_item_direction, use_user_direction);

    macro_rules! flag {
        ($dst:expr, $($f:ident),+) => { $( if let Some(v) = o.$f { $dst.$f = v; } )+ };
    }
    flag!(cfg, lr, l2, epochs, batch_size, patience, eval_every, seed, d, layers);
    flag!(cfg.loss, similarity, tau, alpha_u_u, alpha_u_i, alpha_i_u, alpha_i_i, neg_items, neg_users, use_item_direction, use_user_direction);

    cfg.validate()?;
    Ok(cfg)
}

/// Fully resolved flat view of the effective config, written next to the
/// outputs for provenance.
fn to_flat(cfg: &TrainConfig) -> FlatConfig {
    FlatConfig {
        lr: Some(cfg.lr),
        beta1: Some(cfg.beta1),
        beta2: Some(cfg.beta2),
        eps: Some(cfg.eps),
        l2: Some(cfg.l2),
        epochs: Some(cfg.epochs),
        batch_size: Some(cfg.batch_size),
        patience: Some(cfg.patience),
        eval_every: Some(cfg.eval_every),
        seed: Some(cfg.seed),
        d: Some(cfg.d),
        layers: Some(cfg.layers),
        kind: Some(cfg.loss.kind),
        similarity: Some(cfg.loss.similarity),
        tau: Some(cfg.loss.tau),
        alpha_u_u: Some(cfg.loss.alpha_u_u),
        alpha_u_i: Some(cfg.loss.alpha_u_i),
        alpha_i_u: Some(cfg.loss.alpha_i_u),
        alpha_i_i: Some(cfg.loss.alpha_i_i),
        neg_items: Some(cfg.loss.neg_items),
        neg_users: Some(cfg.loss.neg_users),
        use_item_direction: Some(cfg.loss.use_item_direction),
        use_user_direction: Some(cfg.loss.use_user_direction),
    }
}

fn write_effective_config(cfg: &TrainConfig, out: &Path) -> Result<(), AppError> {
    let json = serde_json::to_string_pretty(&to_flat(cfg)).expect("config serializes");
    write_file(&out.join("config.json"), &(json + "\n"))
}

fn cmd_train(a: TrainArgs) -> Result<(), AppError> {
    let bundle = load_bundle(&a.data)?;
    let cfg = merge_train_config(&a.overrides)?;
    std::fs::create_dir_all(&a.out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", a.out.display())))?;
    write_effective_config(&cfg, &a.out)?;
    let outcome = train(&bundle, &cfg, Some(&a.out))?;
    match (outcome.history.best_epoch, outcome.history.best_ndcg) {
        (Some(e), Some(n)) => println!(
            "train: {} epochs run, best valid ndcg@20 {:.4} at epoch {e} -> {}",
            outcome.history.records.len(),
            n,
            a.out.display()
        ),
        _ => println!(
            "train: {} epochs run, no evaluation recorded -> {}",
            outcome.history.records.len(),
            a.out.display()
        ),
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), AppError> {
    let bundle = load_bundle(&a.data)?;
    let (table, sidecar) = EmbeddingTable::load(&a.checkpoint)?;
    let n = (bundle.num_users + bundle.num_items) as usize;
    if table.num_rows() != n {
        return Err(validation(format!(
            "checkpoint has {} rows but the bundle needs {n}",
            table.num_rows()
        )));
    }
    let sidecar_layers = sidecar
        .as_ref()
        .and_then(|s| s["config"]["layers"].as_u64())
        .map(|v| v as usize);
    let layers = a.layers.or(sidecar_layers).unwrap_or(3);
    let sim = a.similarity.unwrap_or(Similarity::Inner);

    let graph = std::sync::Arc::new(build_graph(&bundle, EdgeSet::Train)?);
    let op = SimilarityOperator::new(graph, layers);
    let state = forward(&op, &table)?;
    let metrics = evaluate_all(&state, &bundle, a.split, &a.ns, sim, a.per_user);

    let mut csv = String::from("N,recall,ndcg,users_evaluated\n");
    for row in &metrics.rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            row.n, row.recall, row.ndcg, metrics.users_evaluated
        ));
    }
    write_file(&a.out.join("metrics.csv"), &csv)?;
    if let Some(per_user) = &metrics.per_user {
        let mut csv = String::from("user,N,recall,ndcg\n");
        for pu in per_user {
            for row in &pu.rows {
                csv.push_str(&format!(
                    "{},{},{:.6},{:.6}\n",
                    pu.user, row.n, row.recall, row.ndcg
                ));
            }
        }
        write_file(&a.out.join("per_user.csv"), &csv)?;
    }
    let head = &metrics.rows[0];
    println!(
        "eval: {} users, recall@{} {:.4}, ndcg@{} {:.4} -> {}",
        metrics.users_evaluated,
        head.n,
        head.recall,
        head.n,
        head.ndcg,
        a.out.display()
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<(), AppError> {
    let bundle = load_bundle(&a.data)?;
    let cfg = merge_train_config(&a.overrides)?;
    if !cfg.loss.kind.is_neighbor_typed() {
        return Err(validation(
            "sweep requires a neighbor-typed loss (nt-ssm or nt-bpr)".to_string(),
        ));
    }
    std::fs::create_dir_all(&a.out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", a.out.display())))?;
    write_effective_config(&cfg, &a.out)?;
    let records = sweep_alpha(&bundle, &cfg, a.budget)?;
    let mut csv =
        String::from("trial,alpha_u_u,alpha_u_i,alpha_i_u,alpha_i_i,valid_ndcg20\n");
    for r in &records {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.trial, r.alphas[0], r.alphas[1], r.alphas[2], r.alphas[3], r.valid_ndcg20
        ));
    }
    write_file(&a.out.join("sweep.csv"), &csv)?;
    let best = &records[0];
    println!(
        "sweep: {} trials, best alphas ({:.2}, {:.2}, {:.2}, {:.2}) ndcg@20 {:.4} -> {}",
        records.len(),
        best.alphas[0],
        best.alphas[1],
        best.alphas[2],
        best.alphas[3],
        best.valid_ndcg20,
        a.out.display()
    );
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<(), AppError> {
    let inst = FdInstance::desk(a.seed);
    let report =
        finite_diff_check(a.loss, a.similarity, &inst, a.coords, a.h, a.tolerance)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(out) = &a.out {
        write_file(&out.join("report.json"), &(json + "\n"))?;
    }
    if report.pass {
        Ok(())
    } else {
        Err(validation(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err, report.tolerance
        )))
    }
}

fn cmd_analyze_pairs(a: AnalyzePairsArgs) -> Result<(), AppError> {
    let bundle = load_bundle(&a.data)?;
    let graph = build_graph(&bundle, EdgeSet::Train)?;
    let counts = count_neighbor_pairs(&graph, &bundle.train, &a.hops)?;
    let mut csv = String::from("hop,mean_pairs,coverage\n");
    for c in &counts {
        csv.push_str(&format!("{},{:.6},{:.6}\n", c.hop, c.mean_pairs, c.coverage));
    }
    write_file(&a.out.join("pairs.csv"), &csv)?;
    let last = counts.last().expect("hops validated non-empty by clap");
    println!(
        "analyze-pairs: at {} hops, {:.0} mean pairs per interaction ({:.1}% coverage) -> {}",
        last.hop,
        last.mean_pairs,
        100.0 * last.coverage,
        a.out.display()
    );
    Ok(())
}

fn cmd_retention_study(a: RetentionStudyArgs) -> Result<(), AppError> {
    let bundle = load_bundle(&a.data)?;
    let cfg = RetentionStudyConfig {
        layers: a.layers,
        q_grid: a.q_grid,
        q_item_grid: a.q_item_grid,
        kinds: a.types,
        eval_n: a.n,
        memory_budget: a.memory_budget,
    };
    let cells = retention_study(&bundle, &cfg)?;
    write_file(&a.out.join("retention.csv"), &retention_csv(&cells))?;
    let best = cells
        .iter()
        .max_by(|x, y| x.ndcg.partial_cmp(&y.ndcg).unwrap())
        .expect("grid validated non-empty");
    println!(
        "retention-study: {} cells, best ndcg@{} {:.4} at (q={}, q'={}, {}) -> {}",
        cells.len(),
        cfg.eval_n,
        best.ndcg,
        best.q,
        best.q_item,
        best.kind,
        a.out.display()
    );
    Ok(())
}
