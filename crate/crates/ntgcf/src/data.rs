//! Interaction-log ingestion, deterministic per-user splits, and on-disk
//! bundle persistence.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::stream;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed line {line} in {path}: expected at least 2 fields")]
    Malformed { path: PathBuf, line: usize },
    #[error("split ratios must be positive and sum to 1 (got {0:?})")]
    BadRatios([f64; 3]),
    #[error("missing manifest in {0}")]
    MissingManifest(PathBuf),
    #[error("manifest parse error in {path}: {source}")]
    BadManifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("index out of range in {file}: {kind} id {id} (limit {limit})")]
    IndexOutOfRange { file: String, kind: &'static str, id: u32, limit: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Deduplicated raw interaction records in first-seen order.
#[derive(Debug, Clone)]
pub struct RawInteractions {
    pub records: Vec<(String, String)>,
    pub source_path: PathBuf,
}

/// Parse "user item [extra…]" lines; exact duplicate (user, item) pairs are
/// collapsed to the first occurrence. Fields beyond the second are ignored.
pub fn load_interactions(path: &Path) -> Result<RawInteractions, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (user, item) = match (fields.next(), fields.next()) {
            (Some(u), Some(i)) => (u.to_owned(), i.to_owned()),
            _ => return Err(DataError::Malformed { path: path.to_path_buf(), line: idx + 1 }),
        };
        if seen.insert((user.clone(), item.clone())) {
            records.push((user, item));
        }
    }
    Ok(RawInteractions { records, source_path: path.to_path_buf() })
}

/// A dataset with dense ids and a fixed train/valid/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub num_users: u32,
    pub num_items: u32,
    pub train: Vec<(u32, u32)>,
    pub valid: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    /// Dense index -> original key (the inverse key->index mapping).
    pub user_keys: Vec<String>,
    pub item_keys: Vec<String>,
    pub split_seed: u64,
    pub ratios: [f64; 3],
    /// Users/items that ended up with no training interaction (cold entries
    /// kept in the index; evaluation skips users with empty ground truth).
    pub users_without_train: u32,
    pub items_without_train: u32,
}

/// Per-user stratified split. Each user's interactions are shuffled with a
/// seed-derived stream and partitioned by largest-remainder allocation of
/// the ratios (remainder ties resolved train, then valid, then test), so a
/// user with 10 interactions under (0.7, 0.1, 0.2) gets exactly (7, 1, 2).
pub fn split_dataset(
    raw: &RawInteractions,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetBundle, DataError> {
    if ratios.iter().any(|r| *r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(ratios));
    }

    let mut user_ids: HashMap<&str, u32> = HashMap::new();
    let mut item_ids: HashMap<&str, u32> = HashMap::new();
    let mut user_keys = Vec::new();
    let mut item_keys = Vec::new();
    let mut per_user: Vec<Vec<u32>> = Vec::new();
    for (ukey, ikey) in &raw.records {
        let u = *user_ids.entry(ukey).or_insert_with(|| {
            user_keys.push(ukey.clone());
            per_user.push(Vec::new());
            (user_keys.len() - 1) as u32
        });
        let i = *item_ids.entry(ikey).or_insert_with(|| {
            item_keys.push(ikey.clone());
            (item_keys.len() - 1) as u32
        });
        per_user[u as usize].push(i);
    }

    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    let mut items_in_train = vec![false; item_keys.len()];
    let mut users_without_train = 0u32;
    for (u, items) in per_user.iter().enumerate() {
        let mut items = items.clone();
        let mut rng = stream(seed, "split", u as u64, 0);
        shuffle(&mut items, &mut rng);
        let counts = largest_remainder(items.len(), ratios);
        let (a, b) = (counts[0], counts[0] + counts[1]);
        for (pos, &i) in items.iter().enumerate() {
            let pair = (u as u32, i);
            if pos < a {
                train.push(pair);
                items_in_train[i as usize] = true;
            } else if pos < b {
                valid.push(pair);
            } else {
                test.push(pair);
            }
        }
        if counts[0] == 0 {
            users_without_train += 1;
        }
    }
    let items_without_train = items_in_train.iter().filter(|x| !*x).count() as u32;

    Ok(DatasetBundle {
        num_users: user_keys.len() as u32,
        num_items: item_keys.len() as u32,
        train,
        valid,
        test,
        user_keys,
        item_keys,
        split_seed: seed,
        ratios,
        users_without_train,
        items_without_train,
    })
}

fn shuffle(items: &mut [u32], rng: &mut impl rand::Rng) {
    use rand::seq::SliceRandom;
    items.shuffle(rng);
}

/// Integer allocation of `n` slots to three fractions: floor first, then the
/// leftover slots go to the largest fractional remainders (ties by position).
fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in &order {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    num_users: u32,
    num_items: u32,
    split_seed: u64,
    ratios: [f64; 3],
    split_strategy: String,
    counts: [usize; 3],
    users_without_train: u32,
    items_without_train: u32,
    // BTreeMap so the serialized manifest is byte-stable across runs
    checksums: BTreeMap<String, String>,
}

const SPLIT_FILES: [&str; 3] = ["train.txt", "valid.txt", "test.txt"];
const MAP_FILES: [&str; 2] = ["user_map.txt", "item_map.txt"];

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut checksums = BTreeMap::new();
    let splits = [&bundle.train, &bundle.valid, &bundle.test];
    for (name, edges) in SPLIT_FILES.iter().zip(splits) {
        let mut buf = String::new();
        for (u, i) in edges {
            buf.push_str(&format!("{u}\t{i}\n"));
        }
        let path = dir.join(name);
        fs::write(&path, &buf).map_err(io_err(&path))?;
        checksums.insert(name.to_string(), sha256_hex(buf.as_bytes()));
    }
    for (name, keys) in MAP_FILES.iter().zip([&bundle.user_keys, &bundle.item_keys]) {
        let buf: String = keys.iter().map(|k| format!("{k}\n")).collect();
        let path = dir.join(name);
        fs::write(&path, &buf).map_err(io_err(&path))?;
        checksums.insert(name.to_string(), sha256_hex(buf.as_bytes()));
    }
    let manifest = Manifest {
        format: "ntgcf-bundle-v1".to_string(),
        num_users: bundle.num_users,
        num_items: bundle.num_items,
        split_seed: bundle.split_seed,
        ratios: bundle.ratios,
        split_strategy: "per-user".to_string(),
        counts: [bundle.train.len(), bundle.valid.len(), bundle.test.len()],
        users_without_train: bundle.users_without_train,
        items_without_train: bundle.items_without_train,
        checksums,
    };
    let path = dir.join("manifest.json");
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    serde_json::to_writer_pretty(&mut f, &manifest)
        .map_err(|e| DataError::BadManifest { path: path.clone(), source: e })?;
    f.write_all(b"\n").map_err(io_err(&path))?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle, DataError> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(DataError::MissingManifest(dir.to_path_buf()));
    }
    let bytes = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| DataError::BadManifest { path: manifest_path, source: e })?;

    let mut split_bytes = Vec::new();
    for name in SPLIT_FILES.iter().chain(MAP_FILES.iter()) {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if manifest.checksums.get(*name).map(String::as_str)
            != Some(sha256_hex(&bytes).as_str())
        {
            return Err(DataError::Checksum(name.to_string()));
        }
        split_bytes.push(bytes);
    }

    let parse_edges = |name: &str, bytes: &[u8]| -> Result<Vec<(u32, u32)>, DataError> {
        let mut edges = Vec::new();
        for line in bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
            let text = std::str::from_utf8(line).map_err(|_| DataError::Malformed {
                path: dir.join(name),
                line: edges.len() + 1,
            })?;
            let mut it = text.split_whitespace();
            let parse = |s: Option<&str>| {
                s.and_then(|v| v.parse::<u32>().ok()).ok_or(DataError::Malformed {
                    path: dir.join(name),
                    line: edges.len() + 1,
                })
            };
            let (u, i) = (parse(it.next())?, parse(it.next())?);
            if u >= manifest.num_users {
                return Err(DataError::IndexOutOfRange {
                    file: name.to_string(),
                    kind: "user",
                    id: u,
                    limit: manifest.num_users,
                });
            }
            if i >= manifest.num_items {
                return Err(DataError::IndexOutOfRange {
                    file: name.to_string(),
                    kind: "item",
                    id: i,
                    limit: manifest.num_items,
                });
            }
            edges.push((u, i));
        }
        Ok(edges)
    };
    let parse_keys = |bytes: &[u8]| -> Vec<String> {
        bytes
            .split(|b| *b == b'\n')
            .filter(|l| !l.is_empty())
            .map(|l| String::from_utf8_lossy(l).into_owned())
            .collect()
    };

    Ok(DatasetBundle {
        num_users: manifest.num_users,
        num_items: manifest.num_items,
        train: parse_edges("train.txt", &split_bytes[0])?,
        valid: parse_edges("valid.txt", &split_bytes[1])?,
        test: parse_edges("test.txt", &split_bytes[2])?,
        user_keys: parse_keys(&split_bytes[3]),
        item_keys: parse_keys(&split_bytes[4]),
        split_seed: manifest.split_seed,
        ratios: manifest.ratios,
        users_without_train: manifest.users_without_train,
        items_without_train: manifest.items_without_train,
    })
}
