//! Deterministic dataset partitioning: pretext / main / evaluation splits
//! stratified per source, nested pretext fractions and label budgets, and
//! five-fold cross-validation.
//!
//! All randomness is derived from the manifest seed, and every collection is
//! sorted before shuffling, so results do not depend on input order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::imaging::CropRecord;

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("cannot split an empty dataset")]
    EmptyDataset,
    #[error("fraction {0} outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("label budget {requested} exceeds main split size {available}")]
    BudgetTooLarge { requested: usize, available: usize },
    #[error("cannot make {k} folds from {n} items")]
    TooFewItems { n: usize, k: usize },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Unlabeled pool for restoration pretraining (40%).
    Pretext,
    /// Labeled pool for segmentation training (40%).
    Main,
    /// Held-out pool for final evaluation (20%).
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub crop_id: String,
    pub source_id: String,
    pub slice_index: usize,
    pub window_x: usize,
    pub window_y: usize,
    pub rotation_deg: u16,
    pub object_fraction: f64,
    pub split: SplitKind,
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    /// SHA-256 over the sorted crop ids and the seed; identifies the inputs
    /// the manifest was derived from.
    pub created_from: String,
}

impl DatasetManifest {
    pub fn ids_in(&self, split: SplitKind) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.crop_id.clone())
            .collect()
    }
}

pub(crate) fn derive_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().unwrap()))
}

fn input_hash(crops: &[&CropRecord], seed: u64) -> String {
    let mut ids: Vec<String> = crops.iter().map(|c| c.crop_id()).collect();
    ids.sort();
    let mut h = Sha256::new();
    for id in &ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    h.update(seed.to_le_bytes());
    format!("{:x}", h.finalize())
}

/// Partition crops 40/40/20 into pretext / main / evaluation.
///
/// Assignment happens at the level of base windows, stratified per source:
/// within each source the distinct (slice, window) positions are shuffled with
/// a seed-derived RNG and cut 40/40/20 (within one window per source). Every
/// rotated variant inherits its base window's split, so no rotation of an
/// evaluation window can leak into a training split.
pub fn make_splits(crops: &[CropRecord], seed: u64) -> Result<DatasetManifest, SplitError> {
    if crops.is_empty() {
        return Err(SplitError::EmptyDataset);
    }
    let refs: Vec<&CropRecord> = crops.iter().collect();
    let created_from = input_hash(&refs, seed);

    // source_id -> window_id -> member crops.
    let mut by_source: BTreeMap<&str, BTreeMap<String, Vec<&CropRecord>>> = BTreeMap::new();
    for c in crops {
        by_source
            .entry(c.source_id.as_str())
            .or_default()
            .entry(c.window_id())
            .or_default()
            .push(c);
    }

    let mut assignment: BTreeMap<String, SplitKind> = BTreeMap::new();
    for (source, windows) in &by_source {
        let mut window_ids: Vec<&String> = windows.keys().collect();
        let mut rng = derive_rng(seed, &format!("split:{source}"));
        window_ids.shuffle(&mut rng);
        let n = window_ids.len();
        let n_pretext = ((n as f64) * 0.4).round() as usize;
        let n_main = ((n as f64) * 0.4).round() as usize;
        for (i, wid) in window_ids.into_iter().enumerate() {
            let split = if i < n_pretext {
                SplitKind::Pretext
            } else if i < n_pretext + n_main {
                SplitKind::Main
            } else {
                SplitKind::Evaluation
            };
            assignment.insert(wid.clone(), split);
        }
    }

    let mut entries: Vec<ManifestEntry> = crops
        .iter()
        .map(|c| ManifestEntry {
            crop_id: c.crop_id(),
            source_id: c.source_id.clone(),
            slice_index: c.slice_index,
            window_x: c.window_x,
            window_y: c.window_y,
            rotation_deg: c.rotation_deg,
            object_fraction: c.object_fraction,
            split: assignment[&c.window_id()],
            fold: None,
        })
        .collect();
    entries.sort_by(|a, b| a.crop_id.cmp(&b.crop_id));
    Ok(DatasetManifest {
        entries,
        seed,
        created_from,
    })
}

/// Pretext-split subsample plus its 80/20 train/validation cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretextSubset {
    pub train: Vec<String>,
    pub validate: Vec<String>,
}

/// Take `floor(fraction * n)` ids from a fixed seeded permutation of the
/// pretext split, then cut them 80/20 into train/validate (`floor(0.8 * k)`
/// train). Because every fraction reads a prefix of the same permutation,
/// smaller fractions are strict subsets of larger ones.
pub fn pretext_subset(
    manifest: &DatasetManifest,
    fraction: f64,
) -> Result<PretextSubset, SplitError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SplitError::FractionOutOfRange(fraction));
    }
    let mut pool = manifest.ids_in(SplitKind::Pretext);
    pool.sort();
    if pool.is_empty() {
        return Err(SplitError::EmptyDataset);
    }
    let mut rng = derive_rng(manifest.seed, "pretext-subset");
    pool.shuffle(&mut rng);
    let take = ((pool.len() as f64) * fraction).floor() as usize;
    let take = take.max(1);
    let n_train = ((take as f64) * 0.8).floor() as usize;
    let picked = &pool[..take];
    Ok(PretextSubset {
        train: picked[..n_train].to_vec(),
        validate: picked[n_train..].to_vec(),
    })
}

/// First `n` entries of a fixed seeded permutation of the main split, so that
/// budgets are nested prefixes: every smaller budget trains on a subset of the
/// images a larger budget sees.
pub fn label_budget_subset(manifest: &DatasetManifest, n: usize) -> Result<Vec<String>, SplitError> {
    let mut pool = manifest.ids_in(SplitKind::Main);
    pool.sort();
    if n > pool.len() {
        return Err(SplitError::BudgetTooLarge {
            requested: n,
            available: pool.len(),
        });
    }
    let mut rng = derive_rng(manifest.seed, "label-budget");
    pool.shuffle(&mut rng);
    pool.truncate(n);
    Ok(pool)
}

/// Seeded shuffle then contiguous partition into `k` near-equal folds; the
/// first `n % k` folds get the extra item.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>, SplitError> {
    if k < 2 || ids.len() < k {
        return Err(SplitError::TooFewItems { n: ids.len(), k });
    }
    let mut pool: Vec<String> = ids.to_vec();
    pool.sort();
    let mut rng = derive_rng(seed, "folds");
    pool.shuffle(&mut rng);
    let n = pool.len();
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        folds.push(pool[at..at + len].to_vec());
        at += len;
    }
    Ok(folds)
}

/// Serialize the manifest as a single stable-order JSON document, written
/// atomically (temp file then rename).
pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), SplitError> {
    let io_err = |source| SplitError::Io {
        path: path.display().to_string(),
        source,
    };
    let json = serde_json::to_vec_pretty(manifest)
        .map_err(|e| SplitError::Malformed(e.to_string()))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, &json).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, SplitError> {
    let bytes = std::fs::read(path).map_err(|source| SplitError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&bytes)
}

/// Pure manifest decoding with structural validation; shared by
/// `load_manifest` and the fuzz harness.
pub fn parse_manifest(bytes: &[u8]) -> Result<DatasetManifest, SplitError> {
    let manifest: DatasetManifest =
        serde_json::from_slice(bytes).map_err(|e| SplitError::Malformed(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for e in &manifest.entries {
        if !seen.insert(&e.crop_id) {
            return Err(SplitError::Malformed(format!(
                "duplicate crop_id {}",
                e.crop_id
            )));
        }
        if let Some(f) = e.fold {
            if f >= 5 {
                return Err(SplitError::Malformed(format!(
                    "fold {f} out of range for {}",
                    e.crop_id
                )));
            }
        }
        if !(0.0..=1.0).contains(&e.object_fraction) {
            return Err(SplitError::Malformed(format!(
                "object_fraction {} out of range for {}",
                e.object_fraction, e.crop_id
            )));
        }
    }
    Ok(manifest)
}
