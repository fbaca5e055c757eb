//! Checkpoint bundles: a directory with `meta.json`, `tensors.index.json`,
//! and a single little-endian f32 blob `tensors.bin`. Saving the same bundle
//! twice produces byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EncoderKind;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint bundle: {0}")]
    CorruptBundle(String),
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Restoration,
    Segmentation,
}

/// Run settings recorded alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub task: TaskKind,
    pub encoder: EncoderKind,
    pub base_channels: usize,
    pub input_size: usize,
    /// Loss label the producing run optimized, e.g. "ssim-l1" or "bce".
    pub loss: String,
    /// Corruption label for restoration pretraining runs, empty otherwise.
    pub augmentation: String,
    pub seed: u64,
    /// Epoch (0-based) whose validation score selected this checkpoint.
    pub epoch: usize,
    /// Tensor names that were frozen while training this model.
    pub frozen_names: Vec<String>,
}

/// In-memory checkpoint: metadata plus named tensors with their shapes.
/// A `BTreeMap` keeps serialization order stable.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Element (not byte) offset into tensors.bin.
    offset: u64,
    len: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(dir: &Path, bundle: &CheckpointBundle) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let meta_path = dir.join("meta.json");
    let meta_json = serde_json::to_vec_pretty(&bundle.meta)
        .map_err(|e| CheckpointError::CorruptBundle(e.to_string()))?;
    fs::write(&meta_path, meta_json).map_err(io_err(&meta_path))?;

    let mut index = Vec::with_capacity(bundle.tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    for (name, (shape, values)) in &bundle.tensors {
        index.push(IndexEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: values.len() as u64,
        });
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += values.len() as u64;
    }
    let index_path = dir.join("tensors.index.json");
    let index_json = serde_json::to_vec_pretty(&index)
        .map_err(|e| CheckpointError::CorruptBundle(e.to_string()))?;
    fs::write(&index_path, index_json).map_err(io_err(&index_path))?;

    let bin_path = dir.join("tensors.bin");
    let mut f = fs::File::create(&bin_path).map_err(io_err(&bin_path))?;
    f.write_all(&blob).map_err(io_err(&bin_path))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<CheckpointBundle, CheckpointError> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(io_err(&meta_path))?;
    let index_path = dir.join("tensors.index.json");
    let index_bytes = fs::read(&index_path).map_err(io_err(&index_path))?;
    let bin_path = dir.join("tensors.bin");
    let blob = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    decode_checkpoint_parts(&meta_bytes, &index_bytes, &blob)
}

/// Pure decoding of the three files of a bundle; shared by `load_checkpoint`
/// and the fuzz harness.
pub fn decode_checkpoint_parts(
    meta_bytes: &[u8],
    index_bytes: &[u8],
    blob: &[u8],
) -> Result<CheckpointBundle, CheckpointError> {
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| CheckpointError::CorruptBundle(format!("meta.json: {e}")))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: meta.format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let index: Vec<IndexEntry> = serde_json::from_slice(index_bytes)
        .map_err(|e| CheckpointError::CorruptBundle(format!("tensors.index.json: {e}")))?;
    if blob.len() % 4 != 0 {
        return Err(CheckpointError::CorruptBundle(
            "tensors.bin length is not a multiple of 4".into(),
        ));
    }
    let total = (blob.len() / 4) as u64;
    let mut tensors = BTreeMap::new();
    for entry in index {
        let numel: u64 = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| {
                CheckpointError::CorruptBundle(format!("tensor {}: shape overflow", entry.name))
            })?;
        if numel != entry.len {
            return Err(CheckpointError::CorruptBundle(format!(
                "tensor {}: shape product {} does not match recorded length {}",
                entry.name, numel, entry.len
            )));
        }
        let end = entry.offset.checked_add(entry.len).ok_or_else(|| {
            CheckpointError::CorruptBundle(format!("tensor {}: offset overflow", entry.name))
        })?;
        if end > total {
            return Err(CheckpointError::CorruptBundle(format!(
                "tensor {}: extends past end of tensors.bin ({} > {})",
                entry.name, end, total
            )));
        }
        let start = entry.offset as usize * 4;
        let values: Vec<f32> = blob[start..start + entry.len as usize * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if tensors.insert(entry.name.clone(), (entry.shape, values)).is_some() {
            return Err(CheckpointError::CorruptBundle(format!(
                "duplicate tensor name {}",
                entry.name
            )));
        }
    }
    Ok(CheckpointBundle { meta, tensors })
}
