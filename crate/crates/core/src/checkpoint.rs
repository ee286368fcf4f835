//! Model checkpoints: a JSON header describing the model config, adaptation
//! plan, and parameter table, followed by one contiguous little-endian f64
//! blob. Writes are atomic (temp file + rename).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{apply_plan, AdaptationPlan, Model, ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"NRC1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (expected NRC1)")]
    BadMagic,
    #[error("truncated checkpoint: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("parameter table does not match model: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    /// Offset into the blob, in f64 units.
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    model_config: ModelConfig,
    plan: Option<AdaptationPlan>,
    /// Master seed all derived randomness flows from.
    rng_seed: u64,
    params: Vec<ParamEntry>,
}

/// Serializes a model (with the plan that produced its adapters, when any)
/// to `path`.
pub fn save(
    path: &Path,
    model: &Model,
    plan: Option<&AdaptationPlan>,
    rng_seed: u64,
) -> Result<(), CheckpointError> {
    let mut entries = Vec::new();
    let mut blob: Vec<f64> = Vec::new();
    let mut clone = model.clone();
    clone.for_each_param(&mut |name, data, shape, trainable, _| {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            trainable,
            offset: blob.len(),
            len: data.len(),
        });
        blob.extend_from_slice(data);
    });
    let header = Header {
        version: 1,
        model_config: model.config().clone(),
        plan: plan.cloned(),
        rng_seed,
        params: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut bytes =
        Vec::with_capacity(4 + 8 + header_bytes.len() + blob.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for v in &blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loaded checkpoint: the reconstructed model plus the plan and seed it was
/// saved with.
pub struct Loaded {
    pub model: Model,
    pub plan: Option<AdaptationPlan>,
    pub rng_seed: u64,
}

pub fn load(path: &Path) -> Result<Loaded, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(CheckpointError::Truncated {
            expected: 12 + header_len,
            got: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])?;
    let blob_bytes = &bytes[12 + header_len..];
    let blob_len: usize = header.params.iter().map(|p| p.len).sum();
    if blob_bytes.len() != blob_len * 8 {
        return Err(CheckpointError::Truncated {
            expected: 12 + header_len + blob_len * 8,
            got: bytes.len(),
        });
    }
    let mut blob = Vec::with_capacity(blob_len);
    for chunk in blob_bytes.chunks_exact(8) {
        blob.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }

    // Rebuild structurally, then restore values by name.
    let mut model = Model::build(&header.model_config)?;
    if let Some(plan) = &header.plan {
        apply_plan(&mut model, plan)?;
    }
    let snapshot: Vec<(String, Vec<f64>)> = header
        .params
        .iter()
        .map(|entry| {
            (
                entry.name.clone(),
                blob[entry.offset..entry.offset + entry.len].to_vec(),
            )
        })
        .collect();
    model
        .restore(&snapshot)
        .map_err(|e| CheckpointError::ParamMismatch(e.to_string()))?;
    // The saved table must also cover nothing the model lacks.
    let mut model_names = Vec::new();
    {
        let mut clone = model.clone();
        clone.for_each_param(&mut |name, _, _, _, _| model_names.push(name.to_string()));
    }
    for entry in &header.params {
        if !model_names.contains(&entry.name) {
            return Err(CheckpointError::ParamMismatch(format!(
                "checkpoint parameter {} not present in rebuilt model",
                entry.name
            )));
        }
    }
    Ok(Loaded {
        model,
        plan: header.plan,
        rng_seed: header.rng_seed,
    })
}


#[cfg(test)]
fn load_bytes_for_test(bytes: &[u8]) -> Result<Loaded, CheckpointError> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    std::fs::write(&path, bytes).unwrap();
    load(&path)
}
