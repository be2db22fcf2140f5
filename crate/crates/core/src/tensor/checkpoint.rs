//! Checkpoint layout: `manifest.json` (names, shapes, dtype, byte offsets)
//! plus one raw little-endian blob `tensors.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    /// Optimizer step count shared by all parameters.
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Optional Adam moments, stored as `adam.m/<name>` and `adam.v/<name>`.
    pub has_optimizer_state: bool,
}

/// Writes parameter values (and, when requested, Adam moments).
pub fn save_checkpoint(dir: &Path, store: &ParamStore, with_optimizer: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: String, t: &Tensor, blob: &mut Vec<u8>| {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    };
    let mut step = 0;
    for (_, p) in store.iter() {
        push(p.name.clone(), &p.value, &mut blob);
        step = step.max(p.step);
    }
    if with_optimizer {
        for (_, p) in store.iter() {
            push(format!("adam.m/{}", p.name), &p.m, &mut blob);
            push(format!("adam.v/{}", p.name), &p.v, &mut blob);
        }
    }
    let manifest = CheckpointManifest {
        format: "mtmae-checkpoint-v1".into(),
        dtype: "f64".into(),
        step,
        tensors: entries,
        has_optimizer_state: with_optimizer,
    };
    let path = dir.join(BLOB_FILE);
    fs::write(&path, &blob).map_err(|e| Error::io(path, e))?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a checkpoint into an already-constructed store. Every parameter in
/// the store must be present with an identical shape; extra tensors in the
/// checkpoint are an error too.
pub fn load_checkpoint(dir: &Path, store: &mut ParamStore) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.dtype != "f64" {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype {}",
            manifest.dtype
        )));
    }
    let path = dir.join(BLOB_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;

    let read = |entry: &TensorEntry| -> Result<Tensor> {
        let start = entry.offset as usize;
        let end = start + entry.nbytes as usize;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "{} extends past end of blob",
                entry.name
            )));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor::new(entry.shape.clone(), data)
    };

    let mut seen = 0;
    for entry in &manifest.tensors {
        let (kind, name) = match entry.name.split_once('/') {
            Some(("adam.m", n)) => ("m", n),
            Some(("adam.v", n)) => ("v", n),
            _ => ("value", entry.name.as_str()),
        };
        let id = store.id(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint tensor {name} is not in the model"))
        })?;
        let t = read(entry)?;
        let p = store.get_mut(id);
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        match kind {
            "m" => p.m = t,
            "v" => p.v = t,
            _ => {
                p.value = t;
                seen += 1;
            }
        }
    }
    if seen != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {seen} parameters, model expects {}",
            store.len()
        )));
    }
    let step = if manifest.has_optimizer_state {
        manifest.step
    } else {
        0
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get_mut(id);
        p.step = step;
        p.grad.data_mut().fill(0.0);
    }
    Ok(manifest)
}
