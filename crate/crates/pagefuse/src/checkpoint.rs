//! Checkpoint files: a JSON manifest beside a flat binary weight blob.
//!
//! A checkpoint is the pair `<name>.manifest.json` + `<name>.weights.bin`.
//! The manifest records the model configuration, the training step, and the
//! parameter names/shapes in blob order; the blob is the concatenation of
//! every parameter's values as little-endian 32-bit floats, in exactly that
//! order. Parameters are stored sorted by name (the [`ParamStore`] iteration
//! order), which makes save → load → save byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: usize,
    pub config: ModelConfig,
    /// Blob layout: parameters in this order, each flattened row-major.
    pub params: Vec<ParamEntry>,
}

fn sibling(base: &Path, suffix: &str) -> PathBuf {
    let mut name = base
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    base.with_file_name(name)
}

pub fn manifest_path(base: &Path) -> PathBuf {
    sibling(base, ".manifest.json")
}

pub fn weights_path(base: &Path) -> PathBuf {
    sibling(base, ".weights.bin")
}

/// Whether either half of the pair already exists (overwrite guard).
pub fn exists(base: &Path) -> bool {
    manifest_path(base).exists() || weights_path(base).exists()
}

pub fn save<T: Scalar>(
    base: &Path,
    config: &ModelConfig,
    store: &ParamStore<T>,
    step: usize,
) -> Result<()> {
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let params: Vec<ParamEntry> = store
        .iter()
        .map(|(name, t)| ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step,
        config: config.clone(),
        params,
    };
    let mpath = manifest_path(base);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::parse(&mpath, "manifest", e.to_string()))?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;

    let mut blob = Vec::with_capacity(4 * store.num_values());
    for (_, t) in store.iter() {
        for &v in t.data() {
            blob.extend_from_slice(&v.to_f32().to_le_bytes());
        }
    }
    let wpath = weights_path(base);
    fs::write(&wpath, blob).map_err(|e| Error::io(&wpath, e))
}

/// Load the pair back. Values are widened from the stored f32s into `T`, so
/// loading into `f32` reproduces the saved model exactly.
pub fn load<T: Scalar>(base: &Path) -> Result<(Manifest, ParamStore<T>)> {
    let mpath = manifest_path(base);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&mpath, "manifest", e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "format version {} (this build reads {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let wpath = weights_path(base);
    let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let expected: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if blob.len() != 4 * expected {
        return Err(Error::CheckpointMismatch(format!(
            "weight blob holds {} bytes but the manifest needs {}",
            blob.len(),
            4 * expected
        )));
    }
    let mut store = ParamStore::new();
    let mut at = 0usize;
    for entry in &manifest.params {
        if store.contains(&entry.name) {
            return Err(Error::CheckpointMismatch(format!(
                "parameter {:?} listed twice in the manifest",
                entry.name
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let bytes: [u8; 4] = blob[at..at + 4].try_into().unwrap();
            data.push(T::from_f32(f32::from_le_bytes(bytes)));
            at += 4;
        }
        store.insert(&entry.name, Tensor::new(entry.shape.clone(), data));
    }
    Ok((manifest, store))
}
