//! Shared checkpoint format: a UTF-8 JSON manifest listing per-parameter
//! {name, shape, dtype, byte_offset, byte_len}, plus a single little-endian
//! raw blob file. Round-trips are bit-exact.
//!
//! The same two files carry model checkpoints (`np.*`, `flow.*`,
//! `summary.*`, ...) and simulated datasets (`thetas`, `xs`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::rng::fnv1a64;
use crate::tensor::Tensor;

pub const FORMAT: &str = "manifest-blob-v1";

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub params: Vec<ManifestParam>,
    /// Free-form metadata: config echo, trainability flags, dataset header.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("manifest.json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("blob")
}

/// Write named f64 arrays under `stem` (two files: manifest + blob).
pub fn write_entries(
    stem: &Path,
    entries: &[(String, Vec<usize>, Vec<f64>)],
    meta: serde_json::Value,
) -> Result<()> {
    let mut params = Vec::with_capacity(entries.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, shape, data) in entries {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Checkpoint(format!(
                "entry `{name}`: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        let byte_offset = blob.len() as u64;
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        params.push(ManifestParam {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f64".to_string(),
            byte_offset,
            byte_len: (data.len() * 8) as u64,
        });
    }
    let manifest = Manifest { format: FORMAT.to_string(), params, meta };
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(manifest_path(stem), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(blob_path(stem), blob)?;
    Ok(())
}

/// Read back entries and metadata written by [`write_entries`].
pub fn read_entries(stem: &Path) -> Result<(Vec<(String, Vec<usize>, Vec<f64>)>, serde_json::Value)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(stem))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    let blob = fs::read(blob_path(stem))?;
    let mut out = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        if p.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "entry `{}`: unsupported dtype `{}`",
                p.name, p.dtype
            )));
        }
        let start = p.byte_offset as usize;
        let end = start + p.byte_len as usize;
        if end > blob.len() || p.byte_len % 8 != 0 {
            return Err(Error::Checkpoint(format!(
                "entry `{}`: byte range {start}..{end} outside blob of {} bytes",
                p.name,
                blob.len()
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expect: usize = p.shape.iter().product();
        if expect != data.len() {
            return Err(Error::Checkpoint(format!(
                "entry `{}`: shape {:?} does not match {} stored values",
                p.name,
                p.shape,
                data.len()
            )));
        }
        out.push((p.name.clone(), p.shape.clone(), data));
    }
    Ok((out, manifest.meta))
}

/// Persist a parameter store. Trainability is recorded in the metadata so a
/// load reproduces the store exactly.
pub fn save_store(stem: &Path, store: &ParameterStore, mut meta: serde_json::Value) -> Result<()> {
    let entries: Vec<(String, Vec<usize>, Vec<f64>)> = store
        .iter()
        .map(|(n, p)| (n.clone(), p.value.shape().to_vec(), p.value.data().to_vec()))
        .collect();
    let frozen: Vec<&String> = store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(n, _)| n)
        .collect();
    if !meta.is_object() {
        meta = serde_json::json!({});
    }
    meta.as_object_mut()
        .unwrap()
        .insert("frozen".to_string(), serde_json::json!(frozen));
    write_entries(stem, &entries, meta)
}

pub fn load_store(stem: &Path) -> Result<(ParameterStore, serde_json::Value)> {
    let (entries, meta) = read_entries(stem)?;
    let frozen: Vec<String> = meta
        .get("frozen")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    let mut store = ParameterStore::new();
    for (name, shape, data) in entries {
        let t = Tensor::new(shape, data);
        if frozen.iter().any(|f| f == &name) {
            store.insert_frozen(name, t);
        } else {
            store.insert(name, t);
        }
    }
    Ok((store, meta))
}

/// Content hash of the raw blob (FNV-1a over bytes).
pub fn blob_hash(stem: &Path) -> Result<u64> {
    Ok(fnv1a64(&fs::read(blob_path(stem))?))
}
