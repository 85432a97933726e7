//! Checkpoint files: one binary file per tensor plus a JSON manifest.
//!
//! Tensor file layout: magic `WPT0`, rank `u8`, extents `u32` LE each, then
//! the data as little-endian fp32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"WPT0";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub config_hash: String,
    /// Parameter name → tensor file name, in store order.
    pub tensors: BTreeMap<String, String>,
    pub order: Vec<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Checkpoint(format!("rank {} too large", t.rank())));
    }
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&(x.to_f64c() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 5 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Checkpoint("bad tensor magic".into()));
    }
    let rank = bytes[4] as usize;
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Checkpoint("truncated tensor header".into()));
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    if bytes.len() != header + 4 * numel {
        return Err(Error::Checkpoint(format!(
            "tensor {shape:?} needs {} payload bytes, found {}",
            4 * numel,
            bytes.len() - header
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| T::from_f64c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

fn file_name(name: &str) -> String {
    let clean: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    format!("{clean}.wpt")
}

pub fn save<T: Scalar>(
    dir: &Path,
    params: &ParamStore<T>,
    config_hash: &str,
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    let mut order = Vec::new();
    for (_, name, value) in params.iter() {
        let file = file_name(name);
        fs::write(dir.join(&file), encode_tensor(value)?)?;
        tensors.insert(name.to_string(), file);
        order.push(name.to_string());
    }
    let manifest = CheckpointManifest { config_hash: config_hash.to_string(), tensors, order, meta };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
}

/// Load every tensor listed in the manifest into a fresh store.
pub fn load<T: Scalar>(dir: &Path) -> Result<(ParamStore<T>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let mut store = ParamStore::new();
    for name in &manifest.order {
        let file = manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("{name} missing from tensor map")))?;
        store.add(name.clone(), decode_tensor(&fs::read(dir.join(file))?)?);
    }
    Ok((store, manifest))
}
