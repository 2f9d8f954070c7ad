//! Weight files: little-endian `f32` values in a flat `.bin` with a JSON
//! sidecar listing each parameter's byte offset and shape.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::nn::ParamStore;

pub const FORMAT: &str = "mono3d-weights";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid manifest: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("unsupported checkpoint format `{format}` version {version}")]
    Format { format: String, version: u32 },
    #[error("checkpoint was saved for variant {saved} (attention {saved_attention}) but variant {requested} (attention {requested_attention}) was requested")]
    VariantMismatch { saved: String, saved_attention: bool, requested: String, requested_attention: bool },
    #[error("parameter `{name}`: {message}")]
    Param { name: String, message: String },
    #[error("checkpoint model config differs from the requested one: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    /// Byte offset into the `.bin` file.
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    /// Total size of the `.bin` file in bytes.
    pub bytes: usize,
    pub params: BTreeMap<String, ParamEntry>,
}

/// Sidecar path of a weight file: `x.bin` → `x.json`.
pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Serializes `store` in registration order.
pub fn encode(store: &ParamStore, model: &ModelConfig) -> (Vec<u8>, Manifest) {
    let mut bytes = Vec::with_capacity(store.num_scalars() * 4);
    let mut params = BTreeMap::new();
    for (_, name, t) in store.iter() {
        params.insert(name.to_string(), ParamEntry { offset: bytes.len(), shape: t.shape().to_vec() });
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest { format: FORMAT.into(), version: VERSION, model: model.clone(), bytes: bytes.len(), params };
    (bytes, manifest)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// Writes `bin` and its sidecar.
pub fn save(bin: &Path, store: &ParamStore, model: &ModelConfig) -> Result<()> {
    let (bytes, manifest) = encode(store, model);
    fs::write(bin, bytes).map_err(io(bin))?;
    let mp = manifest_path(bin);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| CheckpointError::Manifest { path: mp.clone(), source })?;
    fs::write(&mp, text + "\n").map_err(io(&mp))
}

pub fn read_manifest(bin: &Path) -> Result<Manifest> {
    let mp = manifest_path(bin);
    let text = fs::read_to_string(&mp).map_err(io(&mp))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| CheckpointError::Manifest { path: mp, source })?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(CheckpointError::Format { format: m.format, version: m.version });
    }
    Ok(m)
}

/// Fails unless `saved` was built with the variant and attention setting of
/// `requested`.
pub fn check_compatible(saved: &ModelConfig, requested: &ModelConfig) -> Result<()> {
    if saved.variant != requested.variant || saved.attention_enabled != requested.attention_enabled {
        return Err(CheckpointError::VariantMismatch {
            saved: saved.variant.to_string(),
            saved_attention: saved.attention_enabled,
            requested: requested.variant.to_string(),
            requested_attention: requested.attention_enabled,
        });
    }
    if saved != requested {
        return Err(CheckpointError::Config(format!("saved {saved:?}, requested {requested:?}")));
    }
    Ok(())
}

/// Copies every parameter of `store` from `bytes`. Every store parameter
/// must be present with the same shape; extra entries are rejected too.
pub fn decode_into(store: &mut ParamStore, bytes: &[u8], manifest: &Manifest) -> Result<()> {
    if bytes.len() != manifest.bytes {
        return Err(CheckpointError::Param {
            name: "<file>".into(),
            message: format!("weight file has {} bytes, manifest says {}", bytes.len(), manifest.bytes),
        });
    }
    if let Some(extra) = manifest.params.keys().find(|n| store.id(n).is_none()) {
        return Err(CheckpointError::Param { name: extra.clone(), message: "not a parameter of this model".into() });
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let entry = manifest
            .params
            .get(&name)
            .ok_or_else(|| CheckpointError::Param { name: name.clone(), message: "missing from checkpoint".into() })?;
        let t = store.get_mut(id);
        if entry.shape != t.shape() {
            return Err(CheckpointError::Param { name, message: format!("shape {:?} in checkpoint, model expects {:?}", entry.shape, t.shape()) });
        }
        let end = entry.offset + 4 * t.numel();
        if entry.offset % 4 != 0 || end > bytes.len() {
            return Err(CheckpointError::Param { name, message: format!("byte range {}..{end} outside the weight file", entry.offset) });
        }
        for (v, chunk) in t.data_mut().iter_mut().zip(bytes[entry.offset..end].chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
    }
    Ok(())
}

/// Loads `bin` into `store`, which must have been built from `requested`.
pub fn load(bin: &Path, store: &mut ParamStore, requested: &ModelConfig) -> Result<Manifest> {
    let m = read_manifest(bin)?;
    check_compatible(&m.model, requested)?;
    let bytes = fs::read(bin).map_err(io(bin))?;
    decode_into(store, &bytes, &m)?;
    Ok(m)
}
