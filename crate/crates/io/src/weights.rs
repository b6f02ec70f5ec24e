//! Weight files: a JSON manifest `<stem>.json` and a blob `<stem>.bin` of
//! concatenated little-endian `f32` tensors. Cascade files hold both stages
//! under the `stage1.` and `stage2.` prefixes.

use std::path::{Path, PathBuf};

use hnfnet::network::{CascadeNet, SingleNet};
use hnfnet::weights::{init_store, stage_seed};
use hnfnet::WeightStore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{IoError, IoResult};
use crate::fsutil::{read, read_json, to_json, write_atomic};
use crate::volume::{decode_f32, encode_f32};

pub const WEIGHT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

/// Manifest plus blob, exactly as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub manifest: WeightManifest,
    pub blob: Vec<u8>,
}

pub fn weight_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("bin"))
}

impl WeightFile {
    /// Lays out tensors in name order.
    pub fn from_store(store: &WeightStore) -> Self {
        let mut blob = Vec::with_capacity(store.scalar_count() * 4);
        let mut tensors = Vec::with_capacity(store.len());
        for (name, t) in store.iter() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                byte_offset: blob.len() as u64,
            });
            blob.extend(encode_f32(&t.data));
        }
        Self {
            manifest: WeightManifest {
                format_version: WEIGHT_FORMAT_VERSION,
                config_hash: store.metadata.config_hash.clone(),
                seed: store.metadata.seed,
                tensors,
            },
            blob,
        }
    }

    /// Checks version, bounds and overlap, then decodes.
    pub fn to_store(&self, origin: &Path) -> IoResult<WeightStore> {
        let m = &self.manifest;
        if m.format_version != WEIGHT_FORMAT_VERSION {
            return Err(IoError::format(
                origin,
                format!("format_version: expected {WEIGHT_FORMAT_VERSION}, found {}", m.format_version),
            ));
        }
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(m.tensors.len());
        for e in &m.tensors {
            let bytes = e.shape.iter().product::<usize>() as u64 * 4;
            let end = e.byte_offset.checked_add(bytes).filter(|&end| end <= self.blob.len() as u64);
            match end {
                Some(end) => spans.push((e.byte_offset, end, &e.name)),
                None => {
                    return Err(IoError::format(
                        origin,
                        format!(
                            "tensor `{}`: bytes {}..+{bytes} exceed blob length {}",
                            e.name,
                            e.byte_offset,
                            self.blob.len()
                        ),
                    ))
                }
            }
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(IoError::format(
                    origin,
                    format!("tensors `{}` and `{}` overlap", pair[0].2, pair[1].2),
                ));
            }
        }
        let mut store = WeightStore::new();
        for e in &m.tensors {
            if store.get(&e.name).is_some() {
                return Err(IoError::format(origin, format!("tensor `{}` listed twice", e.name)));
            }
            let start = e.byte_offset as usize;
            let end = start + e.shape.iter().product::<usize>() * 4;
            store.insert(e.name.clone(), e.shape.clone(), decode_f32(&self.blob[start..end]))?;
        }
        store.metadata.config_hash = m.config_hash.clone();
        store.metadata.seed = m.seed;
        Ok(store)
    }

    pub fn manifest_bytes(&self) -> Vec<u8> {
        to_json(&self.manifest)
    }

    /// Hex SHA-256 over manifest bytes then blob bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest_bytes());
        h.update(&self.blob);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.blob.len() / 4
    }
}

/// Seeded weights for `config`; identical inputs give identical bytes.
pub fn init_weights(config: &ModelConfig, seed: u64) -> IoResult<WeightFile> {
    let mut store = match config {
        ModelConfig::Single(c) => init_store(&c.param_specs()?, seed)?,
        ModelConfig::Cascade(c) => {
            c.validate()?;
            let mut store = WeightStore::new();
            store.absorb("stage1", init_store(&c.stage1.param_specs()?, stage_seed(seed, 1))?);
            store.absorb("stage2", init_store(&c.stage2.param_specs()?, stage_seed(seed, 2))?);
            store
        }
    };
    store.metadata.config_hash = config.hash();
    store.metadata.seed = Some(seed);
    Ok(WeightFile::from_store(&store))
}

/// Blob first, then manifest; each lands atomically.
pub fn write_weights(path: &Path, file: &WeightFile) -> IoResult<()> {
    let (manifest, blob) = weight_paths(path);
    write_atomic(&blob, &file.blob)?;
    write_atomic(&manifest, &file.manifest_bytes())
}

pub fn read_weights(path: &Path) -> IoResult<WeightFile> {
    let (manifest_path, blob_path) = weight_paths(path);
    let manifest: WeightManifest = read_json(&manifest_path)?;
    let blob = read(&blob_path)?;
    if blob.len() % 4 != 0 {
        return Err(IoError::format(&blob_path, format!("blob length {} is not a multiple of 4", blob.len())));
    }
    Ok(WeightFile { manifest, blob })
}

/// A network ready to run, built from a weight file checked against its config.
pub enum LoadedModel {
    Single(SingleNet),
    Cascade(CascadeNet),
}

impl LoadedModel {
    pub fn predictor(&self) -> &dyn hnfnet::pipeline::Predictor {
        match self {
            LoadedModel::Single(n) => n,
            LoadedModel::Cascade(n) => n,
        }
    }
}

pub fn load_model(path: &Path, config: &ModelConfig) -> IoResult<LoadedModel> {
    let file = read_weights(path)?;
    let (manifest_path, _) = weight_paths(path);
    let expected = config.hash();
    if file.manifest.config_hash != expected {
        return Err(IoError::format(
            &manifest_path,
            format!(
                "config_hash: weights were made for {}, config hashes to {expected}",
                file.manifest.config_hash
            ),
        ));
    }
    let store = file.to_store(&manifest_path)?;
    Ok(match config {
        ModelConfig::Single(c) => LoadedModel::Single(SingleNet::from_store(c, &store)?),
        ModelConfig::Cascade(c) => {
            let (s1, s2) = (store.sub_store("stage1"), store.sub_store("stage2"));
            if s1.len() + s2.len() != store.len() {
                let stray = store
                    .iter()
                    .map(|(k, _)| k)
                    .find(|k| !k.starts_with("stage1.") && !k.starts_with("stage2."))
                    .cloned()
                    .unwrap_or_default();
                return Err(hnfnet::Error::UnexpectedWeight(stray).into());
            }
            LoadedModel::Cascade(CascadeNet::from_stores(c, &s1, &s2)?)
        }
    })
}
