//! Named parameter storage and deterministic initialisation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ema::{normalize_columns, Matrix};
use crate::error::{mismatch, Error, Result};
use crate::layers::{ParamKind, ParamSource, ParamSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WeightMetadata {
    pub config_hash: String,
    pub seed: Option<u64>,
}

/// Parameter name -> tensor. Immutable once built; safe to share.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, StoredTensor>,
    pub metadata: WeightMetadata,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let expected: usize = shape.iter().product();
        let name = name.into();
        if expected != data.len() {
            return Err(mismatch(format!("{name} length"), expected, data.len()));
        }
        self.tensors.insert(name, StoredTensor { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &StoredTensor)> {
        self.tensors.iter()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// Entries whose name starts with `prefix.`, with the prefix stripped.
    pub fn sub_store(&self, prefix: &str) -> WeightStore {
        let dotted = format!("{prefix}.");
        WeightStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|s| (String::from(s), v.clone())))
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    /// Merges `other` with every name prefixed by `prefix.`.
    pub fn absorb(&mut self, prefix: &str, other: WeightStore) {
        for (k, v) in other.tensors {
            self.tensors.insert(format!("{prefix}.{k}"), v);
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut StoredTensor> {
        self.tensors.get_mut(name)
    }

    /// Checks names and shapes against `specs` exactly.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name).ok_or_else(|| Error::MissingWeight(spec.name.clone()))?;
            check_shape(&spec.name, &spec.shape, &t.shape)?;
        }
        let wanted: BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        if let Some(extra) = self.tensors.keys().find(|k| !wanted.contains(k.as_str())) {
            return Err(Error::UnexpectedWeight(extra.clone()));
        }
        Ok(())
    }
}

fn check_shape(name: &str, expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(mismatch(format!("{name} rank"), expected.len(), actual.len()));
    }
    for (i, (&e, &a)) in expected.iter().zip(actual).enumerate() {
        if e != a {
            return Err(mismatch(format!("{name} dim {i}"), e, a));
        }
    }
    Ok(())
}

/// Serves parameters from a store and tracks which were consumed.
pub struct StoreReader<'a> {
    store: &'a WeightStore,
    used: BTreeSet<&'a str>,
}

impl<'a> StoreReader<'a> {
    pub fn new(store: &'a WeightStore) -> Self {
        Self {
            store,
            used: BTreeSet::new(),
        }
    }

    /// Fails if the store holds names nothing asked for.
    pub fn finish(self) -> Result<()> {
        match self.store.tensors.keys().find(|k| !self.used.contains(k.as_str())) {
            Some(extra) => Err(Error::UnexpectedWeight(extra.clone())),
            None => Ok(()),
        }
    }
}

impl ParamSource for StoreReader<'_> {
    fn take(&mut self, name: &str, shape: &[usize], _kind: ParamKind) -> Result<Vec<f32>> {
        let (key, t) = self
            .store
            .tensors
            .get_key_value(name)
            .ok_or_else(|| Error::MissingWeight(name.into()))?;
        check_shape(name, shape, &t.shape)?;
        self.used.insert(key.as_str());
        Ok(t.data.clone())
    }
}

/// 64-bit FNV-1a, used to derive per-tensor generator seeds from names.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// splitmix64 finaliser.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for one named tensor under a run seed.
pub fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, fnv1a(name.as_bytes())))
}

/// Values for one parameter: fan-in-scaled uniform for convolutions, unit
/// gain / zero shift for norms, normalised uniform columns for EMA bases.
pub fn init_tensor(spec: &ParamSpec, seed: u64) -> Result<Vec<f32>> {
    let n = spec.len();
    let mut rng = tensor_rng(seed, &spec.name);
    Ok(match spec.kind {
        ParamKind::ConvWeight { fan_in } | ParamKind::ConvBias { fan_in } => {
            let bound = 1.0 / libm::sqrtf(fan_in.max(1) as f32);
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
        ParamKind::NormGain => alloc::vec![1.0; n],
        ParamKind::NormShift => alloc::vec![0.0; n],
        ParamKind::Bases => {
            let mut m = Matrix::from_vec(spec.shape[0], spec.shape[1], (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())?;
            normalize_columns(&mut m)?;
            m.data().to_vec()
        }
    })
}

/// Fills a store for `specs` from `seed`; same inputs give identical stores.
pub fn init_store(specs: &[ParamSpec], seed: u64) -> Result<WeightStore> {
    let mut store = WeightStore::new();
    for spec in specs {
        store.insert(spec.name.clone(), spec.shape.clone(), init_tensor(spec, seed)?)?;
    }
    store.metadata.seed = Some(seed);
    Ok(store)
}

/// Stage seeds for a cascade initialised from one run seed.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    mix(seed, stage)
}
