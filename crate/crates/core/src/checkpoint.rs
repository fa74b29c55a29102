//! Checkpoint directories: `manifest.json` describing every parameter and the
//! model setup, and `params.bin` holding the values as little-endian f32 in
//! manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chemix::ChemixConfig;
use crate::descriptors::NormStats;
use crate::error::{Error, Result};
use crate::params::{Param, ParamStore};
use crate::pom::PomConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "pommix-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: String,
    pub trainable: bool,
    pub min: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// `pom`, `chemix` or `pommix`.
    pub kind: String,
    pub seed: u64,
    pub pom: Option<PomConfig>,
    pub chemix: Option<ChemixConfig>,
    pub label_names: Vec<String>,
    pub norm: Option<NormStats>,
    pub wiring: Vec<String>,
    /// Free-form run facts such as the training plan and best epoch.
    pub notes: BTreeMap<String, serde_json::Value>,
    pub params: Vec<ParamEntry>,
}

impl Manifest {
    pub fn new(kind: &str, seed: u64) -> Self {
        Manifest {
            format: FORMAT.into(),
            kind: kind.into(),
            seed,
            pom: None,
            chemix: None,
            label_names: Vec::new(),
            norm: None,
            wiring: Vec::new(),
            notes: BTreeMap::new(),
            params: Vec::new(),
        }
    }
}

/// Writes `store` and `manifest` (its parameter list is replaced) into `dir`.
pub fn save<T: Scalar>(dir: &Path, manifest: &Manifest, store: &ParamStore<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = manifest.clone();
    manifest.params = store
        .iter()
        .map(|(name, p)| ParamEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            group: p.group.clone(),
            trainable: p.trainable,
            min: p.min,
        })
        .collect();
    let mut bytes = Vec::with_capacity(store.num_values() * 4);
    for (_, p) in store.iter() {
        for x in p.value.data() {
            bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let path = dir.join(PARAMS);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint(format!("{}: unsupported format `{}`", path.display(), m.format)));
    }
    Ok(m)
}

pub fn load<T: Scalar>(dir: &Path) -> Result<(Manifest, ParamStore<T>)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(PARAMS);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, manifest describes {expected} values",
            path.display(),
            bytes.len()
        )));
    }
    let mut values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let n = entry.shape.iter().product();
        let data: Vec<T> = values.by_ref().take(n).map(|x| T::of(x as f64)).collect();
        let mut p = Param::new(Tensor::new(&entry.shape, data)?, &entry.group);
        p.trainable = entry.trainable;
        p.min = entry.min;
        store.insert(&entry.name, p)?;
    }
    Ok((manifest, store))
}

/// Copies checkpoint values into a freshly built store, requiring every
/// parameter of `target` to be present with the same shape.
pub fn restore_into<T: Scalar>(target: &mut ParamStore<T>, saved: &ParamStore<T>) -> Result<()> {
    for (name, p) in target.iter_mut() {
        let q = saved
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no parameter {name}")))?;
        if q.value.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                q.value.shape(),
                p.value.shape()
            )));
        }
        p.value = q.value.clone();
        p.trainable = q.trainable;
    }
    Ok(())
}
