//! Model checkpoints: a JSON manifest next to a raw tensor blob.
//!
//! `<stem>.json` holds
//!
//! ```text
//! { "format": "allmem-model", "version": 1, "config": { ModelConfig },
//!   "tensors": [ { "name", "shape", "offset", "trainable" }, ... ] }
//! ```
//!
//! and `<stem>.bin` the concatenated tensor data as little-endian `f64`,
//! each tensor starting at `offset` (counted in values, not bytes) in the
//! manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{is_trainable, Model, ModelConfig, Params};
use crate::tensor::Tensor;

pub const FORMAT: &str = "allmem-model";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save(model: &Model, stem: &Path) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            trainable: is_trainable(name),
        });
        offset += t.len();
        blob.extend(t.data().iter().flat_map(|x| x.to_le_bytes()));
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        tensors,
    };
    let (json, bin) = paths(stem);
    if let Some(dir) = json.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(json, serde_json::to_string_pretty(&manifest)?)?;
    fs::write(bin, blob)?;
    Ok(())
}

pub fn load(stem: &Path) -> Result<Model> {
    let (json, bin) = paths(stem);
    if !json.exists() {
        return Err(Error::Checkpoint(format!("{} not found", json.display())));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&json)?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format {} v{}", manifest.format, manifest.version)));
    }
    manifest.config.validate()?;
    let bytes = fs::read(bin)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("tensor blob is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    let mut params = Params::new();
    for e in &manifest.tensors {
        let len: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the blob", e.name)))?;
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data.to_vec())?);
    }
    Ok(Model { config: manifest.config, params })
}

fn digest(params: &Params, keep: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter().filter(|(n, _)| keep(n)) {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// SHA-256 over the names, shapes and bytes of all frozen parameters.
pub fn frozen_digest(params: &Params) -> String {
    digest(params, |n| !is_trainable(n))
}

/// SHA-256 over the trainable parameters.
pub fn trainable_digest(params: &Params) -> String {
    digest(params, is_trainable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branch::BranchKind;
    use crate::model::convert_teacher;
    use rand::SeedableRng;

    #[test]
    fn round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let teacher = Model::init_teacher(ModelConfig::default(), &mut rng).unwrap();
        let student = convert_teacher(&teacher, BranchKind::AllMem, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("student");
        save(&student, &stem).unwrap();
        let back = load(&stem).unwrap();
        assert_eq!(back, student);
        assert_eq!(frozen_digest(&back.params), frozen_digest(&student.params));
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Checkpoint(_))));
    }
}
