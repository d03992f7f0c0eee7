//! Model checkpoints: `checkpoint.json` manifest plus `params.f32`, the
//! parameter tensors concatenated in storage order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ArchConfig, ModelParams};
use super::tensor::Tensor;
use super::NnError;
use crate::container::{self, BlobInfo, ContainerError, FORMAT_VERSION};

pub const MANIFEST: &str = "checkpoint.json";
pub const PARAMS: &str = "params.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: String,
    pub arch: ArchConfig,
    pub tensors: Vec<TensorEntry>,
    pub seed: u64,
    /// Training hyperparameters and preprocessing, opaque to this module.
    pub meta: serde_json::Value,
    pub params: BlobInfo,
}

pub fn save_checkpoint(dir: &Path, p: &ModelParams<f32>, seed: u64, meta: serde_json::Value) -> Result<CheckpointManifest, NnError> {
    container::create_dir(dir)?;
    let flat: Vec<f32> = p.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
    let params = container::write_blob(dir, PARAMS, &container::f32_to_le(&flat))?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        kind: "checkpoint".into(),
        arch: p.arch().clone(),
        tensors: p
            .names()
            .iter()
            .zip(p.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        seed,
        meta,
        params,
    };
    container::write_manifest(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams<f32>, CheckpointManifest), NnError> {
    let path = dir.join(MANIFEST);
    let m: CheckpointManifest = container::read_manifest(&path)?;
    let declared: usize = m.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if m.params.bytes != (declared * 4) as u64 {
        return Err(ContainerError::CountMismatch(format!(
            "{}: tensors declare {declared} values but {PARAMS} is listed with {} bytes",
            path.display(),
            m.params.bytes
        ))
        .into());
    }
    let flat = container::le_to_f32(&container::read_blob(dir, &m.params)?);
    let mut tensors = Vec::with_capacity(m.tensors.len());
    let mut off = 0;
    for e in &m.tensors {
        let n: usize = e.shape.iter().product();
        tensors.push(Tensor::new(&e.shape, flat[off..off + n].to_vec())?);
        off += n;
    }
    let p = ModelParams::from_tensors(&m.arch, tensors)?;
    if p.names().iter().zip(&m.tensors).any(|(a, b)| *a != b.name) {
        return Err(ContainerError::CountMismatch(format!("{}: tensor names do not match the architecture", path.display())).into());
    }
    Ok((p, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchConfig::standard(7, 80);
        let p = ModelParams::<f32>::init(&arch, 11).unwrap();
        save_checkpoint(dir.path(), &p, 11, serde_json::json!({"lr": 5e-4})).unwrap();
        let (q, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m.seed, 11);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let first = std::fs::read(dir.path().join(PARAMS)).unwrap();
        save_checkpoint(dir.path(), &q, 11, serde_json::json!({"lr": 5e-4})).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join(PARAMS)).unwrap());
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchConfig::standard(7, 80);
        let p = ModelParams::<f32>::init(&arch, 1).unwrap();
        save_checkpoint(dir.path(), &p, 1, serde_json::Value::Null).unwrap();
        let f = dir.path().join(PARAMS);
        let mut bytes = std::fs::read(&f).unwrap();
        bytes.pop();
        std::fs::write(&f, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(NnError::Container(ContainerError::Truncated { .. }))
        ));
    }
}
