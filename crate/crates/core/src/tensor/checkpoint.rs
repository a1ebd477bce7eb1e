//! Parameter checkpoints: a JSON manifest plus a little-endian raw blob.
//!
//! The manifest lists `{name, shape, dtype, offset}` per tensor; offsets are
//! byte positions into the companion blob file. A free-form `meta` value
//! carries training state (epoch counters and the like).

use super::{Scalar, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub type CheckpointMeta = serde_json::Value;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    meta: CheckpointMeta,
}

pub fn save_checkpoint<T: Scalar>(
    manifest_path: &Path,
    blob_path: &Path,
    tensors: &[(String, &Tensor<T>)],
    meta: &CheckpointMeta,
) -> Result<(), TensorError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.name().to_string(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    let manifest = Manifest {
        tensors: entries,
        meta: meta.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    fs::write(manifest_path, json)?;
    fs::write(blob_path, blob)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(
    manifest_path: &Path,
    blob_path: &Path,
) -> Result<(Vec<(String, Tensor<T>)>, CheckpointMeta), TensorError> {
    let json = fs::read_to_string(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let blob = fs::read(blob_path)?;
    let elem = T::DTYPE.size();
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != T::DTYPE.name() {
            return Err(TensorError::Checkpoint(format!(
                "tensor `{}` has dtype {}, expected {}",
                entry.name,
                entry.dtype,
                T::DTYPE.name()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * elem;
        if end > blob.len() {
            return Err(TensorError::Checkpoint(format!(
                "tensor `{}` spans bytes {start}..{end} but blob holds {}",
                entry.name,
                blob.len()
            )));
        }
        let data: Vec<T> = blob[start..end]
            .chunks_exact(elem)
            .map(T::from_le_slice)
            .collect();
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((out, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempdir().unwrap();
        let mj = dir.path().join("m.json");
        let mb = dir.path().join("m.bin");
        let a = Tensor::<f32>::from_f64_slice(&[2, 2], &[1.5, -2.25, 0.1, 3.0]).unwrap();
        let b = Tensor::<f32>::from_f64_slice(&[3], &[0.0, -0.0, f64::MIN_POSITIVE]).unwrap();
        let meta = serde_json::json!({"epoch": 3});
        save_checkpoint(
            &mj,
            &mb,
            &[("w".to_string(), &a), ("b".to_string(), &b)],
            &meta,
        )
        .unwrap();
        let (loaded, got_meta) = load_checkpoint::<f32>(&mj, &mb).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "w");
        assert_eq!(loaded[0].1.data(), a.data());
        assert_eq!(loaded[1].1.data(), b.data());
        assert_eq!(got_meta["epoch"], 3);
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let mj = dir.path().join("m.json");
        let mb = dir.path().join("m.bin");
        let a = Tensor::<f32>::zeros(&[2]);
        save_checkpoint(&mj, &mb, &[("w".to_string(), &a)], &serde_json::Value::Null).unwrap();
        let err = load_checkpoint::<f64>(&mj, &mb).unwrap_err();
        assert!(matches!(err, TensorError::Checkpoint(_)));
    }
}
