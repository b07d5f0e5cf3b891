//! On-disk layout: `manifest.json` (format version, free-form metadata, and
//! one entry per tensor with name, shape and byte offset) next to
//! `tensors.bin`, the concatenation of every tensor as little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    metadata: serde_json::Value,
    blob: String,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    for (name, t) in &ckpt.tensors {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        metadata: ckpt.metadata.clone(),
        blob: BLOB_FILE.to_string(),
        tensors: entries,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Data {
        path: manifest_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Data {
            path: manifest_path,
            line: 0,
            msg: format!("unsupported format_version {}", manifest.format_version),
        });
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut tensors = BTreeMap::new();
    for e in manifest.tensors {
        let (start, len) = (e.offset as usize, e.len as usize);
        let bytes = blob.get(start..start + len).ok_or_else(|| Error::Data {
            path: blob_path.clone(),
            line: 0,
            msg: format!("tensor {} extends past end of blob", e.name),
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| Error::Data {
            path: blob_path.clone(),
            line: 0,
            msg: format!("tensor {}: {err}", e.name),
        })?;
        tensors.insert(e.name, t);
    }
    Ok(Checkpoint {
        metadata: manifest.metadata,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a".to_string(),
            Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        );
        tensors.insert("b".to_string(), Tensor::scalar(0.1));
        let ckpt = Checkpoint {
            metadata: serde_json::json!({"note": "x"}),
            tensors,
        };
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ckpt);
        let raw = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        assert_eq!(raw.len(), 5 * 8);
        assert_eq!(&raw[..8], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"format_version":9,"metadata":null,"blob":"tensors.bin","tensors":[]}"#,
        )
        .unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
