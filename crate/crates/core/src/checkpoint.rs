//! Weight blobs and the `checkpoint.json` manifests that describe them.
//!
//! A blob is the concatenation of every parameter tensor as little-endian
//! `f32`, in the network's fixed visiting order. The manifest lists tensor
//! names and lengths plus a CRC-32 of the blob.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::dataset::{bytes_to_f32, read_f32_file};
use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub file: String,
    pub crc32: u32,
    pub tensors: Vec<TensorEntry>,
}

impl BlobInfo {
    fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len).sum()
    }
}

pub fn write_blob(dir: &Path, file: &str, model: &dyn Parameters) -> Result<BlobInfo> {
    let params = model.named_params();
    let mut bytes = Vec::with_capacity(params.iter().map(|(_, p)| p.len() * 4).sum());
    let mut tensors = Vec::with_capacity(params.len());
    for (name, p) in &params {
        bytes.extend(p.value.iter().flat_map(|v| v.to_le_bytes()));
        tensors.push(TensorEntry {
            name: name.clone(),
            len: p.len(),
        });
    }
    let path = dir.join(file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(BlobInfo {
        file: file.to_string(),
        crc32: crc32fast::hash(&bytes),
        tensors,
    })
}

/// Load a blob into `model`, whose architecture must match the blob's
/// tensor table exactly.
pub fn read_blob<M: Parameters + ?Sized>(dir: &Path, info: &BlobInfo, model: &mut M) -> Result<()> {
    let path = dir.join(&info.file);
    let layout: Vec<(String, usize)> = model.named_params().into_iter().map(|(n, p)| (n, p.len())).collect();
    let expected: Vec<(String, usize)> = info.tensors.iter().map(|t| (t.name.clone(), t.len)).collect();
    if layout != expected {
        return Err(Error::Format {
            path,
            message: "tensor table does not match the network architecture".into(),
        });
    }
    let bytes = read_f32_file(&path, &info.file, info.num_values() as u64 * 4)?;
    let actual = crc32fast::hash(&bytes);
    if actual != info.crc32 {
        return Err(Error::Checksum {
            array: info.file.clone(),
            expected: info.crc32,
            actual,
        });
    }
    let values = bytes_to_f32(&bytes);
    let mut offset = 0;
    for p in model.params_mut() {
        let n = p.len();
        p.value.copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

pub fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    let path = dir.join(CHECKPOINT_FILE);
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest always serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest<T: DeserializeOwned>(dir: &Path) -> Result<T> {
    let path = dir.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("no checkpoint at {}", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let version: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let found = version.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(version).map_err(|e| Error::Format {
        path,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, Padding};
    use rand::SeedableRng;

    #[test]
    fn blob_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let a = Conv2d::new(2, 3, 3, 1, 1, Padding::same(3), true, &mut rng);
        let info = write_blob(dir.path(), "w.bin", &a).unwrap();
        let mut b = Conv2d::new(2, 3, 3, 1, 1, Padding::same(3), true, &mut rng);
        assert_ne!(a.param_checksum(), b.param_checksum());
        read_blob(dir.path(), &info, &mut b).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());

        let mut wrong = Conv2d::new(2, 4, 3, 1, 1, Padding::same(3), true, &mut rng);
        assert!(matches!(read_blob(dir.path(), &info, &mut wrong), Err(Error::Format { .. })));

        let path = dir.path().join("w.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[5] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_blob(dir.path(), &info, &mut b), Err(Error::Checksum { .. })));
        bytes.truncate(10);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_blob(dir.path(), &info, &mut b), Err(Error::Truncated { .. })));
    }
}
