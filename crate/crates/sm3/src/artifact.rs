//! On-disk artifact format shared by datasets and checkpoints.
//!
//! An artifact is a directory holding `manifest.json` plus `data.blob`.
//! The manifest carries the format version, artifact kind, a tensor
//! directory (name, shape, offset into the blob), the SHA-256 of the blob,
//! and a kind-specific `extra` payload. The blob is raw little-endian
//! 32-bit floats in declared order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "data.blob";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
    pub extra: serde_json::Value,
}

/// Accumulates named tensors, then writes the manifest + blob pair.
pub struct ArtifactWriter {
    kind: String,
    tensors: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl ArtifactWriter {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            tensors: Vec::new(),
            blob: Vec::new(),
        }
    }

    /// Values are stored as f32; callers that need bit-exact roundtrips
    /// must hold f32-representable values.
    pub fn add_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        let offset = self.blob.len() / 4;
        for v in t.data() {
            self.blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.tensors.push(TensorEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
    }

    pub fn write(self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let digest = hex_digest(&self.blob);
        let manifest = Manifest {
            version: FORMAT_VERSION,
            kind: self.kind,
            tensors: self.tensors,
            blob_sha256: digest,
            extra,
        };
        fs::write(dir.join(BLOB_FILE), &self.blob)?;
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Checksum-verified view of a stored artifact.
#[derive(Debug)]
pub struct ArtifactReader {
    pub manifest: Manifest,
    blob: Vec<f32>,
    path: PathBuf,
}

impl ArtifactReader {
    pub fn open(dir: &Path, expected_kind: &str) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::MissingArtifact(dir.to_path_buf()));
        }
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&manifest_path)?).map_err(|e| {
                Error::Format {
                    path: manifest_path.clone(),
                    reason: e.to_string(),
                }
            })?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: manifest_path,
                found: manifest.version,
                expected: FORMAT_VERSION,
            });
        }
        if manifest.kind != expected_kind {
            return Err(Error::Format {
                path: manifest_path,
                reason: format!("kind {:?}, expected {:?}", manifest.kind, expected_kind),
            });
        }
        let blob_path = dir.join(BLOB_FILE);
        if !blob_path.exists() {
            return Err(Error::MissingArtifact(blob_path));
        }
        let bytes = fs::read(&blob_path)?;
        if hex_digest(&bytes) != manifest.blob_sha256 {
            return Err(Error::ChecksumMismatch { path: blob_path });
        }
        if bytes.len() % 4 != 0 {
            return Err(Error::Format {
                path: blob_path,
                reason: "blob length not a multiple of 4".into(),
            });
        }
        let blob = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            manifest,
            blob,
            path: dir.to_path_buf(),
        })
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let entry = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format {
                path: self.path.clone(),
                reason: format!("missing tensor {name:?}"),
            })?;
        let end = entry.offset + entry.len;
        if end > self.blob.len() || entry.shape.iter().product::<usize>() != entry.len {
            return Err(Error::Format {
                path: self.path.clone(),
                reason: format!("tensor {name:?} entry inconsistent with blob"),
            });
        }
        let data = self.blob[entry.offset..end].iter().map(|v| *v as f64).collect();
        Tensor::new(entry.shape.clone(), data)
    }

    pub fn extra<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.manifest.extra.clone()).map_err(|e| Error::Format {
            path: self.path.clone(),
            reason: format!("extra payload: {e}"),
        })
    }
}

/// Quantize through f32 so in-memory values survive a save/load roundtrip
/// bit for bit.
pub fn quantize_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Tensor::matrix(2, 3, vec![0.1, -2.5, 3.75, 0.0, 1e-8, 42.0]).unwrap();
        quantize_f32(&mut t);
        let mut w = ArtifactWriter::new("test");
        w.add_tensor("a", &t);
        w.write(dir.path(), serde_json::json!({"n": 1})).unwrap();
        let r = ArtifactReader::open(dir.path(), "test").unwrap();
        assert_eq!(r.tensor("a").unwrap(), t);
    }

    #[test]
    fn truncated_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArtifactWriter::new("test");
        w.add_tensor("a", &Tensor::vector(vec![1.0, 2.0, 3.0]));
        w.write(dir.path(), serde_json::Value::Null).unwrap();
        let blob_path = dir.path().join(BLOB_FILE);
        let bytes = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &bytes[..bytes.len() - 4]).unwrap();
        match ArtifactReader::open(dir.path(), "test") {
            Err(Error::ChecksumMismatch { .. }) => {}
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArtifactWriter::new("test");
        w.add_tensor("a", &Tensor::vector(vec![1.0]));
        w.write(dir.path(), serde_json::Value::Null).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 99");
        std::fs::write(&mpath, text).unwrap();
        match ArtifactReader::open(dir.path(), "test") {
            Err(Error::VersionMismatch { found: 99, .. }) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_artifact_reported() {
        let dir = tempfile::tempdir().unwrap();
        match ArtifactReader::open(&dir.path().join("nope"), "test") {
            Err(Error::MissingArtifact(_)) => {}
            other => panic!("expected missing artifact, got {other:?}"),
        }
    }
}
