//! Manifest + blob persistence shared by model and strategy checkpoints.
//!
//! A checkpoint is a JSON manifest (`<stem>.json`) naming each array with its
//! offset and shape, plus one raw little-endian `f64` blob (`<stem>.bin`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "clstream-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![data.len()],
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `"model"` or `"strategy:<kind>"`.
    pub kind: String,
    pub metadata: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint `{}` has no array `{name}`", self.kind)))
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: String,
    metadata: serde_json::Value,
    blob: String,
    byte_len: u64,
    entries: Vec<ManifestEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save(ckpt: &Checkpoint, manifest_path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(ckpt.arrays.len());
    let mut bytes = Vec::new();
    let mut offset = 0;
    for a in &ckpt.arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::Data(format!(
                "array `{}` has shape {:?} but {} values",
                a.name,
                a.shape,
                a.data.len()
            )));
        }
        entries.push(ManifestEntry {
            name: a.name.clone(),
            offset,
            shape: a.shape.clone(),
        });
        offset += a.data.len();
        for v in &a.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob = blob_path(manifest_path);
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: ckpt.kind.clone(),
        metadata: ckpt.metadata.clone(),
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        byte_len: bytes.len() as u64,
        entries,
    };
    if let Some(parent) = manifest_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

pub fn load(manifest_path: &Path) -> Result<Checkpoint> {
    let text = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::format(manifest_path, format!("unreadable manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            manifest_path,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    let blob = manifest_path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if bytes.len() as u64 != manifest.byte_len {
        return Err(Error::format(
            &blob,
            format!("expected {} bytes, found {}", manifest.byte_len, bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect();
    let mut arrays = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        let len: usize = e.shape.iter().product();
        let end = e.offset + len;
        if end > values.len() {
            return Err(Error::format(
                &blob,
                format!(
                    "array `{}` spans bytes {}..{} beyond the {}-byte blob",
                    e.name,
                    e.offset * 8,
                    end * 8,
                    bytes.len()
                ),
            ));
        }
        arrays.push(NamedArray {
            name: e.name,
            shape: e.shape,
            data: values[e.offset..end].to_vec(),
        });
    }
    Ok(Checkpoint {
        kind: manifest.kind,
        metadata: manifest.metadata,
        arrays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint {
            kind: "strategy:test".into(),
            metadata: serde_json::json!({"lambda": 0.5}),
            arrays: vec![
                NamedArray::vector("a", vec![1.0, -2.5, f64::MIN_POSITIVE]),
                NamedArray { name: "b".into(), shape: vec![2, 2], data: vec![0.1, 0.2, 0.3, 0.4] },
            ],
        };
        save(&ck, &path).unwrap();
        assert_eq!(load(&path).unwrap(), ck);

        let blob = path.with_extension("bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("expected 56 bytes, found 48"), "{err}");
    }
}
