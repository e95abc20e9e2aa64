//! Checkpoint files: a JSON manifest plus one little-endian `f32` blob.
//!
//! ```text
//! <dir>/manifest.json   {"format", "blob", "entries": [{name, shape, offset, len}], "metadata"}
//! <dir>/params.bin      concatenated f32 LE values, `offset` in bytes
//! ```
//! Both files are written to a temporary name and renamed into place; the
//! manifest is renamed last.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::Array;

pub const FORMAT: &str = "srlane-checkpoint-v1";
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub entries: Vec<Entry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(NumericsError::Checkpoint(msg.into()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(dir: &Path, tensors: &[(String, Array<f32>)], metadata: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let total: usize = tensors.iter().map(|(_, a)| a.len()).sum();
    let mut blob = Vec::with_capacity(total * 4);
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, arr) in tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            offset: blob.len() as u64,
            len: arr.len() as u64,
        });
        for v in arr.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        blob: BLOB.to_string(),
        entries,
        metadata,
    };
    write_atomic(&dir.join(BLOB), &blob)?;
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read(dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| NumericsError::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return corrupt(format!("unknown format `{}`", manifest.format));
    }
    Ok(manifest)
}

/// Named tensors plus the free-form metadata stored alongside them.
pub type Loaded = (Vec<(String, Array<f32>)>, serde_json::Value);

pub fn load(dir: &Path) -> Result<Loaded> {
    let manifest = read_manifest(dir)?;
    let blob = fs::read(dir.join(&manifest.blob))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let expect: usize = e.shape.iter().product();
        if expect as u64 != e.len {
            return corrupt(format!("entry `{}`: shape {:?} vs len {}", e.name, e.shape, e.len));
        }
        let start = e.offset as usize;
        let end = start + e.len as usize * 4;
        if end > blob.len() || e.offset % 4 != 0 {
            return corrupt(format!(
                "entry `{}` spans bytes {start}..{end} of a {}-byte blob",
                e.name,
                blob.len()
            ));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((e.name.clone(), Array::new(&e.shape, data)?));
    }
    Ok((out, manifest.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let weird = vec![f32::MIN_POSITIVE, -0.0, 1.0e-40, 2.5e-3, f32::MAX, -7.5];
        let tensors = vec![
            ("a.w".to_string(), Array::new(&[2, 3], weird.clone()).unwrap()),
            ("b".to_string(), Array::vector(vec![0.1f32])),
        ];
        save(dir.path(), &tensors, serde_json::json!({"step": 7})).unwrap();
        let (back, meta) = load(dir.path()).unwrap();
        assert_eq!(meta["step"], 7);
        assert_eq!(back.len(), 2);
        for ((n0, a0), (n1, a1)) in tensors.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(a0.shape(), a1.shape());
            let bits0: Vec<u32> = a0.data().iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u32> = a1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.entries[1].offset, 24);
    }

    #[test]
    fn truncated_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save(
            dir.path(),
            &[("w".into(), Array::vector(vec![1.0f32; 8]))],
            serde_json::Value::Null,
        )
        .unwrap();
        std::fs::write(dir.path().join(BLOB), [0u8; 12]).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(matches!(err, NumericsError::Checkpoint(_)), "{err}");
    }
}
