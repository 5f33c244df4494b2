//! Versioned binary container for checkpoints, adapter sets and train state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"CLRA"
//! u32    format version (currently 1)
//! u32    meta length M
//! [M]    meta JSON (sorted keys — serde_json maps are ordered)
//! u32    tensor count N
//! N ×    u32 name length, name bytes,
//!        u32 rank, rank × u64 dims,
//!        u64 element count, elements as f32 LE
//! ```
//!
//! Tensors are written sorted by name and the format carries no timestamps,
//! so identical contents serialize to identical bytes — re-running a stage
//! over unchanged inputs is byte-idempotent, and whole-run determinism can
//! be asserted by comparing files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CLRA";
const FORMAT_VERSION: u32 = 1;
/// Guards against absurd allocations when reading a corrupt file.
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 31;

/// A named tensor payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// An in-memory artifact: a JSON metadata object plus named tensors.
#[derive(Debug, Clone, Default)]
pub struct Artifact {
    meta: serde_json::Map<String, serde_json::Value>,
    tensors: BTreeMap<String, TensorEntry>,
}

impl Artifact {
    /// Creates an artifact tagged with its kind (`"checkpoint"`,
    /// `"adapters"`, `"train-state"`, ...).
    pub fn new(kind: &str) -> Self {
        let mut a = Artifact::default();
        a.set_meta("kind", serde_json::Value::String(kind.to_string()));
        a
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").and_then(|v| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: serde_json::Value) {
        self.meta.insert(key.to_string(), value);
    }

    pub fn meta(&self, key: &str) -> Option<&serde_json::Value> {
        self.meta.get(key)
    }

    /// String metadata or an error naming the missing key.
    pub fn meta_str(&self, key: &str, path: &Path) -> Result<&str> {
        self.meta(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::artifact(path, format!("missing string metadata {key:?}")))
    }

    /// Unsigned-integer metadata or an error naming the missing key.
    pub fn meta_u64(&self, key: &str, path: &Path) -> Result<u64> {
        self.meta(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::artifact(path, format!("missing integer metadata {key:?}")))
    }

    /// Float metadata or an error naming the missing key.
    pub fn meta_f64(&self, key: &str, path: &Path) -> Result<f64> {
        self.meta(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::artifact(path, format!("missing float metadata {key:?}")))
    }

    pub fn insert_tensor(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.to_string(), TensorEntry { shape, data });
    }

    pub fn tensor(&self, name: &str, path: &Path) -> Result<&TensorEntry> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::artifact(path, format!("missing tensor {name:?}")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    /// Serializes to bytes (see module docs for the layout).
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::Value::Object(self.meta.clone()).to_string();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, entry) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
            for &d in &entry.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(entry.data.len() as u64).to_le_bytes());
            for &v in &entry.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != MAGIC {
            return Err(Error::artifact(path, "bad magic — not an artifact file"));
        }
        let version = read_u32(&mut r, path)?;
        if version != FORMAT_VERSION {
            return Err(Error::artifact(
                path,
                format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
            ));
        }

        let meta_len = read_u32(&mut r, path)?;
        if meta_len > 1 << 24 {
            return Err(Error::artifact(path, "metadata block implausibly large"));
        }
        let mut meta_bytes = vec![0u8; meta_len as usize];
        read_exact(&mut r, &mut meta_bytes, path)?;
        let meta_value: serde_json::Value = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::artifact(path, format!("metadata is not valid JSON: {e}")))?;
        let serde_json::Value::Object(meta) = meta_value else {
            return Err(Error::artifact(path, "metadata must be a JSON object"));
        };

        let count = read_u32(&mut r, path)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r, path)?;
            if name_len > MAX_NAME_LEN {
                return Err(Error::artifact(path, "tensor name implausibly long"));
            }
            let mut name_bytes = vec![0u8; name_len as usize];
            read_exact(&mut r, &mut name_bytes, path)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::artifact(path, "tensor name is not UTF-8"))?;

            let rank = read_u32(&mut r, path)?;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::artifact(path, format!("tensor {name:?} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(read_u64(&mut r, path)? as usize);
            }
            let len = read_u64(&mut r, path)?;
            if len > MAX_ELEMENTS {
                return Err(Error::artifact(path, format!("tensor {name:?} implausibly large")));
            }
            if shape.iter().product::<usize>() as u64 != len {
                return Err(Error::artifact(
                    path,
                    format!("tensor {name:?}: shape {shape:?} disagrees with element count {len}"),
                ));
            }
            let mut raw = vec![0u8; len as usize * 4];
            read_exact(&mut r, &mut raw, path)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, TensorEntry { shape, data });
        }

        // Trailing garbage means the file is not what it claims to be.
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::artifact(path, "trailing bytes after last tensor"));
        }

        Ok(Artifact { meta, tensors })
    }

    /// Requires the artifact to be of the given kind.
    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            Some(k) => Err(Error::artifact(
                path,
                format!("expected a {kind:?} artifact, found {k:?}"),
            )),
            None => Err(Error::artifact(path, "artifact carries no kind tag")),
        }
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::artifact(path, "truncated file"))
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Artifact {
        let mut a = Artifact::new("checkpoint");
        a.set_meta("config_digest", serde_json::json!("abc123"));
        a.set_meta("step", serde_json::json!(42));
        a.insert_tensor("w.b", vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]);
        a.insert_tensor("w.a", vec![3], vec![0.5, 0.25, -0.125]);
        a
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let a = sample();
        a.save(&path).unwrap();
        let b = Artifact::load(&path).unwrap();
        assert_eq!(b.kind(), Some("checkpoint"));
        assert_eq!(b.meta_u64("step", &path).unwrap(), 42);
        assert_eq!(b.tensor("w.a", &path).unwrap(), a.tensor("w.a", &path).unwrap());
        assert_eq!(b.tensor("w.b", &path).unwrap(), a.tensor("w.b", &path).unwrap());
    }

    #[test]
    fn serialization_is_byte_stable() {
        // Same logical content must produce identical bytes regardless of
        // insertion order — downstream determinism checks compare files.
        let a = sample();
        let mut b = Artifact::new("checkpoint");
        b.insert_tensor("w.a", vec![3], vec![0.5, 0.25, -0.125]);
        b.insert_tensor("w.b", vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]);
        b.set_meta("step", serde_json::json!(42));
        b.set_meta("config_digest", serde_json::json!("abc123"));
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        sample().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Truncation.
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(Artifact::load(&path).is_err());

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(Artifact::load(&path).is_err());

        // Unsupported version.
        let mut bad = bytes.clone();
        bad[4] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(Artifact::load(&path).is_err());

        // Trailing garbage.
        let mut bad = bytes.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        assert!(Artifact::load(&path).is_err());
    }

    #[test]
    fn kind_and_metadata_access_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let a = sample();
        a.save(&path).unwrap();
        let b = Artifact::load(&path).unwrap();
        assert!(b.expect_kind("checkpoint", &path).is_ok());
        assert!(b.expect_kind("adapters", &path).is_err());
        assert!(b.meta_str("nope", &path).is_err());
        assert!(b.tensor("nope", &path).is_err());
    }
}
