//! Binary container shared by checkpoints and dataset files.
//!
//! Layout: 4-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then a payload of row-major little-endian `f32` arrays. The header
//! lists every array with its shape and byte offset, the payload length, and a
//! SHA-256 digest of the payload. Integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    entries: Vec<Entry>,
    payload_bytes: u64,
    sha256: String,
}

/// A decoded container: user metadata plus named `f32` arrays in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.arrays.push((name.into(), shape, data));
    }

    /// Arrays keyed by name, for lookup after loading.
    pub fn into_map(self) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
        self.arrays
            .into_iter()
            .map(|(n, s, d)| (n, (s, d)))
            .collect()
    }

    pub fn to_bytes(&self, magic: &[u8; 4], version: u32) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, shape, data) in &self.arrays {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Argument(format!(
                    "array {name}: shape {shape:?} does not match {} values",
                    data.len()
                )));
            }
            let offset = payload.len() as u64;
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(Entry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: shape.clone(),
                offset,
                bytes: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            meta: self.meta.clone(),
            entries,
            payload_bytes: payload.len() as u64,
            sha256: hex_digest(&payload),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Integrity(format!(
                "file is {} bytes, shorter than the fixed preamble",
                bytes.len()
            )));
        }
        if &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if found != version {
            return Err(Error::Format(format!(
                "unsupported version: expected {version}, found {found}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let rest = &bytes[16..];
        if rest.len() < hlen {
            return Err(Error::Integrity("header truncated".into()));
        }
        let header: Header = serde_json::from_slice(&rest[..hlen])
            .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
        let payload = &rest[hlen..];
        if payload.len() as u64 != header.payload_bytes {
            return Err(Error::Integrity(format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        let mut cursor = 0u64;
        for e in &header.entries {
            let want = 4 * e.shape.iter().product::<usize>() as u64;
            if e.dtype != "f32" || e.offset != cursor || e.bytes != want {
                return Err(Error::Integrity(format!(
                    "entry {} does not tile the payload",
                    e.name
                )));
            }
            cursor += e.bytes;
        }
        if cursor != header.payload_bytes {
            return Err(Error::Integrity("entries do not cover the payload".into()));
        }
        if hex_digest(payload) != header.sha256 {
            return Err(Error::Integrity("payload checksum mismatch".into()));
        }
        let arrays = header
            .entries
            .into_iter()
            .map(|e| {
                let raw = &payload[e.offset as usize..(e.offset + e.bytes) as usize];
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                (e.name, e.shape, data)
            })
            .collect();
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path, magic: &[u8; 4], version: u32) -> Result<()> {
        let bytes = self.to_bytes(magic, version)?;
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, magic: &[u8; 4], version: u32) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, magic, version)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 4] = b"TEST";

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"kind": "demo", "n": 2}));
        c.push("a", vec![2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.0e7]);
        c.push("b", vec![3], vec![0.0, -0.0, 1.0 / 3.0]);
        c
    }

    #[test]
    fn round_trip_is_bit_exact() -> Result<()> {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes(MAGIC, 1)?, MAGIC, 1)?;
        assert_eq!(back.meta, c.meta);
        for ((n0, s0, d0), (n1, s1, d1)) in c.arrays.iter().zip(&back.arrays) {
            assert_eq!((n0, s0), (n1, s1));
            let b0: Vec<u32> = d0.iter().map(|v| v.to_bits()).collect();
            let b1: Vec<u32> = d1.iter().map(|v| v.to_bits()).collect();
            assert_eq!(b0, b1);
        }
        Ok(())
    }

    #[test]
    fn rejects_magic_version_and_corruption() -> Result<()> {
        let bytes = sample().to_bytes(MAGIC, 1)?;
        assert!(matches!(Container::from_bytes(&bytes, b"XXXX", 1), Err(Error::Format(_))));
        assert!(matches!(Container::from_bytes(&bytes, MAGIC, 2), Err(Error::Format(_))));

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x01;
        assert!(matches!(Container::from_bytes(&flipped, MAGIC, 1), Err(Error::Integrity(_))));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Container::from_bytes(truncated, MAGIC, 1), Err(Error::Integrity(_))));
        assert!(matches!(Container::from_bytes(&bytes[..10], MAGIC, 1), Err(Error::Integrity(_))));
        Ok(())
    }

    #[test]
    fn file_round_trip() -> Result<()> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("c.bin");
        let c = sample();
        c.save(&path, MAGIC, 3)?;
        assert_eq!(Container::load(&path, MAGIC, 3)?, c);
        Ok(())
    }
}
