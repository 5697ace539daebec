//! Named-section checkpoint container shared by model (`LFPM`), autoencoder
//! (`LFPS`), dictionary (`LFPD`) and probe (`LFPP`) files.
//!
//! Layout, little-endian: magic (4), `u32` version = 1, `u32` metadata
//! length + compact JSON metadata, `u32` section count, then per section
//! `u32` name length + UTF-8 name, `u64` rows, `u64` cols and `rows·cols`
//! `f64` values, and finally a `u64` FNV-1a 64 checksum of every byte
//! between the version field and the checksum.

use std::fs;
use std::path::Path;

use serde_json::Value;

use super::ByteReader;
use crate::error::{Error, Result};
use crate::numerics::{fnv1a64, Matrix};

pub const MAGIC_MODEL: &[u8; 4] = b"LFPM";
pub const MAGIC_SAE: &[u8; 4] = b"LFPS";
pub const MAGIC_DICTIONARY: &[u8; 4] = b"LFPD";
pub const MAGIC_PROBE: &[u8; 4] = b"LFPP";

const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub metadata: Value,
    pub sections: Vec<(String, Matrix)>,
}

impl Container {
    pub fn new(magic: &[u8; 4], metadata: Value) -> Self {
        Container {
            magic: *magic,
            metadata,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.sections.push((name.into(), m));
    }

    pub fn section(&self, name: &str) -> Result<&Matrix> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::invalid(format!("missing section {name:?}")))
    }

    pub fn take_section(&mut self, name: &str) -> Result<Matrix> {
        let idx = self
            .sections
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::invalid(format!("missing section {name:?}")))?;
        Ok(self.sections.remove(idx).1)
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.metadata
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| {
                Error::invalid(format!("metadata key {key:?} missing or not an integer"))
            })
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.metadata
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::invalid(format!("metadata key {key:?} missing or not a number")))
    }

    pub fn meta_bool(&self, key: &str) -> Result<bool> {
        self.metadata
            .get(key)
            .and_then(Value::as_bool)
            .ok_or_else(|| Error::invalid(format!("metadata key {key:?} missing or not a bool")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let body_start = out.len();
        let meta = self.metadata.to_string();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, m) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum = fnv1a64(&out[body_start..]);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(magic: &[u8; 4], bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(magic)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let body_start = r.pos();
        let meta_len = r.u32("metadata length")? as usize;
        let metadata: Value = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::invalid(format!("metadata: {e}")))?;
        let count = r.u32("section count")? as usize;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32("section name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "section name")?.to_vec())
                .map_err(|_| Error::invalid("section name is not UTF-8"))?;
            let rows = r.u64("section rows")? as usize;
            let cols = r.u64("section cols")? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::invalid("section dimensions overflow"))?;
            let raw = r.take(n, &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            sections.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        let body_end = r.pos();
        let stored = r.u64("checksum")?;
        let computed = fnv1a64(&bytes[body_start..body_end]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        Ok(Container {
            magic: *magic,
            metadata,
            sections,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(magic: &[u8; 4], path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(magic, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut c = Container::new(MAGIC_PROBE, json!({"kind": "linear", "dim": 3}));
        c.push("weights", Matrix::row_vector(&[0.5, -1.0, 2.0]));
        c.push("bias", Matrix::row_vector(&[0.25]));
        let bytes = c.to_bytes();
        let back = Container::from_bytes(MAGIC_PROBE, &bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta_u64("dim").unwrap(), 3);

        assert!(matches!(
            Container::from_bytes(MAGIC_MODEL, &bytes),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 10] ^= 0x40;
        assert!(matches!(
            Container::from_bytes(MAGIC_PROBE, &bad),
            Err(Error::ChecksumMismatch { .. })
        ));
    }
}
