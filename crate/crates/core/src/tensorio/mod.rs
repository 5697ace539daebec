//! On-disk formats: LFPA activation datasets, reward lexicons, contrastive
//! JSONL and the named-section checkpoint container.
//!
//! # LFPA v1
//!
//! All integers little-endian.
//!
//! | bytes            | content                                           |
//! |------------------|---------------------------------------------------|
//! | 4                | magic `LFPA`                                      |
//! | 4                | `u32` version, always 1                           |
//! | 4 + k            | `u32` model id length, then UTF-8 model id        |
//! | 4                | `u32` layer index                                 |
//! | 8                | `u64` rows `m`                                    |
//! | 8                | `u64` hidden dim `n`                              |
//! | 4                | `u32` flags: bit 0 token ids, bit 1 sequence ids  |
//! | 4·m·n            | row-major `f32` activations                       |
//! | 4·m (optional)   | `u32` token ids                                   |
//! | 4·m (optional)   | `u32` sequence ids                                |
//! | 8                | `u64` FNV-1a 64 of every byte after the header    |
//!
//! The checksum covers the activation payload and the optional id arrays.

mod container;
mod contrastive;
mod lexicon;
mod vocab;

use std::fs;
use std::path::Path;

pub use container::{Container, MAGIC_DICTIONARY, MAGIC_MODEL, MAGIC_PROBE, MAGIC_SAE};
pub use contrastive::{
    load_contrastive, parse_contrastive, write_contrastive, ContrastiveTriple, TripleMode,
};
pub use lexicon::{load_lexicon, parse_lexicon, RewardLexicon};
pub use vocab::Vocabulary;

use crate::error::{Error, Result};
use crate::numerics::{fnv1a64, Matrix};

pub const LFPA_MAGIC: &[u8; 4] = b"LFPA";
pub const LFPA_VERSION: u32 = 1;

const FLAG_TOKEN_IDS: u32 = 1;
const FLAG_SEQUENCE_IDS: u32 = 2;

/// Sampled MLP activations for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDataset {
    pub model_id: String,
    pub layer_index: u32,
    pub hidden_dim: usize,
    pub rows: usize,
    /// Row-major, `rows × hidden_dim`.
    pub data: Vec<f32>,
    pub token_ids: Option<Vec<u32>>,
    pub sequence_ids: Option<Vec<u32>>,
}

impl ActivationDataset {
    pub fn new(model_id: impl Into<String>, layer_index: u32, matrix: &Matrix) -> Self {
        ActivationDataset {
            model_id: model_id.into(),
            layer_index,
            hidden_dim: matrix.cols(),
            rows: matrix.rows(),
            data: matrix.as_slice().iter().map(|&v| v as f32).collect(),
            token_ids: None,
            sequence_ids: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.rows * self.hidden_dim {
            return Err(Error::shape(format!(
                "{} values for a {}x{} dataset",
                self.data.len(),
                self.rows,
                self.hidden_dim
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: i / self.hidden_dim.max(1),
                col: i % self.hidden_dim.max(1),
            });
        }
        for (name, ids) in [
            ("token_ids", &self.token_ids),
            ("sequence_ids", &self.sequence_ids),
        ] {
            if let Some(ids) = ids {
                if ids.len() != self.rows {
                    return Err(Error::shape(format!(
                        "{name} has {} entries for {} rows",
                        ids.len(),
                        self.rows
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.hidden_dim..(r + 1) * self.hidden_dim]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.hidden_dim,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("validated dataset shape")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(48 + self.model_id.len() + self.data.len() * 4);
        out.extend_from_slice(LFPA_MAGIC);
        out.extend_from_slice(&LFPA_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.model_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.model_id.as_bytes());
        out.extend_from_slice(&self.layer_index.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.hidden_dim as u64).to_le_bytes());
        let mut flags = 0u32;
        if self.token_ids.is_some() {
            flags |= FLAG_TOKEN_IDS;
        }
        if self.sequence_ids.is_some() {
            flags |= FLAG_SEQUENCE_IDS;
        }
        out.extend_from_slice(&flags.to_le_bytes());
        let body_start = out.len();
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for ids in [&self.token_ids, &self.sequence_ids].into_iter().flatten() {
            for id in ids {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        let checksum = fnv1a64(&out[body_start..]);
        out.extend_from_slice(&checksum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(LFPA_MAGIC)?;
        let version = r.u32("version")?;
        if version != LFPA_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let id_len = r.u32("model id length")? as usize;
        let model_id = String::from_utf8(r.take(id_len, "model id")?.to_vec())
            .map_err(|_| Error::invalid("model id is not UTF-8"))?;
        let layer_index = r.u32("layer index")?;
        let rows = r.u64("rows")? as usize;
        let hidden_dim = r.u64("hidden dim")? as usize;
        let flags = r.u32("flags")?;
        let body_start = r.pos;

        let n_values = rows
            .checked_mul(hidden_dim)
            .ok_or_else(|| Error::invalid("header dimensions overflow"))?;
        let payload = r.take(n_values * 4, "activation payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut read_ids = |present: bool, what: &str| -> Result<Option<Vec<u32>>> {
            if !present {
                return Ok(None);
            }
            let raw = r.take(rows * 4, what)?;
            Ok(Some(
                raw.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ))
        };
        let token_ids = read_ids(flags & FLAG_TOKEN_IDS != 0, "token ids")?;
        let sequence_ids = read_ids(flags & FLAG_SEQUENCE_IDS != 0, "sequence ids")?;
        let body_end = r.pos;
        let stored = r.u64("checksum")?;
        let computed = fnv1a64(&bytes[body_start..body_end]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid(format!(
                "{} trailing bytes after checksum",
                bytes.len() - r.pos
            )));
        }
        let ds = ActivationDataset {
            model_id,
            layer_index,
            hidden_dim,
            rows,
            data,
            token_ids,
            sequence_ids,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Writes `dataset` as LFPA v1. Invalid datasets are rejected before the
/// file is created.
pub fn write_activations(dataset: &ActivationDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = dataset.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_activations(path: impl AsRef<Path>) -> Result<ActivationDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ActivationDataset::from_bytes(&bytes)
}

/// Whitespace tokenization with lowercase normalization, the lookup
/// convention shared by lexicons, contrastive data and the toy vocabulary.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = &self.bytes[..self.bytes.len().min(4)];
        if found != magic {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: found.to_vec(),
            });
        }
        self.pos = 4;
        Ok(())
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ActivationDataset {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        ActivationDataset::new("toy", 2, &m)
    }

    #[test]
    fn layout_is_header_payload_checksum() {
        let ds = sample();
        let bytes = ds.to_bytes().unwrap();
        let header = 4 + 4 + 4 + 3 + 4 + 8 + 8 + 4;
        assert_eq!(bytes.len(), header + 24 + 8);
        assert_eq!(&bytes[..4], b"LFPA");
        assert_eq!(&bytes[header..header + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_nan_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.lfpa");
        let mut ds = sample();
        ds.data[4] = f32::NAN;
        let err = write_activations(&ds, &path).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, col: 1 }));
        assert!(!path.exists());
    }

    #[test]
    fn round_trip_with_ids() {
        let mut ds = sample();
        ds.token_ids = Some(vec![7, 9]);
        ds.sequence_ids = Some(vec![0, 0]);
        let back = ActivationDataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn distinct_read_errors() {
        assert!(matches!(
            ActivationDataset::from_bytes(&[]),
            Err(Error::BadMagic { .. })
        ));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            ActivationDataset::from_bytes(&bytes),
            Err(Error::UnsupportedVersion(2))
        ));
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            ActivationDataset::from_bytes(&bytes[..bytes.len() - 12]),
            Err(Error::Truncated(_))
        ));
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 12] ^= 0x01;
        assert!(matches!(
            ActivationDataset::from_bytes(&bytes),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn mismatched_id_length_is_invalid() {
        let mut ds = sample();
        ds.token_ids = Some(vec![1]);
        assert!(matches!(ds.validate(), Err(Error::Shape(_))));
    }

    #[test]
    fn tokenize_lowercases() {
        assert_eq!(
            tokenize("That  Movie was GREAT"),
            ["that", "movie", "was", "great"]
        );
    }
}
