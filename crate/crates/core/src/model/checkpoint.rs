//! Parameter checkpoints.
//!
//! Layout on disk: the 8 magic bytes `METASEP1`, a little-endian `u64`
//! header length, a JSON header (separator config, free-form metadata,
//! config hash, parameter layout, dimension), then `dim` little-endian
//! `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::SeparatorConfig;
use crate::autodiff::{Layout, ParamVector};

const MAGIC: &[u8; 8] = b"METASEP1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file")]
    BadMagic { path: String },
    #[error("{path}: malformed header: {detail}")]
    Header { path: String, detail: String },
    #[error("{path}: expected {expected} parameter bytes, found {found}")]
    Truncated { path: String, expected: u64, found: u64 },
}

/// Trained parameters together with everything needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub separator: SeparatorConfig,
    /// Training metadata (mode, optimizer settings, epoch, ...).
    pub meta: serde_json::Value,
    pub params: ParamVector,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    separator: SeparatorConfig,
    meta: serde_json::Value,
    config_hash: String,
    layout: Layout,
    dim: usize,
}

/// Short hex digest identifying a (separator, metadata) configuration.
pub fn config_hash(separator: &SeparatorConfig, meta: &serde_json::Value) -> String {
    let canonical = serde_json::json!({ "separator": separator, "meta": meta }).to_string();
    let digest = Sha256::digest(canonical.as_bytes());
    hex::encode(&digest[..8])
}

impl Checkpoint {
    pub fn new(separator: SeparatorConfig, meta: serde_json::Value, params: ParamVector) -> Self {
        Self {
            separator,
            meta,
            params,
        }
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.separator, &self.meta)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            separator: self.separator.clone(),
            meta: self.meta.clone(),
            config_hash: self.config_hash(),
            layout: self.params.layout().clone(),
            dim: self.params.dim(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * header.dim);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self, CheckpointError> {
        let header_err = |detail: String| CheckpointError::Header {
            path: path.to_string(),
            detail,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic { path: path.to_string() });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(header_err(format!("header length {hlen} exceeds file size")));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| header_err(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(header_err(format!("unsupported format version {}", header.format_version)));
        }
        if header.layout.dim() != header.dim {
            return Err(header_err("layout size disagrees with dim".into()));
        }
        if config_hash(&header.separator, &header.meta) != header.config_hash {
            return Err(header_err("config hash mismatch".into()));
        }
        let raw = &body[hlen..];
        let expected = 8 * header.dim as u64;
        if raw.len() as u64 != expected {
            return Err(CheckpointError::Truncated {
                path: path.to_string(),
                expected,
                found: raw.len() as u64,
            });
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let params = ParamVector::new(header.layout, values).map_err(|e| header_err(e.to_string()))?;
        Ok(Self {
            separator: header.separator,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(&self.to_bytes()).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(io)?)
            .read_to_end(&mut bytes)
            .map_err(io)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = SeparatorConfig::tiny();
        let mut params = cfg.init_params(5);
        params.values_mut()[0] = 1.0 / 3.0;
        params.values_mut()[1] = -0.0;
        Checkpoint::new(cfg, serde_json::json!({"mode": "joint", "epoch": 3}), params)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.separator, ck.separator);
        assert_eq!(back.meta, ck.meta);
        let bits = |p: &ParamVector| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&ck.params));
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corruption_detected() {
        let ck = sample();
        let mut bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "x"),
            Err(CheckpointError::Truncated { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes, "x"), Err(CheckpointError::BadMagic { .. })));
    }

    #[test]
    fn hash_tracks_config() {
        let a = sample();
        let mut b = sample();
        b.meta["epoch"] = serde_json::json!(4);
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 16);
    }
}
