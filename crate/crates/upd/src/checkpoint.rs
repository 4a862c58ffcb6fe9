//! Parameter persistence and integrity hashing.
//!
//! Checkpoints are JSON with each matrix stored as a base64 blob of
//! little-endian 64-bit floats, so a save and load round-trips every bit.
//! The fingerprint is the tamper check used to prove frozen weights never
//! moved during adapter training.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, UpdError};
use crate::numerics::{DenseMatrix, Params};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoredMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Base64 of the row-major values as little-endian f64 bytes.
    pub data: String,
}

impl StoredMatrix {
    fn from_matrix(m: &DenseMatrix) -> Self {
        let mut bytes = Vec::with_capacity(m.data().len() * 8);
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        StoredMatrix {
            rows: m.rows(),
            cols: m.cols(),
            data: BASE64.encode(bytes),
        }
    }

    fn to_matrix(&self, name: &str) -> Result<DenseMatrix> {
        let bytes = BASE64.decode(&self.data).map_err(|e| UpdError::MalformedData {
            path: name.to_string(),
            detail: format!("bad base64 payload: {e}"),
        })?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(UpdError::MalformedData {
                path: name.to_string(),
                detail: format!(
                    "payload holds {} bytes, shape ({}, {}) needs {}",
                    bytes.len(),
                    self.rows,
                    self.cols,
                    self.rows * self.cols * 8
                ),
            });
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
            .collect();
        DenseMatrix::new(self.rows, self.cols, values)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub params: BTreeMap<String, StoredMatrix>,
}

pub fn save_checkpoint(path: &Path, params: &Params, config_hash: &str, seed: u64) -> Result<()> {
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        params: params
            .iter()
            .map(|(name, m)| (name.clone(), StoredMatrix::from_matrix(m)))
            .collect(),
    };
    let text = serde_json::to_string(&checkpoint)?;
    std::fs::write(path, text).map_err(|e| UpdError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Params, Checkpoint)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| UpdError::io(path.display().to_string(), e))?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).map_err(|e| UpdError::MalformedData {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    if checkpoint.format_version != CHECKPOINT_VERSION {
        return Err(UpdError::MalformedData {
            path: path.display().to_string(),
            detail: format!(
                "checkpoint format {} unsupported, expected {}",
                checkpoint.format_version, CHECKPOINT_VERSION
            ),
        });
    }
    let mut params = Params::new();
    for (name, stored) in &checkpoint.params {
        params.insert(name.clone(), stored.to_matrix(name)?);
    }
    Ok((params, checkpoint))
}

/// SHA-256 over names, shapes, and exact value bits of every parameter the
/// filter keeps. Two maps fingerprint equal iff the kept entries are
/// bitwise identical.
pub fn fingerprint_params<F>(params: &Params, mut keep: F) -> String
where
    F: FnMut(&str) -> bool,
{
    let mut hasher = Sha256::new();
    for (name, m) in params {
        if !keep(name) {
            continue;
        }
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((m.rows() as u64).to_le_bytes());
        hasher.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint of the frozen decoder weights only.
pub fn base_fingerprint(params: &Params) -> String {
    fingerprint_params(params, |name| name.starts_with("vlm."))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::random::{gaussian_matrix, rng_from_seed};

    fn sample_params() -> Params {
        let mut rng = rng_from_seed(3);
        let mut params = Params::new();
        params.insert("vlm.a".into(), gaussian_matrix(&mut rng, 3, 4, 1.0));
        params.insert("vlm.b".into(), gaussian_matrix(&mut rng, 2, 2, 1.0));
        params.insert("proj.w".into(), gaussian_matrix(&mut rng, 4, 3, 1.0));
        params
    }

    #[test]
    fn save_and_load_round_trip_every_bit() {
        let mut params = sample_params();
        // negative zero and subnormals must survive
        params.get_mut("vlm.a").unwrap().set(0, 0, -0.0);
        params.get_mut("vlm.a").unwrap().set(0, 1, 5e-324);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &params, "abc123", 7).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.config_hash, "abc123");
        assert_eq!(meta.seed, 7);
        assert_eq!(loaded.len(), params.len());
        for (name, m) in &params {
            let l = &loaded[name];
            assert_eq!(l.shape(), m.shape());
            for (a, b) in l.data().iter().zip(m.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn fingerprint_sees_single_bit_flips() {
        let params = sample_params();
        let before = fingerprint_params(&params, |_| true);
        let mut tweaked = params.clone();
        let v = tweaked.get_mut("vlm.b").unwrap().get(1, 1);
        tweaked
            .get_mut("vlm.b")
            .unwrap()
            .set(1, 1, f64::from_bits(v.to_bits() ^ 1));
        let after = fingerprint_params(&tweaked, |_| true);
        assert_ne!(before, after);
        assert_eq!(before, fingerprint_params(&params.clone(), |_| true));
    }

    #[test]
    fn base_fingerprint_ignores_non_frozen_names() {
        let params = sample_params();
        let before = base_fingerprint(&params);
        let mut with_extra = params.clone();
        with_extra
            .get_mut("proj.w")
            .unwrap()
            .set(0, 0, 99.0);
        with_extra.insert("adapter.x.a".into(), DenseMatrix::zeros(2, 2));
        assert_eq!(base_fingerprint(&with_extra), before);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let stored = StoredMatrix {
            rows: 2,
            cols: 2,
            data: BASE64.encode([0u8; 8]),
        };
        assert!(stored.to_matrix("x").is_err());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let checkpoint = Checkpoint {
            format_version: 99,
            config_hash: String::new(),
            seed: 0,
            params: BTreeMap::new(),
        };
        std::fs::write(&path, serde_json::to_string(&checkpoint).unwrap()).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
