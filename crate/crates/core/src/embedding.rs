//! 2-D embeddings and their file format.
//!
//! ```text
//! "EMBED2D1" | n: u64 | n * (x: f32, y: f32) | config hash (len: u16, utf-8)
//! ```
//!
//! A JSON sidecar records the method and the parameters that matter for
//! comparing runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binfmt::{self, Reader};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"EMBED2D1";

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    coords: Vec<[f32; 2]>,
    pub method: String,
    pub config_hash: String,
    pub rng_seed: u64,
}

impl Embedding {
    pub fn new(
        coords: Vec<[f32; 2]>,
        method: impl Into<String>,
        config_hash: impl Into<String>,
        rng_seed: u64,
    ) -> Result<Self> {
        if let Some(row) = coords.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Numeric(format!("non-finite embedding coordinate at row {row}")));
        }
        Ok(Embedding {
            coords,
            method: method.into(),
            config_hash: config_hash.into(),
            rng_seed,
        })
    }

    pub(crate) fn from_f64(coords: &[[f64; 2]], method: &str, config_hash: &str, rng_seed: u64) -> Result<Self> {
        let coords = coords.iter().map(|p| [p[0] as f32, p[1] as f32]).collect();
        Self::new(coords, method, config_hash, rng_seed)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f32; 2]] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.coords[i][0] as f64, self.coords[i][1] as f64]
    }

    pub fn to_f64(&self) -> Vec<[f64; 2]> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + 8 * self.coords.len() + 2 + self.config_hash.len());
        out.extend_from_slice(EMBEDDING_MAGIC);
        binfmt::put_u64(&mut out, self.coords.len() as u64);
        for p in &self.coords {
            binfmt::put_f32s(&mut out, p);
        }
        binfmt::put_string(&mut out, &self.config_hash)?;
        Ok(out)
    }

    /// Method and seed are not part of the binary file; see [`EmbeddingSidecar`].
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "embedding file");
        r.magic(EMBEDDING_MAGIC)?;
        let n = usize::try_from(r.u64()?).map_err(|_| Error::Format("n overflow".into()))?;
        let flat = r.f32s(n.checked_mul(2).ok_or_else(|| Error::Format("n overflow".into()))?)?;
        let hash = r.string()?;
        r.finish()?;
        let coords = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        Embedding::new(coords, "unknown", hash, 0)
    }

    /// Binary payload for clients: `n * (f32, f32)` followed by the id block
    /// (`u16` length + utf-8 per id).
    pub fn payload_with_ids(&self, ids: &[String]) -> Result<Vec<u8>> {
        if ids.len() != self.len() {
            return Err(Error::Alignment(format!(
                "{} ids for {} embedded points",
                ids.len(),
                self.len()
            )));
        }
        let mut out = Vec::with_capacity(8 * self.len() + ids.iter().map(|s| s.len() + 2).sum::<usize>());
        for p in &self.coords {
            binfmt::put_f32s(&mut out, p);
        }
        for id in ids {
            binfmt::put_string(&mut out, id)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub method: String,
    pub k: Option<usize>,
    pub min_dist: Option<f64>,
    pub n_epochs: Option<usize>,
    pub rng_seed: u64,
    #[serde(default)]
    pub config_hash: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the binary file and its `<path>.json` sidecar.
pub fn save_embedding(e: &Embedding, sidecar: &EmbeddingSidecar, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, e.to_bytes()?).map_err(|err| Error::io(path, err))?;
    let side = sidecar_path(path);
    let json = serde_json::to_vec_pretty(sidecar)?;
    std::fs::write(&side, json).map_err(|err| Error::io(&side, err))
}

/// Reads an embedding, filling method and seed from the sidecar when present.
pub fn load_embedding(path: impl AsRef<Path>) -> Result<Embedding> {
    let path = path.as_ref();
    let mut e = Embedding::from_bytes(&binfmt::read_file(path)?)?;
    let side = sidecar_path(path);
    if side.exists() {
        let bytes = binfmt::read_file(&side)?;
        let meta: EmbeddingSidecar = serde_json::from_slice(&bytes)?;
        e.method = meta.method;
        e.rng_seed = meta.rng_seed;
    }
    Ok(e)
}

/// Short stable digest of a serializable configuration.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&json);
    hex::encode(&digest[..8])
}

/// Rescales coordinates so the largest absolute value equals `bound`.
pub(crate) fn scale_to_box(coords: &mut [[f64; 2]], bound: f64) {
    let max = coords
        .iter()
        .flat_map(|p| [p[0].abs(), p[1].abs()])
        .fold(0.0f64, f64::max);
    if max > 0.0 {
        let s = bound / max;
        for p in coords.iter_mut() {
            p[0] *= s;
            p[1] *= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        let e = Embedding::new(vec![[1.0, -2.0], [0.5, 3.25]], "umap", "abc123", 7).unwrap();
        let side = EmbeddingSidecar {
            method: "umap".into(),
            k: Some(10),
            min_dist: Some(0.001),
            n_epochs: Some(300),
            rng_seed: 7,
            config_hash: "abc123".into(),
        };
        save_embedding(&e, &side, &path).unwrap();
        assert_eq!(load_embedding(&path).unwrap(), e);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"EMBED2D1");
        assert_eq!(bytes.len(), 8 + 8 + 16 + 2 + 6);
    }

    #[test]
    fn payload_length_is_8n_plus_id_block() {
        let e = Embedding::new(vec![[0.0, 0.0]; 3], "pca", "h", 0).unwrap();
        let ids: Vec<String> = vec!["a".into(), "bb".into(), "ccc".into()];
        let p = e.payload_with_ids(&ids).unwrap();
        assert_eq!(p.len(), 8 * 3 + (2 + 1) + (2 + 2) + (2 + 3));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Embedding::new(vec![[f32::NAN, 0.0]], "x", "", 0).is_err());
    }
}
