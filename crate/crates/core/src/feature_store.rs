//! Feature matrices, dataset manifests and their on-disk formats.
//!
//! A feature file is a flat little-endian container:
//!
//! ```text
//! "FEATMAT1" | version: u32 = 1 | n_samples: u64 | n_dims: u64
//! | values: n_samples * n_dims f32, row-major
//! | ids: n_samples * (len: u16, utf-8 bytes)
//! ```
//!
//! The manifest lives next to it as JSON lines, one [`ManifestEntry`] per row.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{self, Reader};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"FEATMAT1";
pub const FEATURE_VERSION: u32 = 1;

/// Dense row-major `f32` matrix with one unique id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_samples: usize,
    n_dims: usize,
    values: Vec<f32>,
    ids: Vec<String>,
}

impl FeatureMatrix {
    /// Builds and validates a matrix. Rejects empty matrices, non-finite
    /// values, and duplicate or miscounted ids.
    pub fn new(n_dims: usize, values: Vec<f32>, ids: Vec<String>) -> Result<Self> {
        if n_dims == 0 {
            return Err(Error::Format("n_dims must be at least 1".into()));
        }
        if values.len() % n_dims != 0 {
            return Err(Error::Format(format!(
                "{} values do not fill rows of width {n_dims}",
                values.len()
            )));
        }
        let m = FeatureMatrix {
            n_samples: values.len() / n_dims,
            n_dims,
            values,
            ids,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f32>], ids: Vec<String>) -> Result<Self> {
        let n_dims = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != n_dims) {
            return Err(Error::Format(format!(
                "row {bad} has {} values, expected {n_dims}",
                rows[bad].len()
            )));
        }
        Self::new(n_dims, rows.concat(), ids)
    }

    /// A zero-row matrix; only useful as a merge operand.
    pub fn empty(n_dims: usize) -> Self {
        FeatureMatrix {
            n_samples: 0,
            n_dims,
            values: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Format("feature matrix has no rows".into()));
        }
        self.validate_contents()
    }

    fn validate_contents(&self) -> Result<()> {
        if self.ids.len() != self.n_samples {
            return Err(Error::Alignment(format!(
                "{} ids for {} rows",
                self.ids.len(),
                self.n_samples
            )));
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / self.n_dims,
                col: pos % self.n_dims,
            });
        }
        let mut seen = HashSet::with_capacity(self.ids.len());
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Alignment(format!("duplicate sample id {id:?}")));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n_dims..(i + 1) * self.n_dims]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.values.chunks_exact(self.n_dims)
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<FeatureMatrix> {
        let mut values = Vec::with_capacity(rows.len() * self.n_dims);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            values.extend_from_slice(self.row(r));
            ids.push(self.ids[r].clone());
        }
        FeatureMatrix::new(self.n_dims, values, ids)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(28 + self.values.len() * 4 + self.ids.len() * 10);
        out.extend_from_slice(FEATURE_MAGIC);
        binfmt::put_u32(&mut out, FEATURE_VERSION);
        binfmt::put_u64(&mut out, self.n_samples as u64);
        binfmt::put_u64(&mut out, self.n_dims as u64);
        binfmt::put_f32s(&mut out, &self.values);
        for id in &self.ids {
            binfmt::put_string(&mut out, id)?;
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "feature file");
        r.magic(FEATURE_MAGIC)?;
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!("unsupported feature file version {version}")));
        }
        let n = usize::try_from(r.u64()?).map_err(|_| Error::Format("n_samples overflow".into()))?;
        let d = usize::try_from(r.u64()?).map_err(|_| Error::Format("n_dims overflow".into()))?;
        if n == 0 || d == 0 {
            return Err(Error::Format(format!("empty matrix header ({n} x {d})")));
        }
        let count = n
            .checked_mul(d)
            .ok_or_else(|| Error::Format("matrix size overflow".into()))?;
        let values = r.f32s(count)?;
        // Validate values before reading ids so a NaN is reported by row even
        // when the id block is also damaged.
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / d,
                col: pos % d,
            });
        }
        let mut ids = Vec::with_capacity(n);
        while r.remaining() > 0 {
            ids.push(r.string()?);
        }
        r.finish()?;
        FeatureMatrix::new(d, values, ids)
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    FeatureMatrix::from_bytes(&binfmt::read_file(path)?)
}

pub fn save_features(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, m.to_bytes()?).map_err(|e| Error::io(path, e))
}

/// Per-sample metadata. Field names are the JSON-lines schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default)]
    pub image_path: Option<String>,
    #[serde(default)]
    pub view_label: Option<String>,
    #[serde(default)]
    pub patient_id: Option<String>,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub is_seed: bool,
}

impl ManifestEntry {
    pub fn bare(id: impl Into<String>, source: impl Into<String>) -> Self {
        ManifestEntry {
            id: id.into(),
            image_path: None,
            view_label: None,
            patient_id: None,
            source: source.into(),
            is_seed: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest { entries };
        m.check_unique()?;
        Ok(m)
    }

    /// Minimal manifest for a matrix that came without one.
    pub fn from_ids(ids: &[String], source: &str) -> Self {
        DatasetManifest {
            entries: ids.iter().map(|id| ManifestEntry::bare(id, source)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Alignment(format!("duplicate manifest id {:?}", e.id)));
            }
        }
        Ok(())
    }

    /// Checks that the manifest lists exactly the matrix ids, in order.
    pub fn check_aligned(&self, ids: &[String]) -> Result<()> {
        if self.entries.len() != ids.len() {
            return Err(Error::Alignment(format!(
                "manifest has {} entries, matrix has {} rows",
                self.entries.len(),
                ids.len()
            )));
        }
        for (row, (e, id)) in self.entries.iter().zip(ids).enumerate() {
            if &e.id != id {
                return Err(Error::Alignment(format!(
                    "row {row}: manifest id {:?} does not match matrix id {id:?}",
                    e.id
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Format(format!("manifest line {}: {e}", lineno + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("manifest line {}: {e}", lineno + 1)))?;
            entries.push(entry);
        }
        DatasetManifest::new(entries)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_jsonl(BufReader::new(f))
}

pub fn save_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&m.to_jsonl()?).map_err(|e| Error::io(path, e))
}

/// A feature matrix paired with its row-aligned manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: FeatureMatrix,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn new(features: FeatureMatrix, manifest: DatasetManifest) -> Result<Self> {
        manifest.check_aligned(features.ids())?;
        Ok(Dataset { features, manifest })
    }

    /// Pairs a matrix with a synthesized manifest tagged `source`.
    pub fn unlabeled(features: FeatureMatrix, source: &str) -> Self {
        let manifest = DatasetManifest::from_ids(features.ids(), source);
        Dataset { features, manifest }
    }

    pub fn load(features: impl AsRef<Path>, manifest: Option<&Path>) -> Result<Self> {
        let features = load_features(features)?;
        match manifest {
            Some(p) => Dataset::new(features, load_manifest(p)?),
            None => Ok(Dataset::unlabeled(features, "unknown")),
        }
    }

    pub fn len(&self) -> usize {
        self.features.n_samples()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub const TARGET_PREFIX: &str = "target/";
pub const SEEDS_PREFIX: &str = "seeds/";

/// Appends `seeds` to `target`, marking every seed row with `is_seed` and
/// `view_label = seed_label`. Ids present in both inputs are renamed to
/// `target/<id>` and `seeds/<id>`; all other ids are kept.
pub fn merge_datasets(target: &Dataset, seeds: &Dataset, seed_label: &str) -> Result<Dataset> {
    let d_t = target.features.n_dims();
    let d_s = seeds.features.n_dims();
    if d_t != d_s {
        return Err(Error::DimensionMismatch {
            target: d_t,
            seeds: d_s,
        });
    }
    let target_ids: HashSet<&str> = target.features.ids().iter().map(String::as_str).collect();
    let seed_ids: HashSet<&str> = seeds.features.ids().iter().map(String::as_str).collect();
    let clash = |id: &str| target_ids.contains(id) && seed_ids.contains(id);

    let n = target.len() + seeds.len();
    let mut values = Vec::with_capacity(n * d_t);
    values.extend_from_slice(target.features.values());
    values.extend_from_slice(seeds.features.values());

    let mut entries = Vec::with_capacity(n);
    for e in &target.manifest.entries {
        let mut e = e.clone();
        if clash(&e.id) {
            e.id = format!("{TARGET_PREFIX}{}", e.id);
        }
        entries.push(e);
    }
    for e in &seeds.manifest.entries {
        let mut e = e.clone();
        if clash(&e.id) {
            e.id = format!("{SEEDS_PREFIX}{}", e.id);
        }
        e.is_seed = true;
        e.view_label = Some(seed_label.to_string());
        entries.push(e);
    }
    let ids = entries.iter().map(|e| e.id.clone()).collect();
    let features = FeatureMatrix::new(d_t, values, ids)?;
    Dataset::new(features, DatasetManifest::new(entries)?)
}
