//! Run directories: one flat directory per run id holding every artifact of
//! a pipeline invocation plus a `run.json` record of its progress.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binfmt;
use crate::embedding::{config_hash, load_embedding, save_embedding, Embedding};
use crate::error::{Error, Result};
use crate::feature_store::{load_manifest, save_manifest, Dataset, DatasetManifest};
use crate::neighbor_graph::NeighborGraph;
use crate::pipeline::{embed, EmbedConfig};
use crate::satellite::{detect, outlier_manifest, ClusterReport, DetectConfig, OutlierEntry};
use crate::seed_probe::{run_seed_probe, ProbeConfig, SeedProbeResult, SEED_PROBE_STAGES};

pub const RECORD_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.json";
pub const EMBEDDING_FILE: &str = "embedding.emb";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const GRAPH_FILE: &str = "knn.graph";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const FLAGS_FILE: &str = "flags.json";
pub const PROBE_FILE: &str = "probe_result.json";
pub const MERGED_FEATURES_FILE: &str = "merged.featmat";
pub const MERGED_MANIFEST_FILE: &str = "merged.manifest.jsonl";

pub use crate::binfmt::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Embed,
    SeedProbe,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    pub fn digest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = binfmt::read_file(path)?;
        let abs = std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf());
        Ok(InputFile {
            path: abs,
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub kind: RunKind,
    /// RFC 3339, UTC.
    pub created_at: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, InputFile>,
    /// Stage names in execution order.
    pub stages: Vec<String>,
    pub stage_status: BTreeMap<String, StageStatus>,
    /// Artifact name to file name inside the run directory.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

/// Content hash of the run kind, configuration and input digests. Paths and
/// timestamps do not contribute.
pub fn compute_run_id<C: Serialize>(kind: RunKind, config: &C, inputs: &BTreeMap<String, InputFile>) -> String {
    let digests: BTreeMap<&str, &str> = inputs.iter().map(|(k, v)| (k.as_str(), v.sha256.as_str())).collect();
    config_hash(&(kind, config, digests))
}

impl RunRecord {
    pub fn new<C: Serialize>(
        kind: RunKind,
        config: &C,
        inputs: BTreeMap<String, InputFile>,
        stages: &[&str],
    ) -> Result<Self> {
        Ok(RunRecord {
            run_id: compute_run_id(kind, config, &inputs),
            kind,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config: serde_json::to_value(config)?,
            inputs,
            stages: stages.iter().map(|s| s.to_string()).collect(),
            stage_status: stages.iter().map(|s| (s.to_string(), StageStatus::Pending)).collect(),
            artifacts: BTreeMap::new(),
            error: None,
            parent: None,
        })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(RECORD_FILE);
        Ok(serde_json::from_slice(&binfmt::read_file(&path)?)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_atomic(&dir.as_ref().join(RECORD_FILE), &serde_json::to_vec_pretty(self)?)
    }

    pub fn is_done(&self) -> bool {
        self.stage_status.values().all(|&s| s == StageStatus::Done)
    }

    pub fn is_failed(&self) -> bool {
        self.stage_status.values().any(|&s| s == StageStatus::Failed)
    }

    pub fn mark_all_done(&mut self) {
        self.stage_status.values_mut().for_each(|s| *s = StageStatus::Done);
        self.error = None;
    }

    /// Stages before `stage` become done, `stage` failed, later ones stay pending.
    pub fn mark_failed(&mut self, stage: &str, err: &Error) {
        for name in &self.stages {
            if name == stage {
                self.stage_status.insert(name.clone(), StageStatus::Failed);
                break;
            }
            self.stage_status.insert(name.clone(), StageStatus::Done);
        }
        self.error = Some(err.to_string());
    }

    fn fail_with(&mut self, err: &Error) {
        let stage = match err {
            Error::Stage { stage, .. } => stage.to_string(),
            _ => self.stages.first().cloned().unwrap_or_default(),
        };
        self.mark_failed(&stage, err);
    }
}

/// Every readable run under `root`, oldest first.
pub fn list_runs(root: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let root = root.as_ref();
    let mut runs = Vec::new();
    let dir = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in dir {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.join(RECORD_FILE).is_file() {
            match RunRecord::load(&path) {
                Ok(r) => runs.push(r),
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
    }
    runs.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.run_id.cmp(&b.run_id)));
    Ok(runs)
}

fn prepare_dir(root: &Path, run_id: &str) -> Result<PathBuf> {
    let dir = root.join(run_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Embeds a feature file into a new run directory under `root`.
///
/// Without a manifest, a bare one is derived from the feature ids.
pub fn execute_embed(
    root: impl AsRef<Path>,
    features: impl AsRef<Path>,
    manifest: Option<&Path>,
    cfg: &EmbedConfig,
) -> Result<(RunRecord, PathBuf)> {
    let mut inputs = BTreeMap::new();
    inputs.insert("features".to_string(), InputFile::digest(&features)?);
    if let Some(m) = manifest {
        inputs.insert("manifest".to_string(), InputFile::digest(m)?);
    }
    let data = Dataset::load(&features, manifest)?;
    let mut record = RunRecord::new(RunKind::Embed, cfg, inputs, cfg.method.stages())?;
    let dir = prepare_dir(root.as_ref(), &record.run_id)?;
    write_atomic(&dir.join(CONFIG_FILE), &serde_json::to_vec_pretty(cfg)?)?;
    save_manifest(&data.manifest, dir.join(MANIFEST_FILE))?;
    record.artifacts.insert("manifest".into(), MANIFEST_FILE.into());
    record.save(&dir)?;

    match embed(&data.features, cfg) {
        Ok(out) => {
            save_embedding(&out.embedding, &cfg.sidecar(), dir.join(EMBEDDING_FILE))?;
            record.artifacts.insert("embedding".into(), EMBEDDING_FILE.into());
            if let Some(graph) = &out.graph {
                graph.save(dir.join(GRAPH_FILE))?;
                record.artifacts.insert("knn_graph".into(), GRAPH_FILE.into());
            }
            record.mark_all_done();
            record.save(&dir)?;
            Ok((record, dir))
        }
        Err(e) => {
            record.fail_with(&e);
            record.save(&dir)?;
            Err(e)
        }
    }
}

pub struct SeedProbeInputs<'a> {
    pub target_features: &'a Path,
    pub target_manifest: Option<&'a Path>,
    pub seed_features: &'a Path,
    pub seed_manifest: Option<&'a Path>,
}

#[derive(Serialize)]
struct SeedProbeRunConfig<'a> {
    embed: &'a EmbedConfig,
    probe: &'a ProbeConfig,
}

/// Creates the run record for a seed probe without running it.
pub fn plan_seed_probe(
    inputs: &SeedProbeInputs<'_>,
    embed_cfg: &EmbedConfig,
    probe_cfg: &ProbeConfig,
) -> Result<RunRecord> {
    let mut files = BTreeMap::new();
    files.insert(
        "target_features".to_string(),
        InputFile::digest(inputs.target_features)?,
    );
    files.insert("seed_features".to_string(), InputFile::digest(inputs.seed_features)?);
    if let Some(m) = inputs.target_manifest {
        files.insert("target_manifest".to_string(), InputFile::digest(m)?);
    }
    if let Some(m) = inputs.seed_manifest {
        files.insert("seed_manifest".to_string(), InputFile::digest(m)?);
    }
    let config = SeedProbeRunConfig {
        embed: embed_cfg,
        probe: probe_cfg,
    };
    RunRecord::new(RunKind::SeedProbe, &config, files, SEED_PROBE_STAGES)
}

/// Runs a planned seed probe, keeping `run.json` current in its directory.
pub fn execute_seed_probe(
    root: impl AsRef<Path>,
    mut record: RunRecord,
    inputs: &SeedProbeInputs<'_>,
    embed_cfg: &EmbedConfig,
    probe_cfg: &ProbeConfig,
) -> Result<(RunRecord, SeedProbeResult)> {
    let dir = prepare_dir(root.as_ref(), &record.run_id)?;
    record.save(&dir)?;
    let result = Dataset::load(inputs.target_features, inputs.target_manifest)
        .and_then(|t| Dataset::load(inputs.seed_features, inputs.seed_manifest).map(|s| (t, s)))
        .map_err(|e| Error::Stage {
            stage: "merge",
            source: Box::new(e),
        })
        .and_then(|(target, seeds)| run_seed_probe(&target, &seeds, embed_cfg, probe_cfg, Some(&dir)));
    match result {
        Ok(result) => {
            for (name, file) in [
                ("merged_features", MERGED_FEATURES_FILE),
                ("manifest", MERGED_MANIFEST_FILE),
                ("embedding", EMBEDDING_FILE),
                ("probe_result", PROBE_FILE),
            ] {
                record.artifacts.insert(name.into(), file.into());
            }
            record.mark_all_done();
            record.save(&dir)?;
            Ok((record, result))
        }
        Err(e) => {
            record.fail_with(&e);
            record.save(&dir)?;
            Err(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flag {
    pub flag_id: String,
    pub cluster_id: i64,
    pub flag_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Read access to a finished run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    pub record: RunRecord,
}

impl RunDir {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let record = RunRecord::load(&path)?;
        Ok(RunDir { path, record })
    }

    fn artifact(&self, name: &str) -> Result<PathBuf> {
        let file = self
            .record
            .artifacts
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("run {} has no {name} artifact", self.record.run_id)))?;
        Ok(self.path.join(file))
    }

    pub fn embedding(&self) -> Result<Embedding> {
        load_embedding(self.artifact("embedding")?)
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        load_manifest(self.artifact("manifest")?)
    }

    pub fn graph(&self) -> Result<NeighborGraph> {
        NeighborGraph::load(self.artifact("knn_graph")?)
    }

    pub fn probe_result(&self) -> Result<SeedProbeResult> {
        let path = self.artifact("probe_result")?;
        Ok(serde_json::from_slice(&binfmt::read_file(&path)?)?)
    }

    /// The saved cluster report, or one computed with default settings.
    pub fn clusters(&self) -> Result<ClusterReport> {
        let path = self.path.join(CLUSTERS_FILE);
        if path.is_file() {
            return Ok(serde_json::from_slice(&binfmt::read_file(&path)?)?);
        }
        detect(&self.embedding()?, &self.manifest()?, &DetectConfig::default())
    }

    pub fn save_clusters(&mut self, report: &ClusterReport) -> Result<()> {
        write_atomic(&self.path.join(CLUSTERS_FILE), &serde_json::to_vec_pretty(report)?)?;
        self.record.artifacts.insert("clusters".into(), CLUSTERS_FILE.into());
        self.record.save(&self.path)
    }

    pub fn flags(&self) -> Result<Vec<Flag>> {
        let path = self.path.join(FLAGS_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        Ok(serde_json::from_slice(&binfmt::read_file(&path)?)?)
    }

    fn save_flags(&self, flags: &[Flag]) -> Result<()> {
        write_atomic(&self.path.join(FLAGS_FILE), &serde_json::to_vec_pretty(flags)?)
    }

    /// Adds a flag on an existing cluster. Callers must serialize writers.
    pub fn add_flag(&self, cluster_id: i64, flag_type: &str, note: Option<String>) -> Result<Flag> {
        if flag_type.trim().is_empty() {
            return Err(Error::param("flag_type must not be empty"));
        }
        if self.clusters()?.cluster(cluster_id).is_none() {
            return Err(Error::Lookup(format!("no cluster with id {cluster_id}")));
        }
        let mut flags = self.flags()?;
        let next = flags
            .iter()
            .filter_map(|f| f.flag_id.strip_prefix('f')?.parse::<u64>().ok())
            .max()
            .map_or(1, |m| m + 1);
        let flag = Flag {
            flag_id: format!("f{next}"),
            cluster_id,
            flag_type: flag_type.to_string(),
            note,
        };
        flags.push(flag.clone());
        self.save_flags(&flags)?;
        Ok(flag)
    }

    /// Removes a flag; `false` when no flag has that id.
    pub fn remove_flag(&self, flag_id: &str) -> Result<bool> {
        let mut flags = self.flags()?;
        let before = flags.len();
        flags.retain(|f| f.flag_id != flag_id);
        if flags.len() == before {
            return Ok(false);
        }
        self.save_flags(&flags)?;
        Ok(true)
    }

    /// One entry per flagged member and flag, sorted by id then flag type.
    pub fn export(&self) -> Result<Vec<OutlierEntry>> {
        let flags = self.flags()?;
        if flags.is_empty() {
            return Ok(Vec::new());
        }
        let report = self.clusters()?;
        let manifest = self.manifest()?;
        let mut out = Vec::new();
        for f in &flags {
            out.extend(outlier_manifest(&report, &manifest, &[f.cluster_id], &f.flag_type)?);
        }
        out.sort_by(|a, b| (&a.id, &a.flag_type, a.cluster_id).cmp(&(&b.id, &b.flag_type, b.cluster_id)));
        out.dedup();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::save_features;
    use crate::fixtures::{gaussian_blobs, BlobSpec};
    use crate::umap::UmapConfig;

    fn write_fixture(dir: &Path) -> (PathBuf, PathBuf) {
        let data = gaussian_blobs(&[BlobSpec::new(120, 0.0), BlobSpec::new(25, 30.0)], 6, 4);
        let f = dir.join("f.featmat");
        let m = dir.join("m.jsonl");
        save_features(&data.features, &f).unwrap();
        save_manifest(&data.manifest, &m).unwrap();
        (f, m)
    }

    fn quick_cfg() -> EmbedConfig {
        EmbedConfig::umap(UmapConfig {
            n_epochs: 40,
            ..Default::default()
        })
    }

    #[test]
    fn embed_run_is_reproducible() {
        let tmp = tempfile::tempdir().unwrap();
        let (f, m) = write_fixture(tmp.path());
        let root = tmp.path().join("runs");
        let (a, dir_a) = execute_embed(&root, &f, Some(&m), &quick_cfg()).unwrap();
        let bytes_a = std::fs::read(dir_a.join(EMBEDDING_FILE)).unwrap();
        let (b, dir_b) = execute_embed(&root, &f, Some(&m), &quick_cfg()).unwrap();
        assert_eq!(a.run_id, b.run_id);
        assert_eq!(bytes_a, std::fs::read(dir_b.join(EMBEDDING_FILE)).unwrap());
        assert!(b.is_done());
        for file in a.artifacts.values() {
            assert!(dir_a.join(file).is_file(), "{file}");
        }
        assert_eq!(list_runs(&root).unwrap().len(), 1);

        let mut other = quick_cfg();
        other.umap.rng_seed = 7;
        assert_ne!(execute_embed(&root, &f, Some(&m), &other).unwrap().0.run_id, a.run_id);
    }

    #[test]
    fn failed_stage_recorded() {
        let tmp = tempfile::tempdir().unwrap();
        let (f, m) = write_fixture(tmp.path());
        let mut cfg = quick_cfg();
        cfg.umap.k = 500;
        let root = tmp.path().join("runs");
        assert!(execute_embed(&root, &f, Some(&m), &cfg).is_err());
        let runs = list_runs(&root).unwrap();
        assert_eq!(runs[0].stage_status["knn"], StageStatus::Failed);
        assert_eq!(runs[0].stage_status["layout"], StageStatus::Pending);
        assert!(runs[0].error.is_some());
    }

    #[test]
    fn flags_round_trip_and_export() {
        let tmp = tempfile::tempdir().unwrap();
        let (f, m) = write_fixture(tmp.path());
        let (_, dir) = execute_embed(tmp.path().join("runs"), &f, Some(&m), &quick_cfg()).unwrap();
        let run = RunDir::open(&dir).unwrap();
        let report = run.clusters().unwrap();
        let sat = report.clusters.last().unwrap();
        let members = report.members(sat.id).len();

        assert!(run.export().unwrap().is_empty());
        let f1 = run.add_flag(sat.id, "artifact", None).unwrap();
        let f2 = run.add_flag(sat.id, "lateral-view", Some("check".into())).unwrap();
        assert_ne!(f1.flag_id, f2.flag_id);
        assert_eq!(run.flags().unwrap(), vec![f1.clone(), f2.clone()]);
        let exported = run.export().unwrap();
        assert_eq!(exported.len(), 2 * members);

        assert!(run.remove_flag(&f1.flag_id).unwrap());
        assert!(!run.remove_flag(&f1.flag_id).unwrap());
        assert!(run.export().unwrap().iter().all(|e| e.flag_type == "lateral-view"));
        run.remove_flag(&f2.flag_id).unwrap();
        assert!(run.export().unwrap().is_empty());

        assert!(matches!(run.add_flag(999, "x", None), Err(Error::Lookup(_))));
        let leftovers: Vec<_> = std::fs::read_dir(&dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn seed_probe_run_persists_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let fx = crate::fixtures::mislabel_fixture(300, 5, 40, 8, 2);
        let paths: Vec<PathBuf> = ["t.featmat", "t.jsonl", "s.featmat", "s.jsonl"]
            .iter()
            .map(|n| tmp.path().join(n))
            .collect();
        save_features(&fx.target.features, &paths[0]).unwrap();
        save_manifest(&fx.target.manifest, &paths[1]).unwrap();
        save_features(&fx.seeds.features, &paths[2]).unwrap();
        save_manifest(&fx.seeds.manifest, &paths[3]).unwrap();
        let inputs = SeedProbeInputs {
            target_features: &paths[0],
            target_manifest: Some(&paths[1]),
            seed_features: &paths[2],
            seed_manifest: Some(&paths[3]),
        };
        let cfg = quick_cfg();
        let probe = ProbeConfig::default();
        let record = plan_seed_probe(&inputs, &cfg, &probe).unwrap();
        let root = tmp.path().join("runs");
        let (record, result) = execute_seed_probe(&root, record, &inputs, &cfg, &probe).unwrap();
        assert!(record.is_done());
        let dir = root.join(&record.run_id);
        for f in [
            CONFIG_FILE,
            MERGED_FEATURES_FILE,
            EMBEDDING_FILE,
            PROBE_FILE,
            RECORD_FILE,
        ] {
            assert!(dir.join(f).is_file(), "{f}");
        }
        let run = RunDir::open(&dir).unwrap();
        assert_eq!(run.probe_result().unwrap(), result);
        assert_eq!(run.manifest().unwrap().len(), 340);
    }
}
