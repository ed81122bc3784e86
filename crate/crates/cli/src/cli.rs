use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use curate_core::embedding::load_embedding;
use curate_core::feature_store::{load_features, load_manifest, FEATURE_VERSION};
use curate_core::pipeline::{EmbedMethod, KnnMethod};
use curate_core::run::{
    execute_embed, execute_seed_probe, plan_seed_probe, write_atomic, RunDir, SeedProbeInputs, CLUSTERS_FILE,
};
use curate_core::satellite::{detect, outliers_to_jsonl, ClusterKind, ClusterReport, DetectConfig};
use curate_core::seed_probe::ProbeConfig;
use curate_core::tsne::TsneConfig;
use curate_core::umap::{ExecMode, InitMethod, UmapConfig};
use curate_core::{EmbedConfig, Metric};

use crate::InputError;

#[derive(Parser, Debug)]
#[command(
    name = "curate",
    version,
    about = "Find outlier clusters and mislabeled samples in image datasets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Describe a feature file and, optionally, its manifest.
    ExtractInfo(ExtractInfoArgs),
    /// Embed a feature file into a new run directory.
    Embed(EmbedCmd),
    /// Find density clusters in an embedding and classify them.
    Detect(DetectArgs),
    /// Embed a target set together with labeled seeds and report likely mislabels.
    SeedProbe(SeedProbeArgs),
    /// Serve run directories over HTTP.
    Serve(ServeArgs),
    /// Write the outlier manifest of a run's flags as JSON lines.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
pub struct ExtractInfoArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

/// Embedding settings shared by `embed` and `seed-probe`. Unset values use
/// the library defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct EmbedArgs {
    /// umap, pca or tsne.
    #[arg(long, default_value = "umap")]
    pub method: EmbedMethod,
    /// euclidean or cosine.
    #[arg(long)]
    pub metric: Option<Metric>,
    /// Neighbor search: exact, descent or auto.
    #[arg(long)]
    pub knn: Option<KnnMethod>,
    /// Neighbors per point [default: 10].
    #[arg(long)]
    pub k: Option<usize>,
    /// [default: 0.1]
    #[arg(long)]
    pub min_dist: Option<f64>,
    /// [default: 1.0]
    #[arg(long)]
    pub spread: Option<f64>,
    /// [default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub negative_sample_rate: Option<usize>,
    /// spectral, random or pca.
    #[arg(long)]
    pub init: Option<InitMethod>,
    /// Random seed for UMAP and t-SNE [default: 42].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parallel, non-reproducible UMAP optimization.
    #[arg(long)]
    pub fast: bool,
    /// t-SNE perplexity [default: 30].
    #[arg(long)]
    pub perplexity: Option<f64>,
    /// t-SNE exaggeration after the early phase [default: 1].
    #[arg(long)]
    pub exaggeration: Option<f64>,
}

impl EmbedArgs {
    pub fn config(&self) -> EmbedConfig {
        let mut umap = UmapConfig::default();
        let mut tsne = TsneConfig::default();
        if let Some(k) = self.k {
            umap.k = k;
        }
        if let Some(v) = self.min_dist {
            umap.min_dist = v;
        }
        if let Some(v) = self.spread {
            umap.spread = v;
        }
        if let Some(v) = self.epochs {
            umap.n_epochs = v;
        }
        if let Some(v) = self.learning_rate {
            umap.learning_rate = v;
            tsne.learning_rate = v;
        }
        if let Some(v) = self.negative_sample_rate {
            umap.negative_sample_rate = v;
        }
        if let Some(v) = self.init {
            umap.init = v;
        }
        if let Some(v) = self.seed {
            umap.rng_seed = v;
            tsne.rng_seed = v;
        }
        if self.fast {
            umap.mode = ExecMode::Fast;
        }
        if let Some(v) = self.perplexity {
            tsne.perplexity = v;
        }
        if let Some(v) = self.exaggeration {
            tsne.main_exaggeration = v;
        }
        EmbedConfig {
            method: self.method,
            metric: self.metric.unwrap_or_default(),
            knn: self.knn.unwrap_or_default(),
            umap,
            tsne,
        }
    }
}

#[derive(Args, Debug)]
pub struct EmbedCmd {
    #[arg(long)]
    pub features: PathBuf,
    /// Manifest aligned with the feature rows; derived from the ids when absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory holding run directories.
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    #[command(flatten)]
    pub embed: EmbedArgs,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    /// Run directory; the report is saved into it.
    #[arg(long, conflicts_with_all = ["embedding", "manifest"])]
    pub run: Option<PathBuf>,
    /// Embedding file, used with --manifest instead of --run.
    #[arg(long, requires = "manifest", required_unless_present = "run")]
    pub embedding: Option<PathBuf>,
    #[arg(long, requires = "embedding")]
    pub manifest: Option<PathBuf>,
    /// Output path for the report JSON; required without --run.
    #[arg(long, required_unless_present = "run")]
    pub out: Option<PathBuf>,
    /// DBSCAN radius; estimated from the data when absent.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, default_value_t = curate_core::satellite::DEFAULT_MIN_PTS)]
    pub min_pts: usize,
    /// Clusters holding at least this fraction of all points are main clusters.
    #[arg(long, default_value_t = curate_core::satellite::DEFAULT_MAIN_FRACTION)]
    pub main_fraction: f64,
    /// Merge small clusters within this many eps of a main cluster (0 disables).
    #[arg(long, default_value_t = curate_core::satellite::DEFAULT_ATTACH_FACTOR)]
    pub attach_factor: f64,
}

#[derive(Args, Debug)]
pub struct SeedProbeArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub target_manifest: Option<PathBuf>,
    #[arg(long)]
    pub seeds: PathBuf,
    #[arg(long)]
    pub seeds_manifest: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Embedding neighbors that vote on each target point.
    #[arg(long)]
    pub k_vote: Option<usize>,
    /// Seed fraction among the voters needed to flag a point.
    #[arg(long)]
    pub vote_threshold: Option<f64>,
    /// View label given to seed rows in the merged manifest.
    #[arg(long)]
    pub seed_label: Option<String>,
    /// Print the result as JSON.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub embed: EmbedArgs,
}

impl SeedProbeArgs {
    pub fn probe_config(&self) -> ProbeConfig {
        let mut cfg = ProbeConfig::default();
        if let Some(k) = self.k_vote {
            cfg.k_vote = k;
        }
        if let Some(t) = self.vote_threshold {
            cfg.vote_threshold = t;
        }
        if let Some(l) = &self.seed_label {
            cfg.seed_label = l.clone();
        }
        cfg
    }
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory holding run directories.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Base for relative image paths in manifests.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn input_file(path: &Path) -> Result<&Path> {
    if !path.is_file() {
        return Err(InputError(format!("input file not found: {}", path.display())).into());
    }
    Ok(path)
}

fn run_dir(path: &Path) -> Result<RunDir> {
    if !path.join(curate_core::run::RECORD_FILE).is_file() {
        return Err(InputError(format!("not a run directory: {}", path.display())).into());
    }
    Ok(RunDir::open(path)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ExtractInfo(a) => extract_info(&a),
        Command::Embed(a) => embed(&a),
        Command::Detect(a) => detect_cmd(&a),
        Command::SeedProbe(a) => seed_probe(&a),
        Command::Serve(a) => crate::server::serve_blocking(&a),
        Command::Export(a) => export(&a),
    }
}

fn count_by<'a>(values: impl Iterator<Item = Option<&'a str>>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for v in values {
        *out.entry(v.unwrap_or("(none)").to_string()).or_insert(0) += 1;
    }
    out
}

fn extract_info(a: &ExtractInfoArgs) -> Result<()> {
    let path = input_file(&a.features)?;
    let features = load_features(path)?;
    let digest = curate_core::run::InputFile::digest(path)?;
    let mut info = serde_json::json!({
        "path": digest.path,
        "sha256": digest.sha256,
        "format_version": FEATURE_VERSION,
        "n_samples": features.n_samples(),
        "n_dims": features.n_dims(),
        "first_ids": features.ids().iter().take(5).collect::<Vec<_>>(),
    });
    if let Some(m) = &a.manifest {
        let manifest = load_manifest(input_file(m)?)?;
        let aligned = manifest.check_aligned(features.ids());
        let with_image = manifest.entries.iter().filter(|e| e.image_path.is_some()).count();
        info["manifest"] = serde_json::json!({
            "entries": manifest.len(),
            "aligned": aligned.is_ok(),
            "alignment_error": aligned.as_ref().err().map(|e| e.to_string()),
            "seeds": manifest.entries.iter().filter(|e| e.is_seed).count(),
            "with_image_path": with_image,
            "sources": count_by(manifest.entries.iter().map(|e| Some(e.source.as_str()))),
            "view_labels": count_by(manifest.entries.iter().map(|e| e.view_label.as_deref())),
        });
        aligned?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&info)?);
        return Ok(());
    }
    println!("file:       {}", a.features.display());
    println!("sha256:     {}", info["sha256"].as_str().unwrap_or_default());
    println!("samples:    {}", features.n_samples());
    println!("dimensions: {}", features.n_dims());
    if let Some(m) = info.get("manifest") {
        println!("manifest:   {} entries, aligned", m["entries"]);
        println!("seeds:      {}", m["seeds"]);
        println!("images:     {}", m["with_image_path"]);
        for key in ["sources", "view_labels"] {
            if let Some(map) = m[key].as_object() {
                let parts: Vec<String> = map.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{:<11} {}", format!("{key}:"), parts.join(", "));
            }
        }
    }
    Ok(())
}

fn embed(a: &EmbedCmd) -> Result<()> {
    let features = input_file(&a.features)?;
    let manifest = a.manifest.as_deref().map(input_file).transpose()?;
    let cfg = a.embed.config();
    let (record, dir) = execute_embed(&a.runs, features, manifest, &cfg)?;
    println!(
        "run {} ({}) written to {}",
        record.run_id,
        cfg.method.as_str(),
        dir.display()
    );
    Ok(())
}

pub fn format_report(report: &ClusterReport) -> String {
    let mut out = String::new();
    let fmt_dom = |d: &Option<curate_core::satellite::Dominant>| match d {
        Some(d) => format!("{} ({:.0}%)", d.label, d.fraction * 100.0),
        None => "-".into(),
    };
    out.push_str(&format!(
        "{:>7}  {:>7}  {:<9}  {:>10}  {:<24}  {:<24}\n",
        "cluster", "size", "kind", "separation", "dominant view", "dominant patient"
    ));
    for c in &report.clusters {
        let kind = match c.kind {
            ClusterKind::Main => "main",
            ClusterKind::Satellite => "satellite",
            ClusterKind::Noise => "noise",
        };
        let sep = c.separation.map_or("-".into(), |s| format!("{s:.3}"));
        out.push_str(&format!(
            "{:>7}  {:>7}  {:<9}  {:>10}  {:<24}  {:<24}\n",
            c.id,
            c.size,
            kind,
            sep,
            fmt_dom(&c.dominant_view),
            fmt_dom(&c.dominant_patient)
        ));
    }
    out.push_str(&format!("{:>7}  {:>7}  noise\n", "-", report.noise));
    if let Some(eps) = report.eps {
        out.push_str(&format!(
            "eps {eps:.4}, min_pts {}\n",
            report.min_pts.unwrap_or_default()
        ));
    }
    out
}

fn detect_cmd(a: &DetectArgs) -> Result<()> {
    let cfg = DetectConfig {
        eps: a.eps,
        min_pts: a.min_pts,
        main_fraction: a.main_fraction,
        attach_factor: a.attach_factor,
    };
    let report = match &a.run {
        Some(dir) => {
            let mut run = run_dir(dir)?;
            let report = detect(&run.embedding()?, &run.manifest()?, &cfg)?;
            run.save_clusters(&report)?;
            log::info!("report saved to {}", dir.join(CLUSTERS_FILE).display());
            report
        }
        None => {
            let e = load_embedding(input_file(a.embedding.as_deref().expect("required by clap"))?)?;
            let m = load_manifest(input_file(a.manifest.as_deref().expect("required by clap"))?)?;
            detect(&e, &m, &cfg)?
        }
    };
    if let Some(out) = &a.out {
        write_atomic(out, &serde_json::to_vec_pretty(&report)?)?;
    }
    print!("{}", format_report(&report));
    Ok(())
}

fn seed_probe(a: &SeedProbeArgs) -> Result<()> {
    let inputs = SeedProbeInputs {
        target_features: input_file(&a.target)?,
        target_manifest: a.target_manifest.as_deref().map(input_file).transpose()?,
        seed_features: input_file(&a.seeds)?,
        seed_manifest: a.seeds_manifest.as_deref().map(input_file).transpose()?,
    };
    let embed_cfg = a.embed.config();
    let probe_cfg = a.probe_config();
    let record = plan_seed_probe(&inputs, &embed_cfg, &probe_cfg)?;
    let run_id = record.run_id.clone();
    let (_, result) = execute_seed_probe(&a.runs, record, &inputs, &embed_cfg, &probe_cfg)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&result)?);
        return Ok(());
    }
    let mut stdout = std::io::stdout().lock();
    for f in &result.flagged {
        let cluster = f.cluster_id.map_or("-".into(), |c| c.to_string());
        writeln!(stdout, "{}\t{:.3}\t{}", f.id, f.seed_vote_fraction, cluster)?;
    }
    writeln!(
        stdout,
        "{} flagged; run {} in {}",
        result.flagged.len(),
        run_id,
        a.runs.join(&run_id).display()
    )?;
    Ok(())
}

fn export(a: &ExportArgs) -> Result<()> {
    let run = run_dir(&a.run)?;
    let bytes = outliers_to_jsonl(&run.export()?)?;
    match &a.out {
        Some(out) => write_atomic(out, &bytes).with_context(|| format!("writing {}", out.display()))?,
        None => std::io::stdout().lock().write_all(&bytes)?,
    }
    Ok(())
}
