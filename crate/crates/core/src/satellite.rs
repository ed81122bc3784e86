//! Satellite-cluster detection on a 2-D embedding.
//!
//! Points are grouped with DBSCAN; clusters holding at least
//! `main_fraction * n` points are *main* clusters, every other cluster is a
//! *satellite*. Each cluster is summarized by its dominant view label and
//! dominant patient, the two signals a curator checks first.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::feature_store::DatasetManifest;
use crate::spatial::{self, PointTree};

pub const NOISE: i64 = -1;
pub const DEFAULT_MAIN_FRACTION: f64 = 0.05;
pub const DEFAULT_MIN_PTS: usize = 10;
pub const DEFAULT_ATTACH_FACTOR: f64 = 5.0;
const EPS_FLOOR: f64 = 1e-12;

#[inline]
fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Uniform grid with cell size `eps` for radius queries.
struct Grid {
    eps: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[[f64; 2]], eps: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &p) in points.iter().enumerate() {
            cells.entry(Self::cell(p, eps)).or_default().push(i);
        }
        Grid { eps, cells }
    }

    fn cell(p: [f64; 2], eps: f64) -> (i64, i64) {
        ((p[0] / eps).floor() as i64, (p[1] / eps).floor() as i64)
    }

    /// Indices within `eps` of `points[i]`, including `i`, ascending.
    fn neighbors(&self, points: &[[f64; 2]], i: usize) -> Vec<usize> {
        let p = points[i];
        let (cx, cy) = Self::cell(p, self.eps);
        let eps2 = self.eps * self.eps;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                let key = (cx.saturating_add(dx), cy.saturating_add(dy));
                if let Some(list) = self.cells.get(&key) {
                    out.extend(list.iter().copied().filter(|&j| dist2(p, points[j]) <= eps2));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// DBSCAN labels: `-1` for noise, clusters numbered from 0 in order of their
/// lowest-index core point.
///
/// A core point has at least `min_pts` points (itself included) within `eps`.
/// Border points join the lowest-numbered cluster among their core neighbors.
pub fn density_cluster(e: &Embedding, eps: f64, min_pts: usize) -> Result<Vec<i64>> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::param(format!("eps must be positive (got {eps})")));
    }
    if min_pts < 2 {
        return Err(Error::param(format!("min_pts must be at least 2 (got {min_pts})")));
    }
    let pts = e.to_f64();
    let n = pts.len();
    let grid = Grid::new(&pts, eps);
    let neighborhoods: Vec<Vec<usize>> = (0..n).map(|i| grid.neighbors(&pts, i)).collect();
    let core: Vec<bool> = neighborhoods.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![NOISE; n];
    let mut next = 0i64;
    for start in 0..n {
        if !core[start] || labels[start] != NOISE {
            continue;
        }
        labels[start] = next;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in &neighborhoods[u] {
                if core[v] && labels[v] == NOISE {
                    labels[v] = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        labels[i] = neighborhoods[i]
            .iter()
            .filter(|&&j| core[j])
            .map(|&j| labels[j])
            .min()
            .unwrap_or(NOISE);
    }
    Ok(labels)
}

/// Knee of the sorted distance-to-`(min_pts - 1)`-th-neighbor curve.
///
/// The curve is normalized to the unit square and the knee is the point
/// farthest from the chord joining its ends. A point is core at that radius
/// exactly when its own neighbor distance is at most the knee value.
pub fn auto_eps(e: &Embedding, min_pts: usize) -> Result<f64> {
    let n = e.len();
    if min_pts < 2 || n <= min_pts {
        return Err(Error::param(format!(
            "auto eps needs 2 <= min_pts < n (min_pts = {min_pts}, n = {n})"
        )));
    }
    let pts = e.to_f64();
    let rank = min_pts - 1;
    let mut kdist: Vec<f64> = k_distances(&pts, rank);
    kdist.sort_by(f64::total_cmp);
    let (first, last) = (kdist[0], kdist[n - 1]);
    if last - first <= 0.0 {
        return Ok(last.max(EPS_FLOOR));
    }
    let mut best = (0.0f64, last);
    for (i, &d) in kdist.iter().enumerate() {
        let x = i as f64 / (n - 1) as f64;
        let y = (d - first) / (last - first);
        // Distance to the chord y = x, up to a constant factor.
        let gap = x - y;
        if gap > best.0 {
            best = (gap, d);
        }
    }
    Ok(best.1.max(EPS_FLOOR))
}

/// Distance from each point to its `rank`-th nearest other point.
fn k_distances(pts: &[[f64; 2]], rank: usize) -> Vec<f64> {
    spatial::k_nearest(pts, rank)
        .into_iter()
        .map(|row| row[rank - 1].1.sqrt())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterKind {
    Main,
    Satellite,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dominant {
    pub label: String,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: i64,
    pub size: usize,
    pub centroid: [f64; 2],
    pub kind: ClusterKind,
    pub dominant_view: Option<Dominant>,
    pub dominant_patient: Option<Dominant>,
    /// Smallest distance from a member to any main-cluster point; `None` for
    /// main clusters, noise, and satellites when no main cluster exists.
    pub separation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub n: usize,
    pub eps: Option<f64>,
    pub min_pts: Option<usize>,
    pub main_fraction: f64,
    /// Gap below which small clusters were folded into a main cluster.
    #[serde(default)]
    pub attach_gap: Option<f64>,
    pub labels: Vec<i64>,
    /// Main clusters then satellites, each group by descending size.
    pub clusters: Vec<ClusterSummary>,
    pub noise: usize,
}

impl ClusterReport {
    pub fn cluster(&self, id: i64) -> Option<&ClusterSummary> {
        self.clusters.iter().find(|c| c.id == id)
    }

    pub fn kind_of(&self, label: i64) -> Option<ClusterKind> {
        if label == NOISE {
            Some(ClusterKind::Noise)
        } else {
            self.cluster(label).map(|c| c.kind)
        }
    }

    pub fn of_kind(&self, kind: ClusterKind) -> impl Iterator<Item = &ClusterSummary> {
        self.clusters.iter().filter(move |c| c.kind == kind)
    }

    pub fn members(&self, id: i64) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == id)
            .map(|(i, _)| i)
            .collect()
    }
}

fn dominant<'a>(values: impl Iterator<Item = Option<&'a str>>, size: usize) -> Option<Dominant> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values.flatten() {
        *counts.entry(v).or_default() += 1;
    }
    // Highest count; ties go to the lexicographically smallest label.
    let (label, count) = counts
        .into_iter()
        .fold(None, |best: Option<(&str, usize)>, (l, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((l, c)),
        })?;
    Some(Dominant {
        label: label.to_string(),
        fraction: count as f64 / size as f64,
    })
}

pub fn classify_clusters(
    labels: &[i64],
    e: &Embedding,
    manifest: &DatasetManifest,
    main_fraction: f64,
) -> Result<ClusterReport> {
    let n = labels.len();
    if e.len() != n || manifest.len() != n {
        return Err(Error::Alignment(format!(
            "{n} labels, {} embedded points, {} manifest entries",
            e.len(),
            manifest.len()
        )));
    }
    if !(0.0..=1.0).contains(&main_fraction) {
        return Err(Error::param(format!(
            "main_fraction must be in [0, 1] (got {main_fraction})"
        )));
    }
    let pts = e.to_f64();
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.keys().all(|&l| l == NOISE) {
        log::warn!("clustering produced no clusters; every point is noise");
    }
    let threshold = main_fraction * n as f64;

    let summarize = |id: i64, members: &[usize], kind: ClusterKind| {
        let size = members.len();
        let (sx, sy) = members
            .iter()
            .fold((0.0, 0.0), |(x, y), &i| (x + pts[i][0], y + pts[i][1]));
        let entries = || members.iter().map(|&i| &manifest.entries[i]);
        ClusterSummary {
            id,
            size,
            centroid: [sx / size as f64, sy / size as f64],
            kind,
            dominant_view: dominant(entries().map(|e| e.view_label.as_deref()), size),
            dominant_patient: dominant(entries().map(|e| e.patient_id.as_deref()), size),
            separation: None,
        }
    };

    let mut mains = Vec::new();
    let mut satellites = Vec::new();
    for (&id, members) in &groups {
        if id == NOISE {
            continue;
        } else if members.len() as f64 >= threshold {
            mains.push(summarize(id, members, ClusterKind::Main));
        } else {
            satellites.push(summarize(id, members, ClusterKind::Satellite));
        }
    }

    let main_pts: Vec<[f64; 2]> = mains
        .iter()
        .flat_map(|c| groups[&c.id].iter().map(|&i| pts[i]))
        .collect();
    if !main_pts.is_empty() {
        let tree = PointTree::new(&main_pts);
        for s in &mut satellites {
            s.separation = Some(nearest_gap(&tree, &pts, &groups[&s.id]).1.sqrt());
        }
    }
    let by_size = |a: &ClusterSummary, b: &ClusterSummary| b.size.cmp(&a.size).then(a.id.cmp(&b.id));
    mains.sort_by(by_size);
    satellites.sort_by(by_size);

    let mut clusters = mains;
    clusters.extend(satellites);
    Ok(ClusterReport {
        n,
        eps: None,
        min_pts: None,
        main_fraction,
        attach_gap: None,
        labels: labels.to_vec(),
        clusters,
        noise: groups.get(&NOISE).map_or(0, Vec::len),
    })
}

/// Closest indexed point to any of `members`: `(tree index, squared gap)`.
fn nearest_gap(tree: &PointTree<'_>, pts: &[[f64; 2]], members: &[usize]) -> (usize, f64) {
    members
        .iter()
        .filter_map(|&i| tree.query(pts[i], 1, None).first().copied())
        .fold(
            (usize::MAX, f64::INFINITY),
            |best, c| if c.1 < best.1 { c } else { best },
        )
}

/// Folds every cluster below the main threshold that lies within `max_gap`
/// of a main cluster into the nearest one, repeating until nothing changes.
///
/// DBSCAN splits a large cluster wherever its density dips below the core
/// threshold; such pieces sit right next to their parent and are not
/// detached satellites.
pub fn absorb_attached(labels: &[i64], e: &Embedding, main_fraction: f64, max_gap: f64) -> Vec<i64> {
    let mut labels = labels.to_vec();
    if !(max_gap > 0.0) {
        return labels;
    }
    let pts = e.to_f64();
    let threshold = main_fraction * labels.len() as f64;
    loop {
        let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            if l != NOISE {
                groups.entry(l).or_default().push(i);
            }
        }
        let (mains, small): (Vec<_>, Vec<_>) = groups
            .iter()
            .partition(|(_, members)| members.len() as f64 >= threshold);
        if mains.is_empty() || small.is_empty() {
            return labels;
        }
        let owners: Vec<i64> = mains
            .iter()
            .flat_map(|(&id, m)| std::iter::repeat_n(id, m.len()))
            .collect();
        let main_pts: Vec<[f64; 2]> = mains.iter().flat_map(|(_, m)| m.iter().map(|&i| pts[i])).collect();
        let tree = PointTree::new(&main_pts);
        let moves: Vec<(i64, i64)> = small
            .iter()
            .filter_map(|(&id, members)| {
                let (j, gap2) = nearest_gap(&tree, &pts, members);
                (gap2 <= max_gap * max_gap).then(|| (id, owners[j]))
            })
            .collect();
        if moves.is_empty() {
            return labels;
        }
        let remap: HashMap<i64, i64> = moves.into_iter().collect();
        for l in &mut labels {
            if let Some(&to) = remap.get(l) {
                *l = to;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// DBSCAN radius; chosen by [`auto_eps`] when absent.
    pub eps: Option<f64>,
    pub min_pts: usize,
    pub main_fraction: f64,
    /// Small clusters within `attach_factor * eps` of a main cluster are
    /// merged into it. Zero disables merging.
    pub attach_factor: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            eps: None,
            min_pts: DEFAULT_MIN_PTS,
            main_fraction: DEFAULT_MAIN_FRACTION,
            attach_factor: DEFAULT_ATTACH_FACTOR,
        }
    }
}

/// DBSCAN, merging of attached fragments, then classification.
pub fn detect(e: &Embedding, manifest: &DatasetManifest, cfg: &DetectConfig) -> Result<ClusterReport> {
    if !(cfg.attach_factor >= 0.0) {
        return Err(Error::param(format!(
            "attach_factor must be non-negative (got {})",
            cfg.attach_factor
        )));
    }
    let eps = match cfg.eps {
        Some(eps) => eps,
        None => auto_eps(e, cfg.min_pts)?,
    };
    let labels = density_cluster(e, eps, cfg.min_pts)?;
    let gap = cfg.attach_factor * eps;
    let labels = absorb_attached(&labels, e, cfg.main_fraction, gap);
    let mut report = classify_clusters(&labels, e, manifest, cfg.main_fraction)?;
    report.eps = Some(eps);
    report.min_pts = Some(cfg.min_pts);
    report.attach_gap = Some(gap);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutlierEntry {
    pub id: String,
    pub cluster_id: i64,
    pub flag_type: String,
    pub image_path: Option<String>,
}

/// Every member of the selected clusters, tagged with `flag_type`, sorted by id.
pub fn outlier_manifest(
    report: &ClusterReport,
    manifest: &DatasetManifest,
    selected: &[i64],
    flag_type: &str,
) -> Result<Vec<OutlierEntry>> {
    let selected: BTreeSet<i64> = selected.iter().copied().collect();
    for &id in &selected {
        if report.cluster(id).is_none() {
            return Err(Error::Lookup(format!("no cluster with id {id}")));
        }
    }
    let mut out: Vec<OutlierEntry> = report
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| selected.contains(l))
        .map(|(i, &l)| {
            let entry = &manifest.entries[i];
            OutlierEntry {
                id: entry.id.clone(),
                cluster_id: l,
                flag_type: flag_type.to_string(),
                image_path: entry.image_path.clone(),
            }
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn outliers_to_jsonl(entries: &[OutlierEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    Ok(out)
}
