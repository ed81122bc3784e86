//! HTTP API over a directory of runs.
//!
//! Reads go straight to the run directories. Mutations on a run (flags,
//! probe launches) take that run's writer lock, so they apply one at a time.

use std::collections::{HashMap, HashSet};
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use anyhow::Context;
use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use curate_core::run::{
    execute_seed_probe, list_runs, plan_seed_probe, RunDir, RunKind, RunRecord, SeedProbeInputs, RECORD_FILE,
};
use curate_core::satellite::outliers_to_jsonl;
use curate_core::seed_probe::ProbeConfig;
use curate_core::{EmbedConfig, ErrorClass};
use serde::{Deserialize, Serialize};

use crate::cli::ServeArgs;
use crate::thumbs::{render_thumbnail, ThumbCache};
use crate::InputError;

pub struct AppState {
    root: PathBuf,
    image_root: Option<PathBuf>,
    writers: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    thumbs: ThumbCache,
    /// Sample id to image path, rebuilt from run manifests on a miss.
    images: Mutex<HashMap<String, PathBuf>>,
    /// Seed-probe runs still executing.
    jobs: Mutex<HashSet<String>>,
}

impl AppState {
    pub fn new(root: impl Into<PathBuf>, image_root: Option<PathBuf>) -> Arc<Self> {
        Arc::new(AppState {
            root: root.into(),
            image_root,
            writers: Mutex::default(),
            thumbs: ThumbCache::default(),
            images: Mutex::default(),
            jobs: Mutex::default(),
        })
    }

    fn writer(&self, run_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.writers
            .lock()
            .expect("writer map poisoned")
            .entry(run_id.to_string())
            .or_default()
            .clone()
    }

    pub fn running_jobs(&self) -> usize {
        self.jobs.lock().expect("job set poisoned").len()
    }

    fn resolve_image(&self, image_path: &str) -> PathBuf {
        let p = PathBuf::from(image_path);
        match &self.image_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p,
        }
    }

    fn rebuild_image_index(&self) {
        let mut index = HashMap::new();
        for record in list_runs(&self.root).unwrap_or_default() {
            let Ok(run) = RunDir::open(self.root.join(&record.run_id)) else {
                continue;
            };
            let Ok(manifest) = run.manifest() else {
                continue;
            };
            for e in manifest.entries {
                if let Some(p) = e.image_path {
                    let resolved = self.resolve_image(&p);
                    index.entry(e.id).or_insert(resolved);
                }
            }
        }
        *self.images.lock().expect("image index poisoned") = index;
    }

    fn image_for(&self, sample_id: &str) -> Option<PathBuf> {
        if let Some(p) = self.images.lock().expect("image index poisoned").get(sample_id) {
            return Some(p.clone());
        }
        self.rebuild_image_index();
        self.images
            .lock()
            .expect("image index poisoned")
            .get(sample_id)
            .cloned()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<curate_core::Error> for ApiError {
    fn from(e: curate_core::Error) -> Self {
        let status = match (&e, e.class()) {
            (curate_core::Error::Lookup(_), _) => StatusCode::NOT_FOUND,
            (curate_core::Error::Io { source, .. }, _) if source.kind() == std::io::ErrorKind::NotFound => {
                StatusCode::NOT_FOUND
            }
            (_, ErrorClass::Input) => StatusCode::BAD_REQUEST,
            (_, ErrorClass::Numeric) => StatusCode::UNPROCESSABLE_ENTITY,
            (_, ErrorClass::Io) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

fn run_path(state: &AppState, id: &str) -> ApiResult<PathBuf> {
    let path = state.root.join(id);
    if !valid_run_id(id) || !path.join(RECORD_FILE).is_file() {
        return Err(ApiError::not_found(format!("no run {id:?}")));
    }
    Ok(path)
}

fn open_run(state: &AppState, id: &str) -> ApiResult<RunDir> {
    Ok(RunDir::open(run_path(state, id)?)?)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/runs", get(list_runs_handler))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/embedding", get(get_embedding))
        .route("/api/runs/{id}/clusters", get(get_clusters))
        .route("/api/runs/{id}/points", get(get_points))
        .route("/api/runs/{id}/flags", get(get_flags).post(post_flag))
        .route("/api/runs/{id}/flags/{flag_id}", delete(delete_flag))
        .route("/api/runs/{id}/seed-probe", post(post_seed_probe))
        .route("/api/runs/{id}/export", get(get_export))
        .route("/api/images/{sample_id}/thumb", get(get_thumb))
        .with_state(state)
}

async fn list_runs_handler(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<RunRecord>>> {
    blocking(move || Ok(Json(list_runs(&state.root)?))).await
}

async fn get_run(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<RunRecord>> {
    blocking(move || Ok(Json(RunRecord::load(run_path(&state, &id)?)?))).await
}

/// Little-endian `f32` pairs for every point, then the ids as `u16` length +
/// utf-8. `x-point-count` carries the number of points.
async fn get_embedding(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    blocking(move || {
        let run = open_run(&state, &id)?;
        let e = run.embedding()?;
        let manifest = run.manifest()?;
        let ids: Vec<String> = manifest.entries.into_iter().map(|m| m.id).collect();
        let payload = e.payload_with_ids(&ids)?;
        Ok((
            [
                (header::CONTENT_TYPE, "application/octet-stream".to_string()),
                (header::HeaderName::from_static("x-point-count"), e.len().to_string()),
            ],
            payload,
        )
            .into_response())
    })
    .await
}

async fn get_clusters(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<curate_core::ClusterReport>> {
    blocking(move || Ok(Json(open_run(&state, &id)?.clusters()?))).await
}

#[derive(Debug, Deserialize)]
pub struct PointsQuery {
    cluster: Option<i64>,
    #[serde(default)]
    offset: usize,
    limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Point {
    pub index: usize,
    pub id: String,
    pub x: f32,
    pub y: f32,
    pub cluster_id: i64,
    pub image_path: Option<String>,
    /// Whether the image file exists, i.e. a thumbnail can be served.
    pub has_image: bool,
    pub view_label: Option<String>,
    pub patient_id: Option<String>,
    pub is_seed: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PointsPage {
    pub total: usize,
    pub offset: usize,
    pub points: Vec<Point>,
}

async fn get_points(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PointsQuery>,
) -> ApiResult<Json<PointsPage>> {
    blocking(move || {
        let run = open_run(&state, &id)?;
        let e = run.embedding()?;
        let manifest = run.manifest()?;
        let report = run.clusters()?;
        if let Some(c) = q.cluster {
            if c != curate_core::satellite::NOISE && report.cluster(c).is_none() {
                return Err(ApiError::not_found(format!("no cluster {c} in run {id}")));
            }
        }
        let members: Vec<usize> = (0..e.len())
            .filter(|&i| q.cluster.is_none_or(|c| report.labels[i] == c))
            .collect();
        let total = members.len();
        let limit = q.limit.unwrap_or(usize::MAX);
        let points = members
            .into_iter()
            .skip(q.offset)
            .take(limit)
            .map(|i| {
                let m = &manifest.entries[i];
                let [x, y] = e.coords()[i];
                Point {
                    index: i,
                    id: m.id.clone(),
                    x,
                    y,
                    cluster_id: report.labels[i],
                    has_image: m
                        .image_path
                        .as_deref()
                        .is_some_and(|p| state.resolve_image(p).is_file()),
                    image_path: m.image_path.clone(),
                    view_label: m.view_label.clone(),
                    patient_id: m.patient_id.clone(),
                    is_seed: m.is_seed,
                }
            })
            .collect();
        Ok(Json(PointsPage {
            total,
            offset: q.offset,
            points,
        }))
    })
    .await
}

async fn get_flags(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Vec<curate_core::run::Flag>>> {
    blocking(move || Ok(Json(open_run(&state, &id)?.flags()?))).await
}

#[derive(Debug, Deserialize)]
pub struct FlagRequest {
    pub cluster_id: i64,
    pub flag_type: String,
    #[serde(default)]
    pub note: Option<String>,
}

async fn post_flag(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<FlagRequest>,
) -> ApiResult<Json<curate_core::run::Flag>> {
    let lock = state.writer(&id);
    let _guard = lock.lock().await;
    blocking(move || {
        let run = open_run(&state, &id)?;
        Ok(Json(run.add_flag(req.cluster_id, &req.flag_type, req.note)?))
    })
    .await
}

async fn delete_flag(
    State(state): State<Arc<AppState>>,
    Path((id, flag_id)): Path<(String, String)>,
) -> ApiResult<StatusCode> {
    let lock = state.writer(&id);
    let _guard = lock.lock().await;
    blocking(move || {
        if open_run(&state, &id)?.remove_flag(&flag_id)? {
            Ok(StatusCode::NO_CONTENT)
        } else {
            Err(ApiError::not_found(format!("no flag {flag_id:?} on run {id}")))
        }
    })
    .await
}

async fn get_export(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    blocking(move || {
        let bytes = outliers_to_jsonl(&open_run(&state, &id)?.export()?)?;
        Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], bytes).into_response())
    })
    .await
}

/// Seeds come from another embed run (`seed_run`) or from explicit files.
#[derive(Debug, Default, Deserialize)]
pub struct SeedProbeRequest {
    #[serde(default)]
    pub seed_run: Option<String>,
    #[serde(default)]
    pub seed_features: Option<PathBuf>,
    #[serde(default)]
    pub seed_manifest: Option<PathBuf>,
    /// Defaults to the target run's embedding settings.
    #[serde(default)]
    pub embed: Option<EmbedConfig>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProbeLaunch {
    pub run_id: String,
    /// `pending`, `done` or `failed`.
    pub status: String,
}

fn embed_inputs(record: &RunRecord) -> ApiResult<(PathBuf, Option<PathBuf>)> {
    if record.kind != RunKind::Embed {
        return Err(ApiError::bad_request(format!(
            "run {} is not an embed run",
            record.run_id
        )));
    }
    let features = record
        .inputs
        .get("features")
        .ok_or_else(|| ApiError::bad_request(format!("run {} records no feature input", record.run_id)))?;
    Ok((
        features.path.clone(),
        record.inputs.get("manifest").map(|m| m.path.clone()),
    ))
}

async fn post_seed_probe(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<SeedProbeRequest>,
) -> ApiResult<(StatusCode, Json<ProbeLaunch>)> {
    let lock = state.writer(&id);
    let _guard = lock.lock().await;
    let st = state.clone();
    let (record, files, embed_cfg, probe_cfg) = blocking(move || {
        let target = RunRecord::load(run_path(&st, &id)?)?;
        let (target_features, target_manifest) = embed_inputs(&target)?;
        let (seed_features, seed_manifest) = match (&req.seed_run, &req.seed_features) {
            (Some(seed_run), None) => embed_inputs(&RunRecord::load(run_path(&st, seed_run)?)?)?,
            (None, Some(f)) => (f.clone(), req.seed_manifest.clone()),
            _ => return Err(ApiError::bad_request("give exactly one of seed_run or seed_features")),
        };
        let embed_cfg = match req.embed {
            Some(c) => c,
            None => serde_json::from_value(target.config.clone())
                .map_err(|e| ApiError::bad_request(format!("target run config unusable: {e}")))?,
        };
        let probe_cfg = req.probe.unwrap_or_default();
        let files = [
            Some(target_features),
            target_manifest,
            Some(seed_features),
            seed_manifest,
        ];
        let inputs = probe_inputs(&files);
        let mut record = plan_seed_probe(&inputs, &embed_cfg, &probe_cfg)?;
        record.parent = Some(id);
        Ok((record, files, embed_cfg, probe_cfg))
    })
    .await?;

    let run_id = record.run_id.clone();
    let dir = state.root.join(&run_id);
    if state.jobs.lock().expect("job set poisoned").contains(&run_id) {
        return Ok((
            StatusCode::ACCEPTED,
            Json(ProbeLaunch {
                run_id,
                status: "pending".into(),
            }),
        ));
    }
    if let Ok(existing) = RunRecord::load(&dir) {
        if existing.is_done() {
            return Ok((
                StatusCode::OK,
                Json(ProbeLaunch {
                    run_id,
                    status: "done".into(),
                }),
            ));
        }
    }
    std::fs::create_dir_all(&dir)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", dir.display())))?;
    record.save(&dir)?;
    state.jobs.lock().expect("job set poisoned").insert(run_id.clone());

    let st = state.clone();
    let job_id = run_id.clone();
    tokio::task::spawn_blocking(move || {
        let inputs = probe_inputs(&files);
        match execute_seed_probe(&st.root, record, &inputs, &embed_cfg, &probe_cfg) {
            Ok((_, result)) => log::info!("seed probe {job_id} flagged {} point(s)", result.flagged.len()),
            Err(e) => log::warn!("seed probe {job_id} failed: {e}"),
        }
        st.jobs.lock().expect("job set poisoned").remove(&job_id);
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(ProbeLaunch {
            run_id,
            status: "pending".into(),
        }),
    ))
}

fn probe_inputs(files: &[Option<PathBuf>; 4]) -> SeedProbeInputs<'_> {
    SeedProbeInputs {
        target_features: files[0].as_deref().expect("target features"),
        target_manifest: files[1].as_deref(),
        seed_features: files[2].as_deref().expect("seed features"),
        seed_manifest: files[3].as_deref(),
    }
}

async fn get_thumb(State(state): State<Arc<AppState>>, Path(sample_id): Path<String>) -> ApiResult<Response> {
    if let Some(bytes) = state.thumbs.get(&sample_id) {
        return Ok(jpeg(bytes));
    }
    let st = state.clone();
    let key = sample_id.clone();
    let bytes = blocking(move || {
        let path = st
            .image_for(&key)
            .ok_or_else(|| ApiError::not_found(format!("no image recorded for {key:?}")))?;
        if !path.is_file() {
            return Err(ApiError::not_found(format!("image for {key:?} missing on disk")));
        }
        render_thumbnail(&path)
            .map(Bytes::from)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("{}: {e}", path.display())))
    })
    .await?;
    state.thumbs.put(sample_id, bytes.clone());
    Ok(jpeg(bytes))
}

fn jpeg(bytes: Bytes) -> Response {
    ([(header::CONTENT_TYPE, "image/jpeg")], Body::from(bytes)).into_response()
}

/// Serves until `shutdown` resolves; requests in flight finish first.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}

pub fn serve_blocking(args: &ServeArgs) -> anyhow::Result<()> {
    if !args.run_dir.is_dir() {
        return Err(InputError(format!("run directory not found: {}", args.run_dir.display())).into());
    }
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let state = AppState::new(&args.run_dir, args.image_root.clone());
    runtime.block_on(async {
        let addr: SocketAddr = format!("{}:{}", args.host, args.port)
            .parse()
            .map_err(|e| InputError(format!("bad listen address: {e}")))?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("cannot listen on {addr}"))?;
        log::info!("serving {} on http://{addr}", args.run_dir.display());
        serve(listener, state.clone(), shutdown_signal()).await?;
        let pending = state.running_jobs();
        if pending > 0 {
            log::info!("waiting for {pending} seed probe(s) to finish");
        }
        anyhow::Ok(())
    })?;
    // Dropping the runtime waits for background probes.
    drop(runtime);
    Ok(())
}
