use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use virt4d_core::dataset::{Dataset, DatasetError, SIDECAR_NAME};
use virt4d_core::executor::JobId;
use virt4d_core::kernels::AnalysisSpec;

use crate::{AnalysisEntry, ApiError, AppState, DatasetEntry};

type ApiResult<T> = Result<T, ApiError>;

#[derive(Serialize)]
struct PartitionSummary {
    index: usize,
    frame_start: u64,
    frame_count: u64,
    preferred_nodes: Vec<String>,
}

#[derive(Serialize)]
struct DatasetSummary {
    id: u64,
    path: String,
    dtype: String,
    scan_shape: Vec<usize>,
    sig_shape: Vec<usize>,
    total_frames: u64,
    bytes_per_frame: u64,
    total_bytes: u64,
    partition_count: usize,
    partitions: Vec<PartitionSummary>,
    metadata: std::collections::BTreeMap<String, String>,
}

fn summary(entry: &DatasetEntry) -> Value {
    let d = &entry.dataset.descriptor;
    serde_json::to_value(DatasetSummary {
        id: entry.id,
        path: entry.path.display().to_string(),
        dtype: d.dtype.to_string(),
        scan_shape: d.scan_shape.clone(),
        sig_shape: d.sig_shape.clone(),
        total_frames: d.total_frames(),
        bytes_per_frame: d.bytes_per_frame(),
        total_bytes: d.total_bytes(),
        partition_count: d.partitions.len(),
        partitions: d
            .partitions
            .iter()
            .map(|p| PartitionSummary {
                index: p.index,
                frame_start: p.frame_start,
                frame_count: p.frame_count,
                preferred_nodes: p.preferred_nodes.clone(),
            })
            .collect(),
        metadata: entry.dataset.metadata.clone(),
    })
    .expect("summary serializes")
}

fn analysis_json(a: &AnalysisEntry) -> Value {
    json!({ "id": a.id, "dataset_id": a.dataset_id, "spec": a.spec, "revision": a.revision })
}

fn parse_spec(v: Value) -> ApiResult<AnalysisSpec> {
    serde_json::from_value(v).map_err(|e| ApiError::unprocessable(format!("invalid analysis spec: {e}")))
}

pub(crate) async fn list_datasets(State(st): State<AppState>) -> Json<Value> {
    let s = st.session();
    Json(Value::Array(s.datasets.iter().map(summary).collect()))
}

pub(crate) async fn get_dataset(State(st): State<AppState>, UrlPath(id): UrlPath<u64>) -> ApiResult<Json<Value>> {
    let s = st.session();
    let entry = s
        .dataset(id)
        .ok_or_else(|| ApiError::not_found(format!("dataset {id} not found")))?;
    Ok(Json(summary(entry)))
}

#[derive(Deserialize)]
pub(crate) struct OpenRequest {
    path: PathBuf,
}

/// Resolves a dataset directory or sidecar path to a canonical sidecar path.
fn resolve(path: &Path, data_root: Option<&Path>) -> ApiResult<PathBuf> {
    let sidecar = if path.is_dir() { path.join(SIDECAR_NAME) } else { path.to_path_buf() };
    let canonical = sidecar
        .canonicalize()
        .map_err(|_| ApiError::not_found(format!("no dataset at {}", path.display())))?;
    if let Some(root) = data_root {
        if !canonical.starts_with(root) {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                format!("{} is outside the data root", path.display()),
            ));
        }
    }
    Ok(canonical)
}

pub(crate) async fn open_dataset(
    State(st): State<AppState>,
    Json(req): Json<OpenRequest>,
) -> ApiResult<Json<Value>> {
    let root = st.config().data_root.clone();
    let opened = tokio::task::spawn_blocking(move || -> ApiResult<(PathBuf, Result<Dataset, DatasetError>)> {
        let path = resolve(&req.path, root.as_deref())?;
        let ds = Dataset::open(&path);
        Ok((path, ds))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let (path, dataset) = opened;

    let mut s = st.session();
    if let Some(&id) = s.by_path.get(&path) {
        return Ok(Json(summary(s.dataset(id).expect("indexed dataset"))));
    }
    let dataset = dataset.map_err(|e| ApiError::unprocessable(format!("invalid sidecar: {e}")))?;
    let id = s.fresh_id();
    s.by_path.insert(path.clone(), id);
    s.datasets.push(DatasetEntry {
        id,
        path,
        dataset: Arc::new(dataset),
    });
    Ok(Json(summary(s.datasets.last().unwrap())))
}

#[derive(Deserialize)]
pub(crate) struct CreateAnalysis {
    dataset_id: u64,
    spec: Value,
}

pub(crate) async fn create_analysis(
    State(st): State<AppState>,
    Json(req): Json<CreateAnalysis>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let spec = parse_spec(req.spec)?;
    let mut s = st.session();
    let ds = s
        .dataset(req.dataset_id)
        .ok_or_else(|| ApiError::not_found(format!("dataset {} not found", req.dataset_id)))?;
    spec.validate(&ds.dataset.descriptor)
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let id = s.fresh_id();
    let entry = AnalysisEntry {
        id,
        dataset_id: req.dataset_id,
        spec,
        revision: 1,
    };
    let body = analysis_json(&entry);
    s.analyses.insert(id, entry);
    Ok((StatusCode::CREATED, Json(body)))
}

pub(crate) async fn get_analysis(State(st): State<AppState>, UrlPath(id): UrlPath<u64>) -> ApiResult<Json<Value>> {
    let s = st.session();
    let a = s
        .analyses
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("analysis {id} not found")))?;
    Ok(Json(analysis_json(a)))
}

#[derive(Deserialize)]
pub(crate) struct UpdateAnalysis {
    spec: Value,
}

/// Replaces the spec as a whole; jobs already started keep their snapshot.
pub(crate) async fn update_analysis(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<u64>,
    Json(req): Json<UpdateAnalysis>,
) -> ApiResult<Json<Value>> {
    let spec = parse_spec(req.spec)?;
    let mut s = st.session();
    let dataset_id = s
        .analyses
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("analysis {id} not found")))?
        .dataset_id;
    let desc = &s.dataset(dataset_id).expect("open dataset").dataset.descriptor;
    spec.validate(desc).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let a = s.analyses.get_mut(&id).unwrap();
    a.spec = spec;
    a.revision += 1;
    Ok(Json(analysis_json(a)))
}

#[derive(Deserialize)]
pub(crate) struct CreateJob {
    analysis_id: u64,
}

pub(crate) async fn create_job(
    State(st): State<AppState>,
    Json(req): Json<CreateJob>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    Ok((StatusCode::CREATED, Json(st.start_job(req.analysis_id)?)))
}

pub(crate) async fn get_job(State(st): State<AppState>, UrlPath(id): UrlPath<JobId>) -> ApiResult<Json<Value>> {
    // Engine state first: the sink holds the engine's job lock while it
    // takes the view lock, so never ask the engine with a view locked.
    let info = st.0.engine.info(id).ok();
    let s = st.session();
    let job = s
        .jobs
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("job {id} not found")))?;
    let view = job.view.lock().unwrap();
    Ok(Json(json!({
        "job_id": id,
        "analysis_id": job.analysis_id,
        "dataset_id": job.dataset_id,
        "spec": job.spec,
        "status": info.as_ref().map_or(view.status(), |i| i.status),
        "history": info.map(|i| i.history),
        "seq": view.seq(),
        "merged": view.grid().merged_count(),
        "partitions": view.grid().partitions(),
        "checksums": view.checksums(),
        "subscribers": view.subscriber_count(),
    })))
}

pub(crate) async fn delete_job(State(st): State<AppState>, UrlPath(id): UrlPath<JobId>) -> ApiResult<Json<Value>> {
    st.cancel_job(id)?;
    Ok(Json(json!({ "job_id": id, "status": "cancelled" })))
}
