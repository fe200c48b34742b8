//! HTTP + WebSocket front end for the engine.
//!
//! Datasets are opened by path, analyses are stored per id and jobs snapshot
//! their analysis at creation. Job events are pushed to WebSocket
//! subscribers as a JSON envelope followed by a binary float64 slab; see
//! [`events`] for the message schema.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use virt4d_core::dataset::Dataset;
use virt4d_core::executor::{Engine, EngineConfig, ExecError, JobId};
use virt4d_core::kernels::AnalysisSpec;

pub mod events;
mod http;

pub use events::{JobView, StreamAccumulator};

/// Environment variable restricting which dataset paths may be opened.
pub const DATA_ROOT_ENV: &str = "VIRT4D_DATA_ROOT";

/// Time a job with no remaining subscribers keeps running before it is
/// cancelled.
pub const DEFAULT_GRACE: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub engine: EngineConfig,
    /// Canonical directory every opened dataset must live under.
    pub data_root: Option<PathBuf>,
    pub grace: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            engine: EngineConfig::default(),
            data_root: None,
            grace: DEFAULT_GRACE,
        }
    }
}

impl ServerConfig {
    /// Default config with `data_root` taken from [`DATA_ROOT_ENV`].
    pub fn from_env(engine: EngineConfig) -> Self {
        ServerConfig {
            engine,
            data_root: std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from),
            ..ServerConfig::default()
        }
    }
}

pub(crate) struct DatasetEntry {
    pub id: u64,
    pub path: PathBuf,
    pub dataset: Arc<Dataset>,
}

pub(crate) struct AnalysisEntry {
    pub id: u64,
    pub dataset_id: u64,
    pub spec: AnalysisSpec,
    pub revision: u64,
}

pub(crate) struct JobEntry {
    pub analysis_id: u64,
    pub dataset_id: u64,
    pub spec: AnalysisSpec,
    pub view: Arc<Mutex<JobView>>,
}

#[derive(Default)]
pub(crate) struct Session {
    pub datasets: Vec<DatasetEntry>,
    pub by_path: HashMap<PathBuf, u64>,
    pub analyses: HashMap<u64, AnalysisEntry>,
    pub jobs: HashMap<JobId, JobEntry>,
    next_id: u64,
    next_client: u64,
}

impl Session {
    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    pub fn dataset(&self, id: u64) -> Option<&DatasetEntry> {
        self.datasets.iter().find(|d| d.id == id)
    }
}

pub(crate) struct Inner {
    pub engine: Engine,
    pub config: ServerConfig,
    pub session: Mutex<Session>,
}

/// Shared service state. Cloning is cheap.
#[derive(Clone)]
pub struct AppState(pub(crate) Arc<Inner>);

impl AppState {
    pub fn new(mut config: ServerConfig) -> Result<Self, ExecError> {
        if let Some(root) = &config.data_root {
            config.data_root = Some(root.canonicalize()?);
        }
        Ok(AppState(Arc::new(Inner {
            engine: Engine::new(config.engine.clone())?,
            config,
            session: Mutex::new(Session::default()),
        })))
    }

    pub fn config(&self) -> &ServerConfig {
        &self.0.config
    }

    pub(crate) fn session(&self) -> std::sync::MutexGuard<'_, Session> {
        self.0.session.lock().unwrap()
    }

    pub(crate) fn client_id(&self) -> u64 {
        let mut s = self.session();
        s.next_client += 1;
        s.next_client
    }

    /// Creates a job from the analysis' current spec.
    pub(crate) fn start_job(&self, analysis_id: u64) -> Result<serde_json::Value, ApiError> {
        let (dataset, dataset_id, spec) = {
            let s = self.session();
            let a = s
                .analyses
                .get(&analysis_id)
                .ok_or_else(|| ApiError::not_found(format!("analysis {analysis_id} not found")))?;
            let ds = s.dataset(a.dataset_id).expect("analysis references an open dataset");
            (Arc::clone(&ds.dataset), a.dataset_id, a.spec.clone())
        };
        let compiled = spec
            .compile(&dataset.descriptor)
            .map_err(|e| ApiError::unprocessable(e.to_string()))?;
        let view = Arc::new(Mutex::new(JobView::new(compiled.new_grid(&dataset.descriptor))));
        let sink_view = Arc::clone(&view);
        let partitions = dataset.descriptor.partitions.len();
        // The session lock is held across submit so the job is registered
        // before anyone can look it up; the sink only touches `view`.
        let mut s = self.session();
        let job_id = self
            .0
            .engine
            .submit_compiled(
                dataset,
                Arc::new(compiled),
                Some(Box::new(move |e| sink_view.lock().unwrap().apply(e))),
            )
            .map_err(ApiError::from)?;
        s.jobs.insert(
            job_id,
            JobEntry {
                analysis_id,
                dataset_id,
                spec: spec.clone(),
                view,
            },
        );
        Ok(json!({
            "job_id": job_id,
            "analysis_id": analysis_id,
            "dataset_id": dataset_id,
            "spec": spec,
            "partitions": partitions,
        }))
    }

    pub(crate) fn cancel_job(&self, job_id: JobId) -> Result<(), ApiError> {
        if !self.session().jobs.contains_key(&job_id) {
            return Err(ApiError::not_found(format!("job {job_id} not found")));
        }
        self.0.engine.cancel(job_id).map_err(ApiError::from)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/datasets", get(http::list_datasets))
        .route("/api/datasets/open", post(http::open_dataset))
        .route("/api/datasets/{id}", get(http::get_dataset))
        .route("/api/analyses", post(http::create_analysis))
        .route(
            "/api/analyses/{id}",
            get(http::get_analysis).patch(http::update_analysis),
        )
        .route("/api/jobs", post(http::create_job))
        .route("/api/jobs/{id}", get(http::get_job).delete(http::delete_job))
        .route("/api/events", get(events::handler))
        .route("/api/health", get(|| async { "ok" }))
        .fallback(|| async { ApiError::not_found("no such endpoint".into()) })
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// JSON error body `{"error": message}` with a status code.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub(crate) fn new(status: StatusCode, message: String) -> Self {
        ApiError { status, message }
    }
    pub(crate) fn not_found(message: String) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
    pub(crate) fn unprocessable(message: String) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<ExecError> for ApiError {
    fn from(e: ExecError) -> Self {
        let status = match e {
            ExecError::NotFound(_) => StatusCode::NOT_FOUND,
            ExecError::AlreadyFinished(_) => StatusCode::CONFLICT,
            ExecError::Kernel(_) | ExecError::Dataset(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}
