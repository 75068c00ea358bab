//! HTTP/JSON front end for the pipeline.
//!
//! One process owns the store's writer lock. Mutating endpoints (`/init`,
//! `/ingest`, `/process`) take the store exclusively; everything else
//! shares it. All heavy work runs on the blocking pool.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use bpcstore_core::align::FeatureMatrix;
use bpcstore_core::api::*;
use bpcstore_core::catalog::{self, CatalogError, Store};
use bpcstore_core::export::{self, ExportError};
use bpcstore_core::pipeline::{self, AlignSection, PipelineConfig, PipelineError};
use serde::Serialize;
use thiserror::Error;
use tokio::net::TcpListener;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<CatalogError> for ServiceError {
    fn from(e: CatalogError) -> Self {
        ServiceError::Pipeline(e.into())
    }
}

impl From<ExportError> for ServiceError {
    fn from(e: ExportError) -> Self {
        ServiceError::Pipeline(e.into())
    }
}

impl ServiceError {
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::Pipeline(e) => e.kind(),
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Internal(_) => "Internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self.kind() {
            "BadRequest" | "InvalidConfig" | "InvalidCorpus" | "InvalidRange" | "InvalidRequest" => StatusCode::BAD_REQUEST,
            "UnknownAsset" => StatusCode::NOT_FOUND,
            "Locked" => StatusCode::CONFLICT,
            "IoFailure" | "Internal" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            kind: self.kind().to_string(),
            message: self.to_string(),
        };
        (self.status(), axum::Json(body)).into_response()
    }
}

/// JSON extractor whose rejections use the service's error body.
pub struct Json<T>(pub T);

impl<S, T> FromRequest<S> for Json<T>
where
    axum::Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ServiceError;

    async fn from_request(req: axum::extract::Request, state: &S) -> Result<Self, Self::Rejection> {
        axum::Json::<T>::from_request(req, state)
            .await
            .map(|axum::Json(v)| Json(v))
            .map_err(|e| ServiceError::BadRequest(e.body_text()))
    }
}

impl<T: Serialize> IntoResponse for Json<T> {
    fn into_response(self) -> Response {
        axum::Json(self.0).into_response()
    }
}

pub struct AppState {
    config: PipelineConfig,
    store: RwLock<Option<Store>>,
}

impl AppState {
    /// The store is opened (and locked) on first use, so store-free
    /// endpoints work without touching the disk.
    pub fn new(config: PipelineConfig) -> Result<Arc<Self>, ServiceError> {
        config.validate()?;
        Ok(Arc::new(Self {
            config,
            store: RwLock::new(None),
        }))
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn write_store(&self) -> Result<RwLockWriteGuard<'_, Option<Store>>, ServiceError> {
        let mut guard = self.store.write().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(Store::open(&self.config.store.root)?);
        }
        Ok(guard)
    }

    fn read_store(&self) -> Result<RwLockReadGuard<'_, Option<Store>>, ServiceError> {
        {
            let guard = self.store.read().unwrap_or_else(|p| p.into_inner());
            if guard.is_some() {
                return Ok(guard);
            }
        }
        drop(self.write_store()?);
        Ok(self.store.read().unwrap_or_else(|p| p.into_inner()))
    }
}

type Shared = Arc<AppState>;
type ApiResult<T> = Result<Json<T>, ServiceError>;

async fn blocking<T, F>(state: Shared, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map(Json)
}

fn with_read<T>(state: &AppState, f: impl FnOnce(&Store) -> Result<T, ServiceError>) -> Result<T, ServiceError> {
    let guard = state.read_store()?;
    f(guard.as_ref().expect("store opened"))
}

fn with_write<T>(state: &AppState, f: impl FnOnce(&mut Store) -> Result<T, ServiceError>) -> Result<T, ServiceError> {
    let mut guard = state.write_store()?;
    f(guard.as_mut().expect("store opened"))
}

async fn health(State(state): State<Shared>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        store_root: state.config.store.root.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn init(State(state): State<Shared>) -> ApiResult<InitResponse> {
    blocking(state, |s| {
        with_write(s, |store| {
            Ok(InitResponse {
                store_root: store.root().to_path_buf(),
                stats: store.stats(),
            })
        })
    })
    .await
}

async fn estimate(Json(req): Json<EstimateRequest>) -> Json<EstimateResponse> {
    Json(catalog::estimate_scale(&req))
}

async fn stats(State(state): State<Shared>) -> ApiResult<StatsResponse> {
    blocking(state, |s| with_read(s, |store| Ok(store.stats()))).await
}

async fn ingest(State(state): State<Shared>, Json(req): Json<IngestRequest>) -> ApiResult<IngestResponse> {
    blocking(state, move |s| {
        let template = s.config.template.pattern.clone();
        let out = with_write(s, |store| Ok(pipeline::ingest_dir(store, &req.dir, &template)?))?;
        tracing::info!(dir = %req.dir.display(), registered = out.registered.len(), failed = out.failed.len(), "ingest");
        Ok(out)
    })
    .await
}

async fn assets(State(state): State<Shared>, Json(req): Json<AssetsRequest>) -> ApiResult<AssetsResponse> {
    blocking(state, move |s| with_read(s, |store| Ok(store.query_assets(&req.query)?))).await
}

async fn process(State(state): State<Shared>, Json(req): Json<ProcessRequest>) -> ApiResult<ProcessResponse> {
    blocking(state, move |s| {
        let workers = req.workers.unwrap_or(s.config.process.workers);
        if workers == 0 {
            return Err(ServiceError::BadRequest("workers must be at least 1".into()));
        }
        let assets = with_write(s, |store| {
            let ids = pipeline::select_assets(store, &req.query)?;
            Ok(pipeline::process_assets(store, &ids, &s.config, workers)?)
        })?;
        tracing::info!(assets = assets.len(), workers, "process");
        Ok(ProcessResponse { assets })
    })
    .await
}

fn align_for(config: &PipelineConfig, sel: &MatrixSelection) -> Result<AlignSection, ServiceError> {
    let out = AlignSection {
        grid_period_s: sel.grid_period_s.unwrap_or(config.align.grid_period_s),
        method: sel.method.unwrap_or(config.align.method),
        silence: sel.silence.unwrap_or(config.align.silence),
    };
    if !(out.grid_period_s.is_finite() && out.grid_period_s > 0.0) {
        return Err(ServiceError::BadRequest(format!("grid_period_s {} must be positive", out.grid_period_s)));
    }
    Ok(out)
}

fn build_matrix(state: &AppState, sel: &MatrixSelection) -> Result<(FeatureMatrix, usize, AlignSection), ServiceError> {
    let align = align_for(&state.config, sel)?;
    with_read(state, |store| {
        let ids = pipeline::select_assets(store, &sel.query)?;
        let m = pipeline::assemble_matrix(store, &ids, &align)?;
        Ok((m, ids.len(), align))
    })
}

async fn matrix(State(state): State<Shared>, Json(sel): Json<MatrixSelection>) -> ApiResult<MatrixResponse> {
    blocking(state, move |s| {
        let (m, n_assets, align) = build_matrix(s, &sel)?;
        let columns = m
            .columns()
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let vals: Vec<f64> = (0..m.n_rows()).filter_map(|r| m.get(r, c)).collect();
                ColumnSummary {
                    name: name.clone(),
                    valid_fraction: if m.n_rows() == 0 { 0.0 } else { vals.len() as f64 / m.n_rows() as f64 },
                    mean: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
                }
            })
            .collect();
        Ok(MatrixResponse {
            n_assets,
            n_rows: m.n_rows(),
            grid_period_s: align.grid_period_s,
            silence: align.silence,
            valid_fraction: m.valid_fraction(),
            columns,
        })
    })
    .await
}

async fn pca(State(state): State<Shared>, Json(req): Json<PcaRequest>) -> ApiResult<PcaResponse> {
    blocking(state, move |s| {
        let (m, _, _) = build_matrix(s, &req.selection)?;
        Ok(pipeline::run_pca(&m, req.k.unwrap_or(s.config.analysis.pca_k))?)
    })
    .await
}

async fn cluster(State(state): State<Shared>, Json(req): Json<ClusterRequest>) -> ApiResult<ClusterResponse> {
    blocking(state, move |s| {
        let (m, _, _) = build_matrix(s, &req.selection)?;
        let k = req.k.unwrap_or(s.config.analysis.k);
        let seed = req.seed.unwrap_or(s.config.analysis.seed);
        Ok(pipeline::run_cluster(&m, k, seed)?)
    })
    .await
}

async fn export_tensor(State(state): State<Shared>, Json(req): Json<ExportRequest>) -> ApiResult<ExportResponse> {
    blocking(state, move |s| {
        let (m, _, _) = build_matrix(s, &req.selection)?;
        let window_frames = req.window_frames.unwrap_or(s.config.export.window_frames);
        let hop_frames = req.hop_frames.unwrap_or(s.config.export.hop_frames);
        let n_windows = export::export_tensor(&m, window_frames, hop_frames, &req.path)?;
        let bytes = file_len(&req.path);
        tracing::info!(path = %req.path.display(), n_windows, "export");
        Ok(ExportResponse {
            path: req.path,
            n_windows,
            window_frames,
            n_features: m.n_columns(),
            bytes,
        })
    })
    .await
}

fn file_len(path: &Path) -> u64 {
    std::fs::metadata(path).map(|m| m.len()).unwrap_or(0)
}

async fn synth(Json(req): Json<SynthRequest>) -> ApiResult<SynthResponse> {
    tokio::task::spawn_blocking(move || pipeline::synthesize_corpus(&req.spec, &req.out_dir))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map(Json)
        .map_err(Into::into)
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/init", post(init))
        .route("/estimate", post(estimate))
        .route("/stats", get(stats))
        .route("/ingest", post(ingest))
        .route("/assets", post(assets))
        .route("/process", post(process))
        .route("/matrix", post(matrix))
        .route("/pca", post(pca))
        .route("/cluster", post(cluster))
        .route("/export", post(export_tensor))
        .route("/synth", post(synth))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: Shared,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Binds an ephemeral localhost port and serves in a background task.
pub async fn spawn_local(state: Shared) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(("127.0.0.1", 0)).await?;
    let addr = listener.local_addr()?;
    let handle = tokio::spawn(async move { axum::serve(listener, router(state)).await });
    Ok((addr, handle))
}
