//! Read-only JSON search service over a case store.
//!
//! Every request opens its own read-only connection on a blocking worker, so
//! any number of readers run concurrently and nothing is ever written.

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rsdcase_core::casebase::{
    predictor_input, CaseRecord, CasebaseError, EntityMention, InputMode, QueryFilter, SearchResult, Store,
};
use rsdcase_core::explain::{attribute, AttributionVector, ExplainConfig, ExplainError, Method, PredictorModel};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_LIMIT: usize = 50;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Store(#[from] CasebaseError),
    #[error(transparent)]
    Predictor(#[from] ExplainError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub store: PathBuf,
    pub predictor: Option<PathBuf>,
    pub explain: ExplainConfig,
}

impl ServiceConfig {
    pub fn new(store: impl Into<PathBuf>) -> Self {
        Self { store: store.into(), predictor: None, explain: ExplainConfig::default() }
    }
}

pub struct AppState {
    store: PathBuf,
    predictor: Option<PredictorModel>,
    input_mode: InputMode,
    explain: ExplainConfig,
}

impl AppState {
    /// Checks the store opens and the predictor loads before anything binds.
    pub fn open(cfg: &ServiceConfig) -> Result<Self, ServerError> {
        let n = Store::open_read_only(&cfg.store)?.count()?;
        log::info!("store {} holds {n} cases", cfg.store.display());
        cfg.explain.validate()?;
        let predictor = cfg.predictor.as_deref().map(PredictorModel::load).transpose()?;
        Ok(Self {
            store: cfg.store.clone(),
            input_mode: predictor.as_ref().map_or_else(InputMode::default, PredictorModel::input_mode),
            predictor,
            explain: cfg.explain.clone(),
        })
    }

    fn store(&self) -> Result<Store, ApiError> {
        Store::open_read_only(&self.store).map_err(ApiError::from)
    }
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub problems: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into(), problems: Vec::new() } }
    }

    fn not_found(doc_id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no case with doc_id {doc_id:?}"))
    }
}

impl From<CasebaseError> for ApiError {
    fn from(e: CasebaseError) -> Self {
        match e {
            CasebaseError::InvalidFilter(problems) => Self {
                status: StatusCode::BAD_REQUEST,
                body: ErrorBody { code: "invalid_filter".into(), message: "invalid filter".into(), problems },
            },
            e => {
                log::error!("store error: {e}");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "store_error", e.to_string())
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.body }))).into_response()
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", format!("worker failed: {e}")))?
}

// ---------------------------------------------------------------------------
// Payloads

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub cases: usize,
    pub predictor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    #[serde(default = "QueryFilter::match_all")]
    pub filter: QueryFilter,
    #[serde(default)]
    pub offset: usize,
    #[serde(default = "default_limit")]
    pub limit: usize,
}

fn default_limit() -> usize {
    DEFAULT_LIMIT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitiesResponse {
    pub doc_id: String,
    pub cover_text: Option<String>,
    pub main_text: Option<String>,
    pub entities: Vec<EntityMention>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResponse {
    pub doc_id: String,
    pub input_mode: InputMode,
    pub input: String,
    pub probability: f64,
    pub attributions: Vec<AttributionVector>,
}

#[derive(Debug, Deserialize)]
struct AttributionQuery {
    method: Option<String>,
}

// ---------------------------------------------------------------------------
// Handlers

async fn health(State(st): State<Arc<AppState>>) -> Result<Json<Health>, ApiError> {
    let s = st.clone();
    let cases = blocking(move || Ok(s.store()?.count()?)).await?;
    Ok(Json(Health { status: "ok".into(), version: VERSION.into(), cases, predictor: st.predictor.is_some() }))
}

async fn get_case(
    State(st): State<Arc<AppState>>,
    UrlPath(doc_id): UrlPath<String>,
) -> Result<Json<CaseRecord>, ApiError> {
    blocking(move || st.store()?.get(&doc_id)?.ok_or_else(|| ApiError::not_found(&doc_id))).await.map(Json)
}

async fn search(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<SearchResult>, ApiError> {
    let req: SearchRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?;
    blocking(move || Ok(st.store()?.query(&req.filter, req.offset, req.limit)?)).await.map(Json)
}

async fn entities(
    State(st): State<Arc<AppState>>,
    UrlPath(doc_id): UrlPath<String>,
) -> Result<Json<EntitiesResponse>, ApiError> {
    blocking(move || {
        let store = st.store()?;
        if store.get(&doc_id)?.is_none() {
            return Err(ApiError::not_found(&doc_id));
        }
        let doc = store.document(&doc_id)?;
        Ok(EntitiesResponse {
            entities: store.entities(&doc_id)?,
            cover_text: doc.as_ref().map(|d| d.cover_text.clone()),
            main_text: doc.map(|d| d.main_text),
            doc_id,
        })
    })
    .await
    .map(Json)
}

async fn attributions(
    State(st): State<Arc<AppState>>,
    UrlPath(doc_id): UrlPath<String>,
    Query(q): Query<AttributionQuery>,
) -> Result<Json<AttributionResponse>, ApiError> {
    let methods = match q.method.as_deref() {
        None | Some("all") => Method::ALL.to_vec(),
        Some(m) => vec![m
            .parse::<Method>()
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "unknown_method", e.to_string()))?],
    };
    if st.predictor.is_none() {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "predictor_unavailable",
            "the service was started without a predictor model",
        ));
    }
    blocking(move || {
        let record = st.store()?.get(&doc_id)?.ok_or_else(|| ApiError::not_found(&doc_id))?;
        let model = st.predictor.as_ref().expect("checked above");
        let input = predictor_input(&record, st.input_mode);
        let attributions = methods.iter().map(|&m| attribute(model, &input, m, &st.explain)).collect();
        Ok(AttributionResponse {
            probability: model.predict(&input),
            input_mode: st.input_mode,
            doc_id,
            input,
            attributions,
        })
    })
    .await
    .map(Json)
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no_route", "unknown endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/search", post(search))
        .route("/cases/{doc_id}", get(get_case))
        .route("/cases/{doc_id}/entities", get(entities))
        .route("/cases/{doc_id}/attributions", get(attributions))
        .fallback(fallback)
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve_on(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

/// Binds `addr` and serves until interrupted. `on_bound` receives the
/// actual address, which differs from `addr` when port 0 was requested.
pub fn serve(cfg: &ServiceConfig, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> Result<(), ServerError> {
    let state = Arc::new(AppState::open(cfg)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = TcpListener::bind(addr).await?;
        let local = listener.local_addr()?;
        log::info!("listening on {local}");
        on_bound(local);
        serve_on(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
}
