//! HTTP API for the review interface. Handlers are thin: they parse the
//! request, hand blocking work to the pipeline or the store, and shape JSON.
//! Every error body is `{"error": {"code", "message"}}`.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cdemapper_core::pipeline::{self, map_values, parse_collections, recommend_all, PipelineError};
use cdemapper_core::store::{DecisionOrigin, DecisionRequest, ElementSort, ElementStatus, Store, StoreError};
use cdemapper_core::{Gateway, IndexBundle, PipelineConfig};
use serde::Deserialize;
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::{ServeDir, ServeFile};
use tracing::{info, warn};

use crate::jobs::Jobs;

const UPLOAD_LIMIT: usize = 32 * 1024 * 1024;
const DEFAULT_PAGE_SIZE: usize = 50;

pub struct Shared {
    pub bundle: IndexBundle,
    pub store: Store,
    pub gateway: Option<Gateway>,
    pub jobs: Jobs,
    pub default_config: PipelineConfig,
}

pub type AppState = Arc<Shared>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            warn!(code = self.code, "{}", self.message);
        }
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        match e {
            StoreError::NotFound { .. } => Self::not_found(message),
            StoreError::Import(_) => Self::new(StatusCode::BAD_REQUEST, "import_error", message),
            StoreError::Invalid(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_decision", message),
            StoreError::Corrupt { .. } | StoreError::Io(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", message)
            }
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let message = e.to_string();
        match e {
            PipelineError::Input(_) | PipelineError::Config(_) => Self::bad_request(message),
            PipelineError::GatewayRequired => Self::new(StatusCode::SERVICE_UNAVAILABLE, "llm_unavailable", message),
            PipelineError::MissingVectors | PipelineError::ModelMismatch { .. } => {
                Self::new(StatusCode::CONFLICT, "index_incompatible", message)
            }
            PipelineError::Gateway(_) => Self::new(StatusCode::BAD_GATEWAY, "upstream_error", message),
            PipelineError::Index(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "index_error", message),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(e.status(), "invalid_request", e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

/// Builds the full application: the API under `/api`, optional static UI
/// assets at the root, and CORS for the listed origins.
pub fn router(state: AppState, static_dir: Option<&Path>, cors_allowlist: &[String]) -> Router {
    let api = Router::new()
        .route("/info", get(info_handler))
        .route("/projects", post(create_project).get(list_projects))
        .route("/projects/{pid}", get(project_summary))
        .route("/projects/{pid}/elements", get(list_elements))
        .route("/projects/{pid}/elements/{eid}", get(get_element))
        .route("/projects/{pid}/elements/{eid}/candidates", post(candidates))
        .route("/projects/{pid}/elements/{eid}/decision", post(decision))
        .route("/projects/{pid}/elements/{eid}/value-mappings", post(value_mappings))
        .route("/projects/{pid}/map-all", post(map_all))
        .route("/projects/{pid}/export", get(export))
        .route("/jobs/{jid}", get(job_status))
        .route("/search", post(search))
        .route("/collections", get(collections))
        .route("/cde/{tiny_id}", get(cde))
        .fallback(|| async { ApiError::not_found("no such API endpoint") })
        .layer(DefaultBodyLimit::max(UPLOAD_LIMIT));

    let mut app = Router::new().nest("/api", api).with_state(state);
    if let Some(dir) = static_dir {
        app = app.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(dir.join("index.html"))));
    }
    let origins: Vec<HeaderValue> = cors_allowlist.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    if !origins.is_empty() {
        app = app.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::list(origins))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        );
    }
    app
}

async fn info_handler(State(s): State<AppState>) -> Json<serde_json::Value> {
    let gateway = match &s.gateway {
        Some(g) if g.is_mock() => "mock",
        Some(_) => "http",
        None => "none",
    };
    Json(json!({
        "snapshot_date": s.bundle.meta.snapshot_date,
        "record_count": s.bundle.meta.record_count,
        "embedding_model": s.bundle.meta.embedding_model,
        "gateway": gateway,
        "default_config": s.default_config,
    }))
}

async fn create_project(State(s): State<AppState>, mut multipart: Multipart) -> ApiResult<Response> {
    let mut csv: Option<Vec<u8>> = None;
    let mut name = String::new();
    let mut config = s.default_config.clone();
    let mut overrides: Vec<(String, String)> = Vec::new();
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
        let field_name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        let text = || String::from_utf8_lossy(&bytes).into_owned();
        match field_name.as_str() {
            "file" => csv = Some(bytes.to_vec()),
            "name" => name = text(),
            "config" => config = PipelineConfig::from_kv(&text())?,
            "preset" | "collections" | "top_k" => overrides.push((field_name, text())),
            other => return Err(ApiError::bad_request(format!("unexpected form field `{other}`"))),
        }
    }
    for (k, v) in &overrides {
        config.set(k, v)?;
    }
    let csv = csv.ok_or_else(|| ApiError::bad_request("missing `file` field with the dictionary CSV"))?;
    let (summary, report) = blocking(move || Ok(s.store.create_project(&name, config, csv.as_slice())?)).await?;
    info!(project = %summary.project_id, imported = report.imported, "project created");
    Ok((StatusCode::CREATED, Json(json!({ "project": summary, "import": report }))).into_response())
}

async fn list_projects(State(s): State<AppState>) -> ApiResult<Response> {
    let list = blocking(move || Ok(s.store.list_projects()?)).await?;
    Ok(Json(list).into_response())
}

async fn project_summary(State(s): State<AppState>, UrlPath(pid): UrlPath<String>) -> ApiResult<Response> {
    let summary = blocking(move || Ok(s.store.summary(&pid)?)).await?;
    Ok(Json(summary).into_response())
}

#[derive(Debug, Deserialize)]
struct ElementQuery {
    status: Option<String>,
    page: Option<usize>,
    page_size: Option<usize>,
    sort: Option<String>,
}

async fn list_elements(
    State(s): State<AppState>,
    UrlPath(pid): UrlPath<String>,
    query: Result<Query<ElementQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query?;
    let status = match q.status.as_deref().filter(|v| !v.is_empty()) {
        Some(v) => Some(ElementStatus::parse(v).ok_or_else(|| ApiError::bad_request(format!("unknown status `{v}`")))?),
        None => None,
    };
    let sort = ElementSort::parse(q.sort.as_deref().unwrap_or(""))
        .ok_or_else(|| ApiError::bad_request("sort must be one of id, name, -name, status"))?;
    let page = q.page.unwrap_or(1);
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    let result = blocking(move || Ok(s.store.read(&pid, |p| p.page(status, sort, page, page_size))?)).await?;
    Ok(Json(result).into_response())
}

async fn get_element(State(s): State<AppState>, UrlPath((pid, eid)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let element = blocking(move || Ok(s.store.read(&pid, |p| p.element(&eid).cloned())??)).await?;
    Ok(Json(element).into_response())
}

async fn candidates(State(s): State<AppState>, UrlPath((pid, eid)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let list = blocking(move || {
        let (element, config) = s
            .store
            .read(&pid, |p| p.element(&eid).map(|e| (e.imported.element.clone(), p.meta.config.clone())))??;
        let list = pipeline::recommend(&element, &config, &s.bundle, s.gateway.as_ref())?;
        s.store.record_candidates(&pid, list.clone())?;
        Ok(list)
    })
    .await?;
    Ok(Json(list).into_response())
}

#[derive(Debug, Deserialize)]
struct DecisionBody {
    selected: Option<String>,
    origin: DecisionOrigin,
    #[serde(default)]
    value_mappings: Vec<cdemapper_core::llm::ValueMatch>,
}

async fn decision(
    State(s): State<AppState>,
    UrlPath((pid, eid)): UrlPath<(String, String)>,
    body: Result<Json<DecisionBody>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(body) = body?;
    let request = DecisionRequest {
        element_id: eid.clone(),
        selected: body.selected,
        origin: body.origin,
        value_mappings: body.value_mappings,
    };
    let status = blocking(move || Ok(s.store.record_decision(&pid, &request, &s.bundle.corpus)?)).await?;
    Ok(Json(json!({ "element_id": eid, "status": status })).into_response())
}

#[derive(Debug, Deserialize)]
struct ValueMappingBody {
    tiny_id: String,
    /// Overrides the element's own value set when present.
    values: Option<Vec<String>>,
}

async fn value_mappings(
    State(s): State<AppState>,
    UrlPath((pid, eid)): UrlPath<(String, String)>,
    body: Result<Json<ValueMappingBody>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(body) = body?;
    let result = blocking(move || {
        let values = match body.values {
            Some(v) => v,
            None => s.store.read(&pid, |p| p.element(&eid).map(|e| e.imported.element.value_set.clone()))??,
        };
        let target = s
            .bundle
            .corpus
            .get(&body.tiny_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown CDE `{}`", body.tiny_id)))?;
        let gateway = s.gateway.as_ref().ok_or(PipelineError::GatewayRequired)?;
        Ok(map_values(&values, target, gateway))
    })
    .await?;
    Ok(Json(result).into_response())
}

async fn map_all(State(s): State<AppState>, UrlPath(pid): UrlPath<String>) -> ApiResult<Response> {
    let shared = s.clone();
    let project = pid.clone();
    let (elements, config) = blocking(move || {
        Ok(shared.store.read(&project, |p| {
            let elements: Vec<_> = p.elements.iter().map(|e| e.imported.element.clone()).collect();
            (elements, p.meta.config.clone())
        })?)
    })
    .await?;
    let job = s.jobs.create(&pid, elements.len());
    if elements.is_empty() {
        s.jobs.finish(&job.job_id, 0, None);
    } else {
        let job_id = job.job_id.clone();
        let worker = s.clone();
        tokio::task::spawn_blocking(move || run_map_all(&worker, &pid, &job_id, &elements, &config));
    }
    let status = s.jobs.get(&job.job_id).unwrap_or(job);
    Ok((StatusCode::ACCEPTED, Json(status)).into_response())
}

fn run_map_all(
    s: &Shared,
    pid: &str,
    job_id: &str,
    elements: &[cdemapper_core::SourceElement],
    config: &PipelineConfig,
) {
    let lists = recommend_all(elements, config, &s.bundle, s.gateway.as_ref(), &|done| {
        s.jobs.progress(job_id, done)
    });
    let mut failed = 0;
    for list in lists {
        match list {
            Ok(list) => {
                if let Err(e) = s.store.record_candidates(pid, list) {
                    s.jobs.finish(job_id, failed, Some(e.to_string()));
                    return;
                }
            }
            Err(e) => {
                warn!(project = pid, "map-all element failed: {e}");
                failed += 1;
            }
        }
    }
    info!(project = pid, job = job_id, failed, "map-all finished");
    s.jobs.finish(job_id, failed, None);
}

async fn job_status(State(s): State<AppState>, UrlPath(jid): UrlPath<String>) -> ApiResult<Response> {
    let job = s.jobs.get(&jid).ok_or_else(|| ApiError::not_found(format!("unknown job `{jid}`")))?;
    Ok(Json(job).into_response())
}

async fn export(State(s): State<AppState>, UrlPath(pid): UrlPath<String>) -> ApiResult<Response> {
    let file = format!("attachment; filename=\"cdemapper-{pid}.csv\"");
    let bytes = blocking(move || Ok(s.store.export_csv(&pid)?)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()),
            (header::CONTENT_DISPOSITION, file),
        ],
        bytes,
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
struct SearchBody {
    query: String,
    #[serde(default)]
    collections: Vec<String>,
    top_k: Option<usize>,
}

async fn search(State(s): State<AppState>, body: Result<Json<SearchBody>, JsonRejection>) -> ApiResult<Response> {
    let Json(body) = body?;
    let list = blocking(move || {
        let mut config = s.default_config.clone();
        if let Some(k) = body.top_k {
            config.top_k = k;
        }
        let collections = parse_collections(&body.collections.join(","));
        Ok(pipeline::manual_search(&body.query, collections, &s.bundle, &config, s.gateway.as_ref())?)
    })
    .await?;
    Ok(Json(list).into_response())
}

async fn collections(State(s): State<AppState>) -> Json<serde_json::Value> {
    let rows: Vec<_> = s
        .bundle
        .corpus
        .collections()
        .into_iter()
        .map(|(name, count)| json!({ "name": name, "count": count }))
        .collect();
    Json(json!(rows))
}

async fn cde(State(s): State<AppState>, UrlPath(tiny_id): UrlPath<String>) -> ApiResult<Response> {
    let record = s
        .bundle
        .corpus
        .get(&tiny_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown CDE `{tiny_id}`")))?;
    Ok(Json(record).into_response())
}

/// Collection filter helper shared with the CLI: an empty list means all.
pub fn collection_set(list: &[String]) -> Option<BTreeSet<String>> {
    parse_collections(&list.join(","))
}
