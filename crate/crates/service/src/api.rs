//! HTTP API. Explanations run on the blocking pool and are polled by id.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use exemplar_core::classifier::{predict, BlackBox};
use exemplar_core::explainer::{derive_seed, explain, ExplainConfig};
use exemplar_core::image::Image;
use jsonschema::Validator;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::ServiceError;
use crate::registry::Registry;
use crate::schema::{check_record, schema_text};
use crate::store::{now, HistoryEntry, RefinementKind, SessionHandle, SessionState, SessionStore};

pub const MAX_BODY: usize = 16 * 1024 * 1024;
/// Largest `count` accepted by the refinement endpoints.
pub const MAX_REFINEMENT: usize = 64;
const REFINE_STREAM: u64 = 0xE5E5;

pub struct AppState {
    pub registry: Arc<Registry>,
    pub store: Arc<SessionStore>,
    pub explain: ExplainConfig,
    pub validator: Validator,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": msg.into() }) }
    }

    fn bad_request(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, msg)
    }

    fn not_found(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, msg)
    }

    fn conflict(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, msg)
    }

    fn internal(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, msg)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        log::error!("{e}");
        ApiError::internal(e.to_string())
    }
}

impl From<exemplar_core::Error> for ApiError {
    fn from(e: exemplar_core::Error) -> Self {
        ServiceError::from(e).into()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = State<Arc<AppState>>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/models", get(models))
        .route("/classify", post(classify))
        .route("/explanations", post(create_explanation))
        .route("/explanations/{id}", get(get_explanation))
        .route("/explanations/{id}/exemplars", post(more_exemplars))
        .route("/explanations/{id}/counterexemplars", post(more_counterexemplars))
        .route("/explanations/{id}/saliency.png", get(saliency_png))
        .route("/artifacts/{name}", get(artifact))
        .route("/schemas/{name}", get(schema))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(Arc::new(state))
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

struct ImageUpload {
    bytes: Vec<u8>,
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ImageJson {
    image: String,
    seed: Option<u64>,
}

/// Accepts `{"image": <base64 or data URL>, "seed"?: n}` or a multipart form
/// with an `image` file field and an optional `seed` field.
async fn read_upload(req: Request) -> ApiResult<ImageUpload> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if is_multipart {
        let mut form = Multipart::from_request(req, &()).await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        let mut upload = ImageUpload { bytes: Vec::new(), seed: None };
        while let Some(field) = form.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
            match field.name() {
                Some("image") => {
                    upload.bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?.to_vec()
                }
                Some("seed") => {
                    let text = field.text().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
                    upload.seed = Some(
                        text.trim().parse().map_err(|_| ApiError::bad_request("seed must be an unsigned integer"))?,
                    );
                }
                _ => {}
            }
        }
        if upload.bytes.is_empty() {
            return Err(ApiError::bad_request("multipart form has no image field"));
        }
        return Ok(upload);
    }
    let Json(body) = Json::<ImageJson>::from_request(req, &()).await?;
    let b64 = match body.image.split_once(',') {
        Some((head, data)) if head.starts_with("data:") => data,
        _ => body.image.as_str(),
    };
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::bad_request(format!("image is not valid base64: {e}")))?;
    Ok(ImageUpload { bytes, seed: body.seed })
}

fn decode_image(state: &AppState, bytes: &[u8]) -> ApiResult<Image> {
    let img = Image::decode(bytes).map_err(|e| ApiError::bad_request(format!("malformed image: {e}")))?;
    Ok(state.registry.prepare(&img))
}

fn session(state: &AppState, id: &str) -> ApiResult<SessionHandle> {
    state.store.get(id)?.ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
}

fn lock(h: &SessionHandle) -> ApiResult<std::sync::MutexGuard<'_, SessionState>> {
    h.lock().map_err(|_| ApiError::internal("session lock poisoned"))
}

fn require_done(st: &SessionState) -> ApiResult<()> {
    if st.session.status.is_done() {
        Ok(())
    } else {
        Err(ApiError::conflict(format!(
            "explanation is not available (status {})",
            serde_json::to_value(st.session.status).unwrap_or_default()
        )))
    }
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn models(State(state): Shared) -> Json<Value> {
    Json(json!({ "models": [state.registry.info()] }))
}

async fn classify(State(state): Shared, req: Request) -> ApiResult<Json<Value>> {
    let upload = read_upload(req).await?;
    blocking(move || {
        let img = decode_image(&state, &upload.bytes)?;
        let bb = &state.registry.bundle.classifier;
        let (scores, label) = predict(bb, &img)?;
        Ok(Json(json!({
            "label": label,
            "scores": scores.0,
            "class_codes": bb.class_codes(),
        })))
    })
    .await
}

fn fresh_seed() -> u64 {
    let b = uuid::Uuid::new_v4();
    u64::from_le_bytes(b.as_bytes()[..8].try_into().expect("eight bytes"))
}

async fn create_explanation(State(state): Shared, req: Request) -> ApiResult<Response> {
    let upload = read_upload(req).await?;
    let seed = upload.seed.unwrap_or_else(fresh_seed);
    let st = state.clone();
    let (id, handle, img) = blocking(move || {
        let img = decode_image(&st, &upload.bytes)?;
        let (id, handle) = st.store.create(&img, seed, st.registry.model_ref())?;
        Ok((id, handle, img))
    })
    .await?;
    let st = state.clone();
    let sid = id.clone();
    tokio::task::spawn_blocking(move || {
        let bundle = &st.registry.bundle;
        let outcome = explain(&img, &bundle.classifier, &bundle.aae, &st.explain, seed).map_err(|e| e.to_string());
        if let Err(e) = &outcome {
            log::warn!("session {sid}: {e}");
        }
        let saved =
            handle.lock().map_err(ServiceError::from).and_then(|mut guard| st.store.complete(&mut guard, outcome));
        if let Err(e) = saved {
            log::error!("session {sid}: could not store the explanation: {e}");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "session_id": id, "status": "pending", "seed": seed }))).into_response())
}

async fn get_explanation(State(state): Shared, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let handle = session(&state, &id)?;
        let st = lock(&handle)?;
        if let Some(record) = st.record() {
            check_record(&state.validator, record)
                .map_err(|e| ApiError::internal(format!("explanation failed validation: {e}")))?;
        }
        Ok(Json(serde_json::to_value(st.view()).map_err(ServiceError::from)?))
    })
    .await
}

#[derive(Deserialize)]
struct RefineRequest {
    count: usize,
    target_class: Option<String>,
}

fn check_count(count: usize) -> ApiResult<()> {
    if count == 0 || count > MAX_REFINEMENT {
        return Err(ApiError::bad_request(format!("count must be between 1 and {MAX_REFINEMENT}")));
    }
    Ok(())
}

async fn more_exemplars(
    State(state): Shared,
    Path(id): Path<String>,
    body: Result<Json<RefineRequest>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(req) = body?;
    check_count(req.count)?;
    blocking(move || {
        let handle = session(&state, &id)?;
        let mut st = lock(&handle)?;
        require_done(&st)?;
        let seed = derive_seed(st.session.seed, REFINE_STREAM, st.session.history.len() as u64);
        let bundle = &state.registry.bundle;
        let e = st.explanation.as_mut().ok_or_else(|| ApiError::internal("missing explanation state"))?;
        let before = e.exemplars.len();
        let added = e.add_exemplars(&bundle.classifier, &bundle.aae, &state.explain, req.count, seed)?;
        let entry = HistoryEntry {
            index: 0,
            at: now(),
            kind: RefinementKind::Exemplars,
            count: req.count,
            target_class: None,
            seed,
            added,
        };
        let entry = state.store.record_refinement(&mut st, entry)?;
        let record = st.record().ok_or_else(|| ApiError::internal("missing explanation record"))?;
        Ok(Json(json!({
            "added": added,
            "exemplars": record.exemplars[before..],
            "saliency": record.saliency.as_ref().map(|s| &s.r#ref),
            "history_entry": entry,
        })))
    })
    .await
}

async fn more_counterexemplars(
    State(state): Shared,
    Path(id): Path<String>,
    body: Result<Json<RefineRequest>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(req) = body?;
    check_count(req.count)?;
    blocking(move || {
        let handle = session(&state, &id)?;
        let mut st = lock(&handle)?;
        require_done(&st)?;
        let seed = derive_seed(st.session.seed, REFINE_STREAM, st.session.history.len() as u64);
        let bundle = &state.registry.bundle;
        let e = st.explanation.as_mut().ok_or_else(|| ApiError::internal("missing explanation state"))?;
        let before = e.counterexemplars.len();
        let added = e.add_counterexemplars(
            &bundle.classifier,
            &bundle.aae,
            &state.explain,
            req.count,
            req.target_class.as_deref(),
            seed,
        )?;
        let Some(added) = added else {
            let available = e.counter_classes();
            let msg = match &req.target_class {
                Some(c) => format!("no counterfactual rule leads to class {c}"),
                None => "this explanation has no counterfactual rules".into(),
            };
            return Err(ApiError {
                status: StatusCode::CONFLICT,
                body: json!({ "error": msg, "available_classes": available }),
            });
        };
        let entry = HistoryEntry {
            index: 0,
            at: now(),
            kind: RefinementKind::Counterexemplars,
            count: req.count,
            target_class: req.target_class.clone(),
            seed,
            added,
        };
        let entry = state.store.record_refinement(&mut st, entry)?;
        let record = st.record().ok_or_else(|| ApiError::internal("missing explanation record"))?;
        Ok(Json(json!({
            "added": added,
            "counterexemplars": record.counterexemplars[before..],
            "history_entry": entry,
        })))
    })
    .await
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response()
}

async fn saliency_png(State(state): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    blocking(move || {
        let handle = session(&state, &id)?;
        let st = lock(&handle)?;
        require_done(&st)?;
        let r#ref = st
            .record()
            .and_then(|r| r.saliency.as_ref())
            .map(|s| s.r#ref.clone())
            .ok_or_else(|| ApiError::not_found("no saliency map: the explanation has no exemplars"))?;
        let name = r#ref.trim_start_matches("artifacts/");
        let bytes = state
            .store
            .artifact(name)?
            .ok_or_else(|| ApiError::internal("saliency artifact missing from the store"))?;
        Ok(png(bytes))
    })
    .await
}

async fn artifact(State(state): Shared, Path(name): Path<String>) -> ApiResult<Response> {
    blocking(move || {
        let bytes =
            state.store.artifact(&name)?.ok_or_else(|| ApiError::not_found(format!("unknown artifact {name}")))?;
        Ok(png(bytes))
    })
    .await
}

async fn schema(Path(name): Path<String>) -> ApiResult<Response> {
    let text = schema_text(&name).ok_or_else(|| ApiError::not_found(format!("unknown schema {name}")))?;
    Ok(([(header::CONTENT_TYPE, "application/schema+json")], text).into_response())
}
