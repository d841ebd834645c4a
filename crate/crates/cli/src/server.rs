//! HTTP service: look recommendations and the tagger review API.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use looklab_core::detect::{ArticleTaxonomy, BoundingBox};
use looklab_core::feedback::{FeedbackRecord, FeedbackStore, Lease, QueueStats, ReviewCandidate, ReviewQueue};
use looklab_core::pipeline::{effective_k, profile_request, PdpRequest, RegistryHandle};
use looklab_core::LookError;
use serde::{Deserialize, Serialize};

use crate::RequestImages;

pub struct ReviewDesk {
    pub queue: ReviewQueue,
    pub store: FeedbackStore,
    pub taxonomy: ArticleTaxonomy,
    /// Root that candidate image paths are resolved against.
    pub image_root: PathBuf,
}

pub struct AppState {
    pub registry: Option<RegistryHandle>,
    pub images: RequestImages,
    pub review: Option<Mutex<ReviewDesk>>,
    request_seq: AtomicU64,
}

impl AppState {
    pub fn new(registry: Option<RegistryHandle>, images: RequestImages, review: Option<ReviewDesk>) -> Self {
        AppState {
            registry,
            images,
            review: review.map(Mutex::new),
            request_seq: AtomicU64::new(0),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/models", get(models))
        .route("/v1/recommend", post(recommend))
        .route("/v1/review/next", get(review_next))
        .route("/v1/review/image/{candidate_id}", get(review_image))
        .route("/v1/review/verdict", post(review_verdict))
        .route("/v1/review/renew", post(review_renew))
        .route("/v1/review/requeue", post(review_requeue))
        .route("/v1/review/stats", get(review_stats))
        .with_state(state)
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub error: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            error,
            message: message.into(),
        }
    }

    fn unavailable(what: &str) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", format!("{what} is not configured on this server"))
    }
}

impl From<LookError> for ApiError {
    fn from(e: LookError) -> Self {
        let (status, code) = match &e {
            LookError::UnknownCandidate(_) | LookError::UnknownImage(_) => (StatusCode::NOT_FOUND, "not_found"),
            LookError::AlreadyReviewed(_) => (StatusCode::CONFLICT, "already_reviewed"),
            LookError::LeasedToOther { .. } => (StatusCode::CONFLICT, "leased_to_other"),
            LookError::LeaseExpired(_) => (StatusCode::CONFLICT, "lease_expired"),
            LookError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            LookError::Request(_) | LookError::InvalidArgument(_) | LookError::Decode { .. } => {
                (StatusCode::BAD_REQUEST, "bad_request")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "model_version": state.registry.as_ref().map(|r| r.snapshot().version.clone()),
        "review": state.review.is_some(),
    }))
}

async fn models(State(state): State<Arc<AppState>>) -> ApiResult<Json<looklab_core::pipeline::RegistryInfo>> {
    let reg = state.registry.as_ref().ok_or_else(|| ApiError::unavailable("model registry"))?;
    Ok(Json(reg.snapshot().info()))
}

async fn recommend(State(state): State<Arc<AppState>>, Json(mut req): Json<PdpRequest>) -> ApiResult<Response> {
    let registry = state
        .registry
        .as_ref()
        .ok_or_else(|| ApiError::unavailable("model registry"))?
        .snapshot();
    if req.request_id.is_empty() {
        req.request_id = format!("req-{}", state.request_seq.fetch_add(1, Ordering::Relaxed));
    }
    let st = state.clone();
    let (rec, timings) = tokio::task::spawn_blocking(move || {
        let k = effective_k(&req);
        profile_request(&req, &registry, k, &st.images)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let timing = timings
        .iter()
        .map(|t| format!("{};dur={:.3}", serde_json::to_value(t.stage).unwrap_or_default().as_str().unwrap_or(""), t.elapsed_ms))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(([("server-timing", timing)], Json(rec)).into_response())
}

fn desk(state: &AppState) -> ApiResult<std::sync::MutexGuard<'_, ReviewDesk>> {
    let review = state.review.as_ref().ok_or_else(|| ApiError::unavailable("review queue"))?;
    Ok(review.lock().unwrap_or_else(|e| e.into_inner()))
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    tagger: String,
}

/// One box drawn over the review image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlayBox {
    pub candidate_id: String,
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub article_type: String,
    pub score: f64,
    /// True for the box under review.
    pub focus: bool,
}

/// What the review client renders for one leased candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewView {
    pub candidate: ReviewCandidate,
    pub image_url: String,
    pub boxes: Vec<OverlayBox>,
    /// Finer article types grouped by broad category, for relabelling.
    pub taxonomy: ArticleTaxonomy,
    pub lease: Lease,
    pub lease_ms: u64,
}

async fn review_next(State(state): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> ApiResult<Response> {
    if q.tagger.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "tagger must be non-empty"));
    }
    let mut d = desk(&state)?;
    let Some(leased) = d.queue.next(&q.tagger) else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    let image = leased.candidate.image_path.clone();
    let boxes = std::iter::once(&leased.candidate)
        .chain(
            d.queue
                .candidates()
                .filter(|c| c.image_path == image && c.candidate_id != leased.candidate.candidate_id),
        )
        .map(|c| OverlayBox {
            candidate_id: c.candidate_id.clone(),
            bbox: c.detection.bbox,
            article_type: c.detection.article_type.clone(),
            score: c.detection.score,
            focus: c.candidate_id == leased.candidate.candidate_id,
        })
        .collect();
    let view = ReviewView {
        image_url: format!("/v1/review/image/{}", encode_segment(&leased.candidate.candidate_id)),
        candidate: leased.candidate,
        boxes,
        taxonomy: d.taxonomy.clone(),
        lease: leased.lease,
        lease_ms: d.queue.lease_ms(),
    };
    Ok(Json(view).into_response())
}

/// Percent-encodes everything outside the unreserved set.
fn encode_segment(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

async fn review_image(State(state): State<Arc<AppState>>, Path(candidate_id): Path<String>) -> ApiResult<Response> {
    let path = {
        let d = desk(&state)?;
        let c = d
            .queue
            .get(&candidate_id)
            .ok_or_else(|| LookError::UnknownCandidate(candidate_id.clone()))?;
        looklab_core::io::resolve(&d.image_root, &c.image_path)
    };
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::from(LookError::io(path.clone(), e)))?;
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "image/png",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerdictAck {
    pub candidate_id: String,
    pub stored: usize,
}

async fn review_verdict(State(state): State<Arc<AppState>>, Json(record): Json<FeedbackRecord>) -> ApiResult<Json<VerdictAck>> {
    let mut d = desk(&state)?;
    let candidate_id = record.candidate_id.clone();
    let ReviewDesk { queue, store, taxonomy, .. } = &mut *d;
    queue.ingest(record, store, taxonomy)?;
    Ok(Json(VerdictAck {
        candidate_id,
        stored: store.len(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RenewRequest {
    pub candidate_id: String,
    pub tagger_id: String,
}

async fn review_renew(State(state): State<Arc<AppState>>, Json(req): Json<RenewRequest>) -> ApiResult<Json<Lease>> {
    let mut d = desk(&state)?;
    Ok(Json(d.queue.renew(&req.candidate_id, &req.tagger_id)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RequeueRequest {
    pub candidate_id: String,
}

async fn review_requeue(
    State(state): State<Arc<AppState>>,
    Json(req): Json<RequeueRequest>,
) -> ApiResult<Json<BTreeMap<&'static str, String>>> {
    let mut d = desk(&state)?;
    let id = d.queue.requeue(&req.candidate_id)?;
    Ok(Json([("candidate_id", id)].into()))
}

async fn review_stats(State(state): State<Arc<AppState>>) -> ApiResult<Json<QueueStats>> {
    Ok(Json(desk(&state)?.queue.stats()))
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
