//! HTTP service for the interactive workflow: upload a rubbing, recognise
//! characters at an adjustable score threshold, and classify hand-drawn crops.
//!
//! Each uploaded image becomes an in-memory session. The detector runs once
//! per session; its raw head outputs are cached so that changing the
//! threshold only re-decodes.
//!
//! | method | path                            | body / query                 |
//! |--------|---------------------------------|------------------------------|
//! | POST   | `/api/images`                   | PNG or JPEG bytes            |
//! | POST   | `/api/images/{id}/recognize`    | `?confidence=0.1`            |
//! | POST   | `/api/images/{id}/predict-crop` | `{"x","y","w","h","top_k"}`  |
//! | GET    | `/api/classes`                  |                              |
//! | GET    | `/api/health`                   |                              |
//!
//! Errors are `{"error": {"code", "message"}}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime};

use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, JsonRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::OnceCell;
use tower_http::services::ServeDir;

use crate::classify::{ClassPrediction, Classifier, ClassifyError, CropRect, DEFAULT_TOP_K};
use crate::detect::{DetectionRecord, Detector, FeatureMaps, DEFAULT_CONFIDENCE, DEFAULT_NMS};
use crate::labels::Labels;

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_MAX_UPLOAD: usize = 16 * 1024 * 1024;
pub const DEFAULT_SESSION_TTL: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_upload_bytes: usize,
    pub session_ttl: Duration,
    pub nms_threshold: f32,
    pub static_dir: Option<PathBuf>,
    pub spool_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_upload_bytes: DEFAULT_MAX_UPLOAD,
            session_ttl: DEFAULT_SESSION_TTL,
            nms_threshold: DEFAULT_NMS,
            static_dir: None,
            spool_dir: None,
        }
    }
}

/// Loaded networks. Either may be absent; endpoints needing it answer 503.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub detector: Option<Detector>,
    pub classifier: Option<Classifier>,
}

impl Models {
    /// Class names served by `/api/classes`: the detector's, else the classifier's.
    pub fn labels(&self) -> Labels {
        match (&self.detector, &self.classifier) {
            (Some(d), _) => d.labels().clone(),
            (None, Some(c)) => c.labels().clone(),
            (None, None) => Labels::new(Vec::new()),
        }
    }
}

pub struct ImageSession {
    pub id: String,
    pub image: Arc<RgbImage>,
    pub uploaded_at: SystemTime,
    last_access: Mutex<Instant>,
    features: OnceCell<Arc<FeatureMaps>>,
}

impl ImageSession {
    fn new(id: String, image: RgbImage) -> Self {
        Self {
            id,
            image: Arc::new(image),
            uploaded_at: SystemTime::now(),
            last_access: Mutex::new(Instant::now()),
            features: OnceCell::new(),
        }
    }

    fn touch(&self) {
        *self.last_access.lock().expect("session clock poisoned") = Instant::now();
    }

    fn idle(&self) -> Duration {
        self.last_access
            .lock()
            .expect("session clock poisoned")
            .elapsed()
    }

    /// Whether the detector has already run for this image.
    pub fn has_cached_features(&self) -> bool {
        self.features.initialized()
    }
}

pub struct AppState {
    pub models: Models,
    pub config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<ImageSession>>>,
}

impl AppState {
    pub fn new(models: Models, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            models,
            config,
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn session(&self, id: &str) -> Option<Arc<ImageSession>> {
        let found = self
            .sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()?;
        if found.idle() > self.config.session_ttl {
            self.sessions
                .write()
                .expect("session table poisoned")
                .remove(id);
            return None;
        }
        found.touch();
        Some(found)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session table poisoned").len()
    }

    /// Drops sessions idle longer than the TTL; returns how many were removed.
    pub fn expire_sessions(&self) -> usize {
        let ttl = self.config.session_ttl;
        let mut table = self.sessions.write().expect("session table poisoned");
        let before = table.len();
        table.retain(|_, s| s.idle() <= ttl);
        before - table.len()
    }

    fn insert(&self, session: ImageSession) -> Arc<ImageSession> {
        let session = Arc::new(session);
        self.sessions
            .write()
            .expect("session table poisoned")
            .insert(session.id.clone(), session.clone());
        session
    }
}

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

    fn not_found(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("no image session `{id}`"),
        )
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }

    fn unavailable(what: &str) -> Self {
        Self::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "model_not_loaded",
            format!("{what} model is not loaded"),
        )
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "error": { "code": self.code, "message": self.message } })),
        )
            .into_response()
    }
}

#[derive(Debug, Serialize)]
pub struct UploadResponse {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Serialize)]
pub struct RecognizeResponse {
    pub detections: Vec<DetectionRecord>,
    pub model: &'static str,
    pub confidence_used: f32,
    /// Boxes at or above the threshold before suppression.
    pub candidate_count: usize,
}

#[derive(Debug, Deserialize)]
pub struct CropBody {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub top_k: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct PredictResponse {
    pub predictions: Vec<ClassPrediction>,
}

async fn upload(
    State(state): State<Arc<AppState>>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<UploadResponse>, ApiError> {
    let body = body.map_err(|r| {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                "payload_too_large",
                format!(
                    "upload exceeds the {} byte limit",
                    state.config.max_upload_bytes
                ),
            )
        } else {
            ApiError::new(StatusCode::BAD_REQUEST, "bad_request", r.body_text())
        }
    })?;
    if body.is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "empty_body",
            "request body is empty",
        ));
    }
    let format = image::guess_format(&body).ok();
    let decoded = {
        let bytes = body.clone();
        tokio::task::spawn_blocking(move || image::load_from_memory(&bytes))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
    };
    let image = decoded
        .map_err(|e| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "undecodable_image",
                format!("cannot decode image: {e}"),
            )
        })?
        .to_rgb8();
    let id = uuid::Uuid::new_v4().simple().to_string();
    if let Some(dir) = &state.config.spool_dir {
        let ext = format
            .and_then(|f| f.extensions_str().first().copied())
            .unwrap_or("bin");
        let path = dir.join(format!("{id}.{ext}"));
        if let Err(e) = tokio::fs::write(&path, &body).await {
            tracing::warn!("cannot spool {}: {e}", path.display());
        }
    }
    let (width, height) = image.dimensions();
    let session = state.insert(ImageSession::new(id, image));
    tracing::info!(id = %session.id, width, height, "image uploaded");
    Ok(Json(UploadResponse {
        image_id: session.id.clone(),
        width,
        height,
    }))
}

async fn recognize(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> Result<Json<RecognizeResponse>, ApiError> {
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let confidence = match query.get("confidence") {
        None => DEFAULT_CONFIDENCE,
        Some(raw) => raw.trim().parse::<f32>().map_err(|_| {
            ApiError::unprocessable(format!("confidence `{raw}` is not a number"))
        })?,
    };
    if !(0.0..=1.0).contains(&confidence) {
        return Err(ApiError::unprocessable(format!(
            "confidence must be in [0, 1], got {confidence}"
        )));
    }
    if state.models.detector.is_none() {
        return Err(ApiError::unavailable("detector"));
    }
    let features = session
        .features
        .get_or_try_init(|| {
            let state = state.clone();
            let image = session.image.clone();
            async move {
                tokio::task::spawn_blocking(move || {
                    let detector = state.models.detector.as_ref().expect("checked above");
                    detector.feature_maps(&image).map(Arc::new)
                })
                .await
                .map_err(|e| ApiError::internal(e.to_string()))?
                .map_err(|e| ApiError::internal(e.to_string()))
            }
        })
        .await?
        .clone();
    let detector = state.models.detector.as_ref().expect("checked above");
    let candidate_count = detector
        .candidates(&features, confidence)
        .map_err(|e| ApiError::internal(e.to_string()))?
        .len();
    let detections = detector
        .decode(&features, confidence, state.config.nms_threshold)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(RecognizeResponse {
        detections: detections.iter().map(DetectionRecord::from).collect(),
        model: "yolov3-tiny",
        confidence_used: confidence,
        candidate_count,
    }))
}

async fn predict_crop(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<CropBody>, JsonRejection>,
) -> Result<Json<PredictResponse>, ApiError> {
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let Json(body) = body.map_err(|r| ApiError::unprocessable(r.body_text()))?;
    let Some(classifier) = state.models.classifier.as_ref() else {
        return Err(ApiError::unavailable("classifier"));
    };
    if ![body.x, body.y, body.w, body.h].iter().all(|v| v.is_finite()) {
        return Err(ApiError::unprocessable("crop rectangle must be finite"));
    }
    let top_k = body.top_k.unwrap_or(DEFAULT_TOP_K);
    if top_k == 0 {
        return Err(ApiError::unprocessable("top_k must be at least 1"));
    }
    let top_k = top_k.min(classifier.num_classes());
    let rect = CropRect::new(
        body.x.round() as i64,
        body.y.round() as i64,
        body.w.round() as i64,
        body.h.round() as i64,
    );
    // reject degenerate rectangles before queueing work
    rect.clip(session.image.width(), session.image.height())
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let image = session.image.clone();
    let state2 = state.clone();
    let predictions = tokio::task::spawn_blocking(move || {
        let classifier = state2.models.classifier.as_ref().expect("checked above");
        classifier.predict(&image, rect, top_k)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| match e {
        ClassifyError::TooSmall { .. }
        | ClassifyError::OutsideImage { .. }
        | ClassifyError::InvalidTopK => ApiError::unprocessable(e.to_string()),
        other => ApiError::internal(other.to_string()),
    })?;
    Ok(Json(PredictResponse { predictions }))
}

async fn classes(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "classes": state.models.labels().names() }))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let d = state.models.detector.as_ref().map(|d| d.network());
    let c = state.models.classifier.as_ref().map(|c| c.network());
    Json(json!({
        "status": "ok",
        "models_loaded": d.is_some() && c.is_some(),
        "detector_loaded": d.is_some(),
        "classifier_loaded": c.is_some(),
        "params": {
            "detector": d.map(|n| n.param_count()),
            "classifier": c.map(|n| n.param_count()),
        },
        "flops": {
            "detector": d.map(|n| n.flop_count()),
            "classifier": c.map(|n| n.flop_count()),
        },
        "sessions": state.session_count(),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes;
    let static_dir = state.config.static_dir.clone();
    let api = Router::new()
        .route("/api/images", post(upload))
        .route("/api/images/{id}/recognize", post(recognize))
        .route("/api/images/{id}/predict-crop", post(predict_crop))
        .route("/api/classes", get(classes))
        .route("/api/health", get(health))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until Ctrl-C, sweeping idle sessions in the background.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    let sweep_every = state.config.session_ttl.min(Duration::from_secs(60));
    let sweeper = {
        let state = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(sweep_every.max(Duration::from_secs(1)));
            loop {
                tick.tick().await;
                let n = state.expire_sessions();
                if n > 0 {
                    tracing::info!(expired = n, "dropped idle sessions");
                }
            }
        })
    };
    let result = axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    sweeper.abort();
    result
}
