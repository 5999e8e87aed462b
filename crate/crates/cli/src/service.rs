//! Session-based matting over HTTP.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/sessions` | PNG image | `201 {"id", "width", "height", "mode"}` |
//! | POST | `/sessions/{id}/clicks` | `{"x", "y", "positive"}` | 8-bit grey PNG matte |
//! | DELETE | `/sessions/{id}/clicks/last` | | PNG matte, or 204 when no clicks remain |
//! | PUT | `/sessions/{id}/trimap` | PNG trimap | PNG matte |
//! | GET | `/sessions/{id}/matte` | | PNG matte |
//! | DELETE | `/sessions/{id}` | | 204 |
//! | GET | `/healthz` | | `{"status", "version", "mode"}` |
//!
//! Matte replies carry the inference time in `x-latency-ms` and the number
//! of clicks behind them in `x-click-count`. Errors are JSON objects with an
//! `error` message and, for malformed input, the offending `field`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post, put};
use axum::{Json, Router};
use dcam_core::config::GuidanceMode;
use dcam_core::dataio::{decode_image, encode_alpha8, AlphaMatte, Image};
use dcam_core::guidance::{ClickSet, Payload, Trimap};
use dcam_core::infer::{InferOptions, Matter};
use serde_json::{json, Value};
use tokio::sync::Mutex as AsyncMutex;

pub const DEFAULT_MAX_SIDE: usize = 2048;
/// Upload size limit; a 2048 x 2048 RGB PNG stays well below it.
const MAX_BODY_BYTES: usize = 64 << 20;
pub const LATENCY_HEADER: &str = "x-latency-ms";
pub const CLICK_COUNT_HEADER: &str = "x-click-count";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Click {
    pub x: usize,
    pub y: usize,
    pub positive: bool,
}

/// Per-session state: the image, its guidance and the latest matte.
#[derive(Debug)]
pub struct Session {
    pub image: Image,
    pub clicks: Vec<Click>,
    pub trimap: Option<Trimap>,
    pub matte: Option<AlphaMatte>,
    pub created_at: SystemTime,
}

impl Session {
    pub fn click_set(&self) -> ClickSet {
        let pick = |positive: bool| self.clicks.iter().filter(|c| c.positive == positive).map(|c| (c.x, c.y)).collect();
        ClickSet {
            positives: pick(true),
            negatives: pick(false),
        }
    }
}

type SessionRef = Arc<AsyncMutex<Session>>;

struct Inner {
    matter: Matter,
    max_side: usize,
    sessions: Mutex<HashMap<String, SessionRef>>,
}

/// Shared service state. Parameters are read-only; each session has its own lock.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(matter: Matter, max_side: usize) -> Self {
        Self {
            inner: Arc::new(Inner {
                matter,
                max_side,
                sessions: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn mode(&self) -> GuidanceMode {
        self.inner.matter.mode()
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().expect("session map lock").len()
    }

    fn session(&self, id: &str) -> Result<SessionRef, ApiError> {
        self.inner
            .sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<&'static str>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn field(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            field: Some(field),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = match self.field {
            Some(f) => json!({"error": self.message, "field": f}),
            None => json!({"error": self.message}),
        };
        (self.status, Json(body)).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", delete(delete_session))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/clicks/last", delete(undo_click))
        .route("/sessions/{id}/trimap", put(set_trimap))
        .route("/sessions/{id}/matte", get(get_matte))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    Json(json!({"status": "ok", "version": env!("CARGO_PKG_VERSION"), "mode": state.mode().as_str()}))
}

fn matte_response(matte: &AlphaMatte, clicks: usize, latency_ms: Option<f64>) -> Result<Response, ApiError> {
    let png = encode_alpha8(matte).map_err(ApiError::internal)?;
    let mut resp = (StatusCode::OK, [(header::CONTENT_TYPE, "image/png")], png).into_response();
    let headers = resp.headers_mut();
    headers.insert(CLICK_COUNT_HEADER, HeaderValue::from(clicks));
    if let Some(ms) = latency_ms {
        headers.insert(LATENCY_HEADER, HeaderValue::from_str(&format!("{ms:.3}")).map_err(ApiError::internal)?);
    }
    Ok(resp)
}

/// Recomputes the session's matte from its guidance on a blocking thread.
async fn recompute(state: &AppState, session: SessionRef) -> Result<Response, ApiError> {
    let inner = state.inner.clone();
    let mut guard = session.lock_owned().await;
    tokio::task::spawn_blocking(move || {
        let s = &mut *guard;
        let clicks = s.click_set();
        let payload = match inner.matter.mode() {
            GuidanceMode::None => Payload::None,
            GuidanceMode::Click => Payload::Clicks(&clicks),
            GuidanceMode::Trimap => Payload::Trimap(s.trimap.as_ref().ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no trimap uploaded"))?),
        };
        let start = Instant::now();
        let matte = inner.matter.predict(&s.image, payload, &InferOptions::default()).map_err(ApiError::internal)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let resp = matte_response(&matte, s.clicks.len(), Some(ms));
        s.matte = Some(matte);
        resp
    })
    .await
    .map_err(ApiError::internal)?
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    if body.is_empty() {
        return Err(ApiError::field("image", "request body must be a PNG image"));
    }
    let image = decode_image(&body).map_err(|e| ApiError::field("image", format!("cannot decode image: {e}")))?;
    let (_, h, w) = image.dim();
    let max = state.inner.max_side;
    if h > max || w > max {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, format!("image is {w}x{h}; the largest accepted side is {max}")));
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Arc::new(AsyncMutex::new(Session {
        image,
        clicks: Vec::new(),
        trimap: None,
        matte: None,
        created_at: SystemTime::now(),
    }));
    state.inner.sessions.lock().expect("session map lock").insert(id.clone(), session.clone());
    if state.mode() == GuidanceMode::None {
        recompute(&state, session).await?;
    }
    let body = json!({"id": id, "width": w, "height": h, "mode": state.mode().as_str()});
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match state.inner.sessions.lock().expect("session map lock").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))),
    }
}

fn coordinate(obj: &serde_json::Map<String, Value>, field: &'static str, limit: usize) -> Result<usize, ApiError> {
    let v = obj.get(field).ok_or_else(|| ApiError::field(field, format!("missing field {field:?}")))?;
    let n = v
        .as_u64()
        .ok_or_else(|| ApiError::field(field, format!("{field:?} must be a non-negative integer")))? as usize;
    if n >= limit {
        return Err(ApiError::field(field, format!("{field:?} = {n} lies outside the image (limit {limit})")));
    }
    Ok(n)
}

/// Validates `{"x": int, "y": int, "positive": bool}` against the image size.
pub fn parse_click(body: &[u8], width: usize, height: usize) -> Result<Click, ApiError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ApiError::field("body", format!("invalid JSON: {e}")))?;
    let obj = value.as_object().ok_or_else(|| ApiError::field("body", "click must be a JSON object"))?;
    if let Some(k) = obj.keys().find(|k| !matches!(k.as_str(), "x" | "y" | "positive")) {
        return Err(ApiError::field("body", format!("unknown field {k:?}")));
    }
    let x = coordinate(obj, "x", width)?;
    let y = coordinate(obj, "y", height)?;
    let positive = obj
        .get("positive")
        .ok_or_else(|| ApiError::field("positive", "missing field \"positive\""))?
        .as_bool()
        .ok_or_else(|| ApiError::field("positive", "\"positive\" must be a boolean"))?;
    Ok(Click { x, y, positive })
}

async fn add_click(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    if state.mode() != GuidanceMode::Click {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("the service runs a {} model; clicks are not used", state.mode().as_str())));
    }
    {
        let mut s = session.lock().await;
        let (_, h, w) = s.image.dim();
        let click = parse_click(&body, w, h)?;
        s.clicks.push(click);
    }
    recompute(&state, session).await
}

async fn undo_click(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    {
        let mut s = session.lock().await;
        if s.clicks.pop().is_none() {
            return Err(ApiError::new(StatusCode::CONFLICT, "no click to undo"));
        }
        if s.clicks.is_empty() {
            s.matte = None;
            return Ok(StatusCode::NO_CONTENT.into_response());
        }
    }
    recompute(&state, session).await
}

async fn set_trimap(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    if state.mode() != GuidanceMode::Trimap {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("the service runs a {} model; trimaps are not used", state.mode().as_str())));
    }
    let grey = dcam_core::dataio::decode_alpha(&body).map_err(|e| ApiError::field("trimap", format!("cannot decode trimap: {e}")))?;
    let trimap = grey.mapv(|v| dcam_core::guidance::grey_to_label((v * 255.0).round() as u8));
    {
        let mut s = session.lock().await;
        let (_, h, w) = s.image.dim();
        if trimap.dim() != (h, w) {
            return Err(ApiError::field("trimap", format!("trimap is {:?}, image is {h}x{w}", trimap.dim())));
        }
        s.trimap = Some(trimap);
    }
    recompute(&state, session).await
}

async fn get_matte(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let s = session.lock().await;
    match &s.matte {
        Some(m) => matte_response(m, s.clicks.len(), None),
        None => Err(ApiError::new(StatusCode::CONFLICT, "no matte yet")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(e: ApiError) -> Option<&'static str> {
        assert_eq!(e.status, StatusCode::BAD_REQUEST);
        e.field
    }

    #[test]
    fn click_parsing_names_the_bad_field() {
        assert_eq!(parse_click(br#"{"x": 3, "y": 4, "positive": false}"#, 10, 10).unwrap(), Click { x: 3, y: 4, positive: false });
        let cases: [(&[u8], &str); 8] = [
            (b"{", "body"),
            (b"[1, 2]", "body"),
            (br#"{"y": 1, "positive": true}"#, "x"),
            (br#"{"x": -1, "y": 1, "positive": true}"#, "x"),
            (br#"{"x": 1, "y": 10, "positive": true}"#, "y"),
            (br#"{"x": 1, "y": "2", "positive": true}"#, "y"),
            (br#"{"x": 1, "y": 2, "positive": 1}"#, "positive"),
            (br#"{"x": 1, "y": 2, "positive": true, "z": 0}"#, "body"),
        ];
        for (body, field) in cases {
            assert_eq!(field_of(parse_click(body, 10, 10).unwrap_err()), Some(field), "{}", String::from_utf8_lossy(body));
        }
    }
}
