//! HTTP API for the interactive steering loop: upload a volume once, then
//! re-fuse and re-render its cached feature set as weights, colors, gain,
//! rotation and view mode change.
//!
//! | Method | Path | Response |
//! |---|---|---|
//! | POST | `/api/v1/volumes` | `201 {"id"}` after filtering and feature extraction |
//! | GET | `/api/v1/volumes/{id}/meta` | dims, spacing, feature names, last-used params |
//! | POST | `/api/v1/volumes/{id}/render` | `image/png`, render time in `x-render-time-ms` |
//!
//! Upload bodies are either raw VVOL bytes or `multipart/form-data` with one
//! PNG frame per part, in slice order.

mod session;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;
use usvis_core::render::RenderOptions;
use usvis_core::volume::decode_vvol;
use usvis_core::{
    fuse, ingest_frames, normalize_weights, render_fused, Camera, Error, FeatureColor, FeatureKind,
    Frame, FrameStack, FusionParams, RenderMode, Spacing,
};

pub use session::{Processing, Session, SessionStore};

pub const DEFAULT_PORT: u16 = 8787;
pub const RENDER_TIME_HEADER: &str = "x-render-time-ms";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Upload size cap in bytes; larger bodies get 413.
    pub max_body_bytes: usize,
    pub session_capacity: usize,
    /// Defaults for filtering and features, overridable per upload.
    pub processing: Processing,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_body_bytes: 256 * 1024 * 1024,
            session_capacity: 4,
            processing: Processing::default(),
        }
    }
}

/// Shared state behind every handler.
#[derive(Clone)]
pub struct AppState {
    pub sessions: Arc<SessionStore>,
    pub config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            sessions: Arc::new(SessionStore::new(config.session_capacity)),
            config: Arc::new(config),
        }
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/api/v1/health", get(|| async { "ok" }))
        .route("/api/v1/volumes", post(upload))
        .route("/api/v1/volumes/{id}/meta", get(meta))
        .route("/api/v1/volumes/{id}/render", post(render))
        .layer(DefaultBodyLimit::max(limit))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(config)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<&'static str>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), field: None }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, message: message.into(), field: Some(field) }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id:?}"))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(field) = self.field {
            body["field"] = json!(field);
        }
        (self.status, Json(body)).into_response()
    }
}

/// Upload overrides, named after the CLI flags.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct UploadQuery {
    pub sigma_spatial: Option<f64>,
    pub sigma_range: Option<f64>,
    pub window_radius: Option<usize>,
    /// Comma-separated Frangi scales.
    pub scales: Option<String>,
    /// Comma-separated feature names.
    pub features: Option<String>,
    pub bright_vessels: Option<bool>,
    pub gvf_mu: Option<f64>,
    pub gvf_iterations: Option<usize>,
    pub gvf_dt: Option<f64>,
    /// `sx,sy,sz` for PNG frame uploads.
    pub spacing: Option<String>,
}

fn parse_list<T: std::str::FromStr>(text: &str, field: &'static str) -> Result<Vec<T>, ApiError> {
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| ApiError::invalid(field, format!("cannot parse {s:?}"))))
        .collect()
}

impl UploadQuery {
    pub fn apply(&self, base: &Processing) -> Result<Processing, ApiError> {
        let mut p = base.clone();
        if let Some(s) = self.sigma_spatial {
            p.bilateral.sigma_spatial = s;
            if self.window_radius.is_none() {
                p.bilateral.window_radius = ((2.0 * s).ceil() as usize).max(1);
            }
        }
        if let Some(s) = self.sigma_range {
            p.bilateral.sigma_range = s;
        }
        if let Some(r) = self.window_radius {
            p.bilateral.window_radius = r;
        }
        if let Some(scales) = &self.scales {
            p.features.frangi.scales = parse_list(scales, "scales")?;
        }
        if let Some(names) = &self.features {
            p.features.select = parse_list::<FeatureKind>(names, "features")?;
        }
        if let Some(b) = self.bright_vessels {
            p.features.frangi.bright_vessels = b;
        }
        if let Some(mu) = self.gvf_mu {
            p.features.gvf.mu = mu;
        }
        if let Some(n) = self.gvf_iterations {
            p.features.gvf.iterations = n;
        }
        if let Some(dt) = self.gvf_dt {
            p.features.gvf.dt = dt;
        }
        p.bilateral.validate().map_err(|e| ApiError::invalid("bilateral", e.to_string()))?;
        p.features.frangi.validate().map_err(|e| ApiError::invalid("scales", e.to_string()))?;
        p.features.gvf.validate().map_err(|e| ApiError::invalid("gvf", e.to_string()))?;
        if p.features.select.is_empty() {
            return Err(ApiError::invalid("features", "select at least one feature"));
        }
        Ok(p)
    }

    fn frame_spacing(&self) -> Result<Spacing, ApiError> {
        match &self.spacing {
            None => Ok(Spacing::ISOTROPIC),
            Some(text) => {
                let v: Vec<f32> = parse_list(text, "spacing")?;
                match v.as_slice() {
                    &[sx, sy, sz] if v.iter().all(|s| s.is_finite() && *s > 0.0) => Ok(Spacing::new(sx, sy, sz)),
                    _ => Err(ApiError::invalid("spacing", "expected three positive values sx,sy,sz")),
                }
            }
        }
    }
}

async fn read_volume(request: Request, query: &UploadQuery) -> Result<usvis_core::Volume, ApiError> {
    let is_multipart = request
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if is_multipart {
        let spacing = query.frame_spacing()?;
        let mut multipart = Multipart::from_request(request, &())
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        let mut frames = Vec::new();
        while let Some(field) = multipart
            .next_field()
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?
        {
            let name = field.file_name().or(field.name()).unwrap_or("").to_string();
            let bytes = field.bytes().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
            let frame = Frame::from_png_bytes(&bytes)
                .map_err(|e| ApiError::bad_request(format!("frame {name:?}: {e}")))?;
            frames.push(frame);
        }
        ingest_frames(&FrameStack::new(frames).with_spacing(spacing))
            .map_err(|e| ApiError::bad_request(e.to_string()))
    } else {
        let bytes = Bytes::from_request(request, &())
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        decode_vvol(&bytes).map_err(|e| ApiError::bad_request(e.to_string()))
    }
}

async fn upload(
    State(app): State<AppState>,
    query: Result<Query<UploadQuery>, QueryRejection>,
    request: Request,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let Query(query) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let processing = query.apply(&app.config.processing)?;
    let volume = read_volume(request, &query).await?;
    let dims = volume.dims();
    let started = Instant::now();
    let session = tokio::task::spawn_blocking(move || Session::prepare(volume, processing))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| match e {
            Error::VolumeTooSmall { .. } => ApiError::bad_request(e.to_string()),
            other => ApiError::invalid("params", other.to_string()),
        })?;
    let session = app.sessions.insert(session);
    log::info!(
        "session {} ready: {:?} in {:.1} ms",
        session.id,
        dims.to_array(),
        started.elapsed().as_secs_f64() * 1e3
    );
    Ok((StatusCode::CREATED, Json(json!({ "id": session.id }))))
}

async fn meta(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let s = app.sessions.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json(json!({
        "id": s.id,
        "dims": s.volume.dims(),
        "spacing": s.volume.spacing(),
        "features": s.features.names().collect::<Vec<_>>(),
        "params": s.params(),
        "processing": s.processing,
        "created_unix_ms": s.created_unix_ms,
    })))
}

/// Fusion overrides; omitted fields keep the session's last-used values.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ParamsPatch {
    weights: Option<BTreeMap<String, f64>>,
    colors: BTreeMap<String, FeatureColor>,
    gain: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SizeSpec {
    Pair([u32; 2]),
    Text(String),
}

impl SizeSpec {
    fn resolve(&self) -> Option<(u32, u32)> {
        let (w, h) = match self {
            SizeSpec::Pair([w, h]) => (*w, *h),
            SizeSpec::Text(t) => {
                let (w, h) = t.split_once(['x', 'X'])?;
                (w.trim().parse().ok()?, h.trim().parse().ok()?)
            }
        };
        ((1..=MAX_SIDE).contains(&w) && (1..=MAX_SIDE).contains(&h)).then_some((w, h))
    }
}

const MAX_SIDE: u32 = 4096;
const DEFAULT_SIDE: u32 = 256;

/// A validated render request.
#[derive(Debug)]
pub struct RenderRequest {
    pub params: FusionParams,
    pub camera: Camera,
    pub mode: RenderMode,
}

fn field<T: serde::de::DeserializeOwned>(body: &Value, name: &'static str) -> Result<Option<T>, ApiError> {
    match body.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| ApiError::invalid(name, format!("{name}: {e}"))),
    }
}

/// Validates a render body against the session's features and last params.
pub fn parse_render_request(body: &Value, session: &Session) -> Result<RenderRequest, ApiError> {
    if !body.is_object() {
        return Err(ApiError::bad_request("render body must be a JSON object"));
    }
    let last = session.params();
    let patch: ParamsPatch = field(body, "params")?.unwrap_or_default();

    let weights = match patch.weights {
        None => last.weights,
        Some(raw) => {
            if let Some(unknown) = raw.keys().find(|k| session.features.get(k).is_none()) {
                return Err(ApiError::invalid("weights", format!("unknown feature {unknown:?}")));
            }
            let values: Vec<f64> = raw.values().copied().collect();
            let normalized = normalize_weights(&values).map_err(|e| ApiError::invalid("weights", e.to_string()))?;
            raw.into_keys().zip(normalized).collect()
        }
    };
    let gain = patch.gain.unwrap_or(last.gain);
    if !(gain.is_finite() && gain >= 0.0) {
        return Err(ApiError::invalid("gain", format!("gain must be >= 0, got {gain}")));
    }
    let mut colors = last.colors;
    colors.extend(patch.colors);
    let params = FusionParams::new(weights, colors, gain).map_err(|e| ApiError::invalid("colors", e.to_string()))?;

    let rotation: [f64; 3] = field(body, "rotation")?.unwrap_or([0.0; 3]);
    if rotation.iter().any(|r| !r.is_finite()) {
        return Err(ApiError::invalid("rotation", "rotation angles must be finite"));
    }
    let mode = match field::<String>(body, "mode")? {
        None => RenderMode::MipColor,
        Some(m) => m.parse().map_err(|e: Error| ApiError::invalid("mode", e.to_string()))?,
    };
    let (width, height) = match field::<SizeSpec>(body, "size")? {
        None => (DEFAULT_SIDE, DEFAULT_SIDE),
        Some(s) => s
            .resolve()
            .ok_or_else(|| ApiError::invalid("size", format!("size must be WxH with sides in 1..={MAX_SIDE}")))?,
    };
    Ok(RenderRequest { params, camera: Camera::new(rotation, width, height), mode })
}

async fn render(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let session = app.sessions.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let body: Value = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("render body is not JSON: {e}")))?;
    let request = parse_render_request(&body, &session)?;

    let worker = Arc::clone(&session);
    let params = request.params.clone();
    let (png, elapsed_ms) = tokio::task::spawn_blocking(move || {
        let started = Instant::now();
        let fused = fuse(&worker.filtered, &worker.features, &params)?;
        let image = render_fused(&fused, &request.camera, request.mode, &RenderOptions::default())?;
        let png = image.encode_png()?;
        Ok::<_, Error>((png, started.elapsed().as_secs_f64() * 1e3))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| ApiError::invalid("params", e.to_string()))?;
    session.set_params(request.params);

    let mut response = (StatusCode::OK, [(header::CONTENT_TYPE, "image/png")], png).into_response();
    response.headers_mut().insert(
        RENDER_TIME_HEADER,
        HeaderValue::from_str(&format!("{elapsed_ms:.3}")).expect("ascii header"),
    );
    Ok(response)
}
