//! HTTP/JSON service over one loaded checkpoint: model metadata, source
//! uploads, renders under arbitrary conditioning and cached grid sweeps.
//! Optionally serves a static UI bundle at `/`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nafx_core::audio::{decode_wav, to_mono, AudioBuffer};
use nafx_core::eval::{grid_sweep, EvalError, GridSweep, Metric};
use nafx_core::model::{ModelError, TcnModel};
use nafx_core::render::{render_wav, RenderError};
use nafx_core::sources::{is_builtin, load_source, BuiltinSource};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::services::ServeDir;

/// Longest audio a single request may render or sweep over, in seconds.
pub const DEFAULT_MAX_RENDER_SECS: f64 = 30.0;
/// Total bytes of uploaded audio kept in memory.
pub const DEFAULT_UPLOAD_QUOTA: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub max_render_secs: f64,
    /// Stored samples are counted at four bytes each.
    pub upload_quota_bytes: usize,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            max_render_secs: DEFAULT_MAX_RENDER_SECS,
            upload_quota_bytes: DEFAULT_UPLOAD_QUOTA,
            static_dir: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown source {0:?}")]
    UnknownSource(String),
    #[error("{0}")]
    UnsupportedMedia(String),
    #[error("upload quota exceeded: {needed} bytes needed, {available} available")]
    QuotaExceeded { needed: usize, available: usize },
    #[error("source sample rate {found} Hz does not match model rate {expected} Hz")]
    SampleRate { expected: u32, found: u32 },
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::UnknownSource(_) => StatusCode::NOT_FOUND,
            Self::UnsupportedMedia(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            Self::QuotaExceeded { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            Self::SampleRate { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if matches!(self, Self::Internal(_)) {
            log::error!("{self}");
        }
        (self.status(), Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

impl From<RenderError> for ApiError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::Model(
                e @ (ModelError::ConditioningDim { .. }
                | ModelError::NonFiniteConditioning
                | ModelError::SampleRateMismatch { .. }
                | ModelError::NotMono(_)),
            ) => Self::BadRequest(e.to_string()),
            other => Self::Internal(other.to_string()),
        }
    }
}

/// Model description returned by `GET /api/model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub layers: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub dilation_growth: usize,
    pub cond_dim: usize,
    pub sample_rate: u32,
    pub receptive_field_samples: usize,
    pub receptive_field_ms: f64,
    pub param_count: usize,
}

impl ModelInfo {
    pub fn of(model: &TcnModel<f32>) -> Self {
        let c = &model.config;
        let rf = model.receptive_field();
        Self {
            layers: c.layers,
            channels: c.channels,
            kernel_size: c.kernel_size,
            dilation_growth: c.dilation_growth,
            cond_dim: c.cond_dim,
            sample_rate: c.sample_rate,
            receptive_field_samples: rf.samples,
            receptive_field_ms: rf.ms,
            param_count: model.param_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub id: String,
    pub frames: usize,
    pub duration_secs: f64,
}

/// Body of `POST /api/render`. `source` is an uploaded id or a built-in
/// spec such as `noise:2s`.
#[derive(Debug, Clone, Deserialize)]
pub struct RenderRequest {
    pub conditioning: Vec<f32>,
    pub source: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SweepQuery {
    pub source: String,
    #[serde(default = "default_metric")]
    pub metric: String,
    #[serde(default = "default_min")]
    pub min: f64,
    #[serde(default = "default_max")]
    pub max: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_metric() -> String {
    Metric::Lufs.name().to_string()
}
fn default_min() -> f64 {
    -5.0
}
fn default_max() -> f64 {
    5.0
}
fn default_steps() -> usize {
    11
}

/// Exact request parameters; floats are keyed by their bit patterns.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct SweepKey {
    source: String,
    metric: Metric,
    min: u64,
    max: u64,
    steps: usize,
}

#[derive(Default)]
struct Uploads {
    sources: HashMap<String, Arc<AudioBuffer>>,
    bytes: usize,
}

/// Shared per-process state. The model is never mutated after load.
pub struct AppState {
    model: Arc<TcnModel<f32>>,
    config: ServerConfig,
    uploads: RwLock<Uploads>,
    next_id: AtomicU64,
    sweeps: Mutex<HashMap<SweepKey, Arc<GridSweep>>>,
}

impl AppState {
    pub fn new(model: TcnModel<f32>, config: ServerConfig) -> Self {
        Self {
            model: Arc::new(model),
            config,
            uploads: RwLock::new(Uploads::default()),
            next_id: AtomicU64::new(1),
            sweeps: Mutex::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &TcnModel<f32> {
        &self.model
    }

    /// Store a decoded buffer (collapsed to mono) under a fresh id.
    pub fn add_source(&self, buffer: AudioBuffer, name: Option<&str>) -> Result<SourceInfo, ApiError> {
        let expected = self.model.config.sample_rate;
        if buffer.sample_rate() != expected {
            return Err(ApiError::SampleRate {
                expected,
                found: buffer.sample_rate(),
            });
        }
        let buffer = to_mono(&buffer);
        let needed = buffer.len() * std::mem::size_of::<f32>();
        let mut uploads = self.uploads.write().expect("upload lock poisoned");
        let available = self.config.upload_quota_bytes.saturating_sub(uploads.bytes);
        if needed > available {
            return Err(ApiError::QuotaExceeded { needed, available });
        }
        let id = match name {
            Some(n) if !uploads.sources.contains_key(n) && !is_builtin(n) => n.to_string(),
            _ => format!("src-{}", self.next_id.fetch_add(1, Ordering::Relaxed)),
        };
        let info = SourceInfo {
            id: id.clone(),
            frames: buffer.len(),
            duration_secs: buffer.duration_secs(),
        };
        uploads.bytes += needed;
        uploads.sources.insert(id, Arc::new(buffer));
        Ok(info)
    }

    /// Preload every `.wav` file in `dir`, keyed by file stem. Files at the
    /// wrong sample rate are skipped with a warning.
    pub fn preload_dir(&self, dir: &Path) -> std::io::Result<Vec<SourceInfo>> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        let mut loaded = Vec::new();
        for path in paths {
            let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned);
            let result = load_source(&path.to_string_lossy(), self.model.config.sample_rate)
                .map_err(|e| e.to_string())
                .and_then(|b| self.add_source(b, stem.as_deref()).map_err(|e| e.to_string()));
            match result {
                Ok(info) => loaded.push(info),
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        Ok(loaded)
    }

    /// Look up an uploaded id or generate a built-in source, enforcing the
    /// duration cap.
    pub fn resolve_source(&self, source: &str) -> Result<Arc<AudioBuffer>, ApiError> {
        let buffer = if is_builtin(source) {
            let spec: BuiltinSource = source.parse().map_err(|e: nafx_core::sources::SourceError| {
                ApiError::BadRequest(e.to_string())
            })?;
            if spec.duration_secs() > self.config.max_render_secs {
                return Err(self.too_long(spec.duration_secs()));
            }
            Arc::new(
                spec.generate(self.model.config.sample_rate)
                    .map_err(|e| ApiError::BadRequest(e.to_string()))?,
            )
        } else {
            let uploads = self.uploads.read().expect("upload lock poisoned");
            uploads
                .sources
                .get(source)
                .cloned()
                .ok_or_else(|| ApiError::UnknownSource(source.to_string()))?
        };
        if buffer.duration_secs() > self.config.max_render_secs {
            return Err(self.too_long(buffer.duration_secs()));
        }
        Ok(buffer)
    }

    fn too_long(&self, secs: f64) -> ApiError {
        ApiError::BadRequest(format!(
            "source is {secs:.2} s long; requests are capped at {} s (use the command line for longer renders)",
            self.config.max_render_secs
        ))
    }

    fn list_sources(&self) -> Vec<SourceInfo> {
        let uploads = self.uploads.read().expect("upload lock poisoned");
        let mut list: Vec<SourceInfo> = uploads
            .sources
            .iter()
            .map(|(id, b)| SourceInfo {
                id: id.clone(),
                frames: b.len(),
                duration_secs: b.duration_secs(),
            })
            .collect();
        list.sort_by(|a, b| a.id.cmp(&b.id));
        list
    }
}

async fn get_model(State(state): State<Arc<AppState>>) -> Json<ModelInfo> {
    Json(ModelInfo::of(&state.model))
}

async fn list_sources(State(state): State<Arc<AppState>>) -> Json<Vec<SourceInfo>> {
    Json(state.list_sources())
}

async fn post_source(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SourceInfo>, ApiError> {
    let buffer = decode_wav(&body).map_err(|e| ApiError::UnsupportedMedia(e.to_string()))?;
    Ok(Json(state.add_source(buffer, None)?))
}

async fn post_render(
    State(state): State<Arc<AppState>>,
    Json(req): Json<RenderRequest>,
) -> Result<Response, ApiError> {
    let expected = state.model.config.cond_dim;
    if req.conditioning.len() != expected {
        return Err(ApiError::BadRequest(format!(
            "conditioning has {} values, model expects {expected}",
            req.conditioning.len()
        )));
    }
    let input = state.resolve_source(&req.source)?;
    let model = Arc::clone(&state.model);
    let bytes = tokio::task::spawn_blocking(move || render_wav(&model, &input, &req.conditioning))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response())
}

async fn get_sweep(
    State(state): State<Arc<AppState>>,
    Query(q): Query<SweepQuery>,
) -> Result<Json<GridSweep>, ApiError> {
    let metric: Metric = q.metric.parse().map_err(|e: EvalError| ApiError::BadRequest(e.to_string()))?;
    let key = SweepKey {
        source: q.source.clone(),
        metric,
        min: q.min.to_bits(),
        max: q.max.to_bits(),
        steps: q.steps,
    };
    if let Some(hit) = state.sweeps.lock().expect("sweep cache poisoned").get(&key) {
        return Ok(Json(GridSweep::clone(hit)));
    }
    let input = state.resolve_source(&q.source)?;
    let model = Arc::clone(&state.model);
    let grid = tokio::task::spawn_blocking(move || {
        grid_sweep(&model, &input, (q.min, q.max), (q.min, q.max), q.steps, metric)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map_err(|e| match e {
        EvalError::Model(m) => ApiError::BadRequest(m.to_string()),
        EvalError::TooFewSteps(_) | EvalError::BadRange { .. } | EvalError::ConditioningTooSmall(_) => {
            ApiError::BadRequest(e.to_string())
        }
        other => ApiError::Internal(other.to_string()),
    })?;
    let grid = Arc::new(grid);
    // a concurrent identical request may have finished first; keep its entry
    let cached = Arc::clone(
        state
            .sweeps
            .lock()
            .expect("sweep cache poisoned")
            .entry(key)
            .or_insert(grid),
    );
    Ok(Json(GridSweep::clone(&cached)))
}

/// All routes. Uploads are limited to the quota plus WAV header slack.
pub fn router(state: Arc<AppState>) -> Router {
    let body_limit = state.config.upload_quota_bytes.saturating_add(1 << 16);
    let api = Router::new()
        .route("/api/model", get(get_model))
        .route("/api/sources", get(list_sources).post(post_source))
        .route("/api/render", post(post_render))
        .route("/api/sweep", get(get_sweep))
        .layer(DefaultBodyLimit::max(body_limit));
    let app = match &state.config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { StatusCode::NOT_FOUND }),
    };
    app.with_state(state)
}

/// Serve on an already-bound listener until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
