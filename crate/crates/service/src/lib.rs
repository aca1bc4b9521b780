//! HTTP front end: cache a source image once, then run edit-only requests against it.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/v1/cache` | multipart `image`, `source_prompt`, `keep_attention` | `{cache_id, scales, timing_ms}` |
//! | POST | `/v1/edit` | JSON [`EditRequest`] | [`EditResponse`] |
//! | GET | `/v1/cache/{id}` | | [`CacheMeta`] |
//! | GET | `/v1/cache/{id}/decode?upto=k` | | PNG |
//! | DELETE | `/v1/cache/{id}` | | 204 |
//! | GET | `/healthz` | | `{status, backend, fingerprint}` |
//!
//! Errors are `{code, message}` with a matching status.

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use aredit_core::cache::{build_cache, EditCache};
use aredit_core::codec::CodecParams;
use aredit_core::editor::{edit, EditConfig, MaskMode, ATTENTION_GAMMA, ATTENTION_TAU, DEFAULT_GAMMA, DEFAULT_TAU};
use aredit_core::numerics::Image;
use aredit_core::predictor::{PredictorModel, SyntheticConfig};
use aredit_core::pyramid::{accumulate, ScaleSchedule};
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::services::ServeDir;

pub const DEFAULT_PORT: u16 = 8080;

/// `"synthetic"` selects the analytic backend; anything else is an ARPM path.
pub fn load_model(spec: &str) -> aredit_core::Result<PredictorModel> {
    if spec == "synthetic" {
        Ok(PredictorModel::synthetic(SyntheticConfig::default()))
    } else {
        PredictorModel::load(spec)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("AREDIT_PORT={0:?} is not a port number")]
    Port(String),
    #[error("loading model {path:?}: {source}")]
    Model {
        path: String,
        #[source]
        source: aredit_core::Error,
    },
}

/// Everything the router needs up front.
pub struct ServiceConfig {
    pub model: PredictorModel,
    pub codec: CodecParams,
    pub schedule: ScaleSchedule,
    /// Spill directory for AREC files; memory only when absent.
    pub store_dir: Option<PathBuf>,
    /// Console bundle served at `/` when present.
    pub static_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(model: PredictorModel) -> Self {
        ServiceConfig {
            model,
            codec: CodecParams::default(),
            schedule: ScaleSchedule::reference(),
            store_dir: None,
            static_dir: None,
        }
    }

    /// Reads `AREDIT_MODEL` (default `synthetic`), `AREDIT_STORE` and `AREDIT_STATIC`,
    /// and returns the port from `AREDIT_PORT`.
    pub fn from_env() -> Result<(Self, u16), ConfigError> {
        let spec = std::env::var("AREDIT_MODEL").unwrap_or_else(|_| "synthetic".into());
        let model = load_model(&spec).map_err(|source| ConfigError::Model { path: spec, source })?;
        let port = match std::env::var("AREDIT_PORT") {
            Ok(p) => p.parse().map_err(|_| ConfigError::Port(p))?,
            Err(_) => DEFAULT_PORT,
        };
        let mut cfg = ServiceConfig::new(model);
        cfg.store_dir = std::env::var_os("AREDIT_STORE").map(PathBuf::from);
        cfg.static_dir = std::env::var_os("AREDIT_STATIC").map(PathBuf::from);
        Ok((cfg, port))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CacheMeta {
    pub cache_id: String,
    pub created_at: String,
    pub source_prompt: String,
    pub width: usize,
    pub height: usize,
    pub scales: Vec<(usize, usize)>,
    pub has_attention: bool,
    pub model_fingerprint: String,
    pub thumbnail_png_base64: String,
    pub content_sha256: String,
}

struct Entry {
    cache: Arc<EditCache>,
    meta: CacheMeta,
}

/// Content-addressed map of immutable caches with an optional disk spill.
pub struct CacheStore {
    entries: RwLock<HashMap<String, Arc<Entry>>>,
    dir: Option<PathBuf>,
}

fn valid_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| b.is_ascii_hexdigit())
}

impl CacheStore {
    pub fn new(dir: Option<PathBuf>) -> std::io::Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        Ok(CacheStore {
            entries: RwLock::new(HashMap::new()),
            dir,
        })
    }

    fn paths(&self, id: &str) -> Option<(PathBuf, PathBuf)> {
        self.dir.as_ref().map(|d| (d.join(format!("{id}.arec")), d.join(format!("{id}.json"))))
    }

    fn get(&self, id: &str) -> Option<Arc<Entry>> {
        if !valid_id(id) {
            return None;
        }
        if let Some(e) = self.entries.read().expect("store lock").get(id) {
            return Some(e.clone());
        }
        let (arec, json) = self.paths(id)?;
        let cache = aredit_core::cache::load_cache(&arec).ok()?;
        let meta: CacheMeta = serde_json::from_slice(&std::fs::read(json).ok()?).ok()?;
        let entry = Arc::new(Entry {
            cache: Arc::new(cache),
            meta,
        });
        self.entries.write().expect("store lock").insert(id.to_string(), entry.clone());
        Some(entry)
    }

    fn insert(&self, cache: EditCache, meta: CacheMeta) -> std::io::Result<Arc<Entry>> {
        if let Some((arec, json)) = self.paths(&meta.cache_id) {
            std::fs::write(arec, cache.to_bytes())?;
            std::fs::write(json, serde_json::to_vec_pretty(&meta).expect("meta serializes"))?;
        }
        let id = meta.cache_id.clone();
        let entry = Arc::new(Entry {
            cache: Arc::new(cache),
            meta,
        });
        self.entries.write().expect("store lock").insert(id, entry.clone());
        Ok(entry)
    }

    fn remove(&self, id: &str) -> bool {
        let in_memory = self.entries.write().expect("store lock").remove(id).is_some();
        let mut on_disk = false;
        if let Some((arec, json)) = self.paths(id).filter(|_| valid_id(id)) {
            on_disk = std::fs::remove_file(arec).is_ok();
            let _ = std::fs::remove_file(json);
        }
        in_memory || on_disk
    }
}

pub struct AppState {
    pub model: PredictorModel,
    pub codec: CodecParams,
    pub schedule: ScaleSchedule,
    pub store: CacheStore,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown cache {id:?}"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl From<aredit_core::Error> for ApiError {
    fn from(e: aredit_core::Error) -> Self {
        use aredit_core::Error as E;
        match &e {
            E::MissingAttention => ApiError::new(StatusCode::CONFLICT, "attention_not_cached", e.to_string()),
            E::InvalidConfig(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.to_string()),
            E::FingerprintMismatch { .. } | E::CodecMismatch { .. } => {
                ApiError::new(StatusCode::CONFLICT, "model_mismatch", e.to_string())
            }
            E::InvalidArgument(_) | E::ShapeMismatch { .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_argument", e.to_string())
            }
            _ => ApiError::internal(e),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "code": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn cache_id(png: &[u8], prompt: &str, fingerprint: &[u8; 32], keep_attention: bool) -> String {
    let mut h = Sha256::new();
    h.update((png.len() as u64).to_le_bytes());
    h.update(png);
    h.update((prompt.len() as u64).to_le_bytes());
    h.update(prompt.as_bytes());
    h.update(fingerprint);
    h.update([keep_attention as u8]);
    hex::encode(h.finalize())
}

/// Nearest-neighbour thumbnail no larger than 64 px on a side.
fn thumbnail(img: &Image) -> aredit_core::Result<Vec<u8>> {
    let step = img.width().max(img.height()).div_ceil(64).max(1);
    let (w, h) = (img.width().div_ceil(step), img.height().div_ceil(step));
    let mut pixels = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            pixels.extend(img.pixel(x * step, y * step));
        }
    }
    Image::new(w, h, pixels)?.to_png_bytes()
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct CacheResponse {
    pub cache_id: String,
    pub scales: Vec<(usize, usize)>,
    pub timing_ms: CacheTiming,
}

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq)]
pub struct CacheTiming {
    pub build: f64,
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Some(true),
        "0" | "false" | "no" | "off" => Some(false),
        _ => None,
    }
}

async fn create_cache(State(app): State<Arc<AppState>>, mut form: Multipart) -> ApiResult<Json<CacheResponse>> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", m);
    let (mut png, mut prompt, mut keep_attention) = (None, None, true);
    while let Some(field) = form.next_field().await.map_err(|e| bad(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| bad(e.to_string()))?;
        match name.as_str() {
            "image" => png = Some(data.to_vec()),
            "source_prompt" => prompt = Some(String::from_utf8(data.to_vec()).map_err(|e| bad(e.to_string()))?),
            "keep_attention" => {
                let s = String::from_utf8_lossy(&data);
                keep_attention = parse_flag(&s).ok_or_else(|| bad(format!("keep_attention = {s:?}")))?;
            }
            _ => {}
        }
    }
    let png = png.ok_or_else(|| bad("missing image field".into()))?;
    let prompt = prompt.ok_or_else(|| bad("missing source_prompt field".into()))?;
    let img = Image::from_png_bytes(&png).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_image", e.to_string()))?;
    let latent = app.codec.latent_shape(img.width(), img.height());
    if latent.ok() != Some(app.schedule.full_shape()) {
        let (h, w) = app.schedule.full_shape();
        let p = app.codec.patch_size();
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "incompatible_dimensions",
            format!("image is {}x{}, expected {}x{}", img.width(), img.height(), w * p, h * p),
        ));
    }
    let fingerprint = aredit_core::predictor::Predictor::fingerprint(&app.model);
    let id = cache_id(&png, &prompt, &fingerprint, keep_attention);
    let scales = app.schedule.levels().to_vec();
    if app.store.get(&id).is_some() {
        return Ok(Json(CacheResponse {
            cache_id: id,
            scales,
            timing_ms: CacheTiming { build: 0.0 },
        }));
    }
    let worker = app.clone();
    let (entry, ms) = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        let t = Instant::now();
        let cache = build_cache(&img, &prompt, &worker.model, &worker.codec, &worker.schedule, keep_attention)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        let meta = CacheMeta {
            cache_id: id.clone(),
            created_at: chrono::Utc::now().to_rfc3339(),
            source_prompt: prompt,
            width: img.width(),
            height: img.height(),
            scales: worker.schedule.levels().to_vec(),
            has_attention: keep_attention,
            model_fingerprint: hex::encode(fingerprint),
            thumbnail_png_base64: B64.encode(thumbnail(&img)?),
            content_sha256: hex::encode(Sha256::digest(cache.to_bytes())),
        };
        Ok((worker.store.insert(cache, meta).map_err(ApiError::internal)?, ms))
    })
    .await
    .map_err(ApiError::internal)??;
    tracing::info!(cache_id = %entry.meta.cache_id, ms, "cache built");
    Ok(Json(CacheResponse {
        cache_id: entry.meta.cache_id.clone(),
        scales,
        timing_ms: CacheTiming { build: ms },
    }))
}

#[derive(Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub cache_id: String,
    pub target_prompt: String,
    pub gamma: Option<usize>,
    pub tau: Option<f64>,
    #[serde(default)]
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub attention_control: bool,
    pub attention_max_res: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub temperature: Option<f32>,
    #[serde(default)]
    pub emit_intermediate: bool,
    #[serde(default)]
    pub emit_masks: bool,
}

impl EditRequest {
    pub fn config(&self) -> EditConfig {
        let (g, t) = if self.attention_control {
            (ATTENTION_GAMMA, ATTENTION_TAU)
        } else {
            (DEFAULT_GAMMA, DEFAULT_TAU)
        };
        let base = EditConfig::default();
        EditConfig {
            gamma: self.gamma.unwrap_or(g),
            tau: self.tau.unwrap_or(t),
            mask_mode: self.mask_mode,
            attention_control: self.attention_control,
            attention_max_res: self.attention_max_res.unwrap_or(base.attention_max_res),
            seed: self.seed,
            temperature: self.temperature.unwrap_or(base.temperature),
            emit_intermediate: self.emit_intermediate,
            user_mask: None,
        }
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct MaskView {
    /// 1-based scale index.
    pub scale: usize,
    pub shape: (usize, usize, usize),
    pub flagged: usize,
    pub heatmap_png_base64: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq)]
pub struct EditTimingMs {
    pub predict: f64,
    pub decode: f64,
    pub total: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct EditResponse {
    pub image_png_base64: String,
    pub flagged_bits: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<MaskView>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intermediate: Option<Vec<String>>,
    pub timing_ms: EditTimingMs,
}

async fn run_edit(State(app): State<Arc<AppState>>, body: Result<Json<EditRequest>, JsonRejection>) -> ApiResult<Json<EditResponse>> {
    let Json(req) = body.map_err(|e| {
        let status = if e.status() == StatusCode::UNPROCESSABLE_ENTITY { e.status() } else { StatusCode::BAD_REQUEST };
        ApiError::new(status, "bad_request", e.body_text())
    })?;
    let entry = app.store.get(&req.cache_id).ok_or_else(|| ApiError::not_found(&req.cache_id))?;
    let worker = app.clone();
    let response = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        let cfg = req.config();
        let out = edit(&entry.cache, &req.target_prompt, &worker.model, &worker.codec, &cfg)?;
        let masks = req
            .emit_masks
            .then(|| {
                out.masks
                    .iter()
                    .enumerate()
                    .map(|(i, m)| {
                        Ok(MaskView {
                            scale: cfg.gamma + i + 1,
                            shape: m.shape(),
                            flagged: m.count(),
                            heatmap_png_base64: B64.encode(m.heatmap_png()?),
                        })
                    })
                    .collect::<aredit_core::Result<Vec<_>>>()
            })
            .transpose()?;
        let intermediate = out
            .intermediate_decodes
            .as_ref()
            .map(|imgs| imgs.iter().map(|i| Ok(B64.encode(i.to_png_bytes()?))).collect::<aredit_core::Result<Vec<_>>>())
            .transpose()?;
        let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
        Ok(EditResponse {
            image_png_base64: B64.encode(out.image.to_png_bytes()?),
            flagged_bits: out.flagged_bits(),
            masks,
            intermediate,
            timing_ms: EditTimingMs {
                predict: ms(out.timing.predict),
                decode: ms(out.timing.decode),
                total: ms(out.timing.total),
            },
        })
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(Json(response))
}

async fn cache_meta(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<CacheMeta>> {
    let entry = app.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json(entry.meta.clone()))
}

#[derive(Deserialize)]
struct DecodeQuery {
    upto: Option<usize>,
}

async fn decode(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<DecodeQuery>,
) -> ApiResult<Response> {
    let entry = app.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let k = entry.cache.len();
    let upto = q.upto.unwrap_or(k);
    if upto > k {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_argument",
            format!("upto = {upto} exceeds {k} scales"),
        ));
    }
    let f = accumulate(&entry.cache.r_queue, &entry.cache.schedule, upto)?;
    let png = app.codec.decode_feature(&f)?.to_png_bytes()?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn delete_cache(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    if app.store.remove(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(&id))
    }
}

async fn healthz(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "backend": app.model.backend().name(),
        "fingerprint": app.model.fingerprint_hex(),
    }))
}

pub fn app_state(cfg: ServiceConfig) -> std::io::Result<(Arc<AppState>, Option<PathBuf>)> {
    let state = AppState {
        model: cfg.model,
        codec: cfg.codec,
        schedule: cfg.schedule,
        store: CacheStore::new(cfg.store_dir)?,
    };
    Ok((Arc::new(state), cfg.static_dir))
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/cache", post(create_cache))
        .route("/v1/cache/{id}", get(cache_meta).delete(delete_cache))
        .route("/v1/cache/{id}/decode", get(decode))
        .route("/v1/edit", post(run_edit))
        .layer(DefaultBodyLimit::max(32 << 20))
        .with_state(state);
    match static_dir.filter(|d| d.is_dir()) {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    }
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(listener: tokio::net::TcpListener, app: Router, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
