//! HTTP inference service over one immutable generator snapshot.
//!
//! | method | path          | body                 | response                         |
//! |--------|---------------|----------------------|----------------------------------|
//! | GET    | `/health`     |                      | `{status, checkpoint_step}`      |
//! | GET    | `/affects`    |                      | `[{id, name}]`                   |
//! | GET    | `/identities` |                      | `[{identity_id, thumbnail}]`     |
//! | POST   | `/encode`     | [`EncodeRequest`]    | `{mu, log_var}`                  |
//! | POST   | `/decode`     | [`DecodeRequest`]    | `{image}`                        |
//! | POST   | `/transform`  | [`TransformRequest`] | `{image}`                        |
//!
//! Images travel as base64-encoded PNG. Every error is JSON
//! `{error, detail}`: 400 for invalid requests, 413 for oversize bodies,
//! 404/405 for unknown routes, 503 when inference exceeds the timeout.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use fexgan::affect::{self, AffectClass, AffectVector, BlendSpec};
use fexgan::corpus::{self, preprocess, to_rgb_image};
use fexgan::generator::{affect_batch, Generator, LatentVector, Noise};
use fexgan::tensor::Tensor;
use fexgan::trainer::{load_checkpoint, Checkpoint};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub checkpoint: PathBuf,
    /// Corpus for `/identities`; defaults to the checkpoint's training corpus.
    pub corpus_root: Option<PathBuf>,
    pub max_body_bytes: usize,
    pub request_timeout: Duration,
    /// Served under `/ui` when set.
    pub static_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            checkpoint: checkpoint.into(),
            corpus_root: None,
            max_body_bytes: 8 << 20,
            request_timeout: Duration::from_secs(30),
            static_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityThumb {
    pub identity_id: u32,
    pub thumbnail: String,
}

/// Everything a request can read. Never mutated after startup.
pub struct Snapshot {
    pub generator: Generator<f32>,
    pub step: u64,
    pub identities: Vec<IdentityThumb>,
}

impl Snapshot {
    /// `corpus_root = None` falls back to the checkpoint's corpus and skips
    /// thumbnails if that directory is gone; an explicit root must load.
    pub fn from_checkpoint(ckpt: Checkpoint, corpus_root: Option<&Path>) -> fexgan::Result<Self> {
        let size = ckpt.config.image_size as u32;
        let identities = match corpus_root {
            Some(root) => thumbnails(root, size)?,
            None if ckpt.config.corpus_root.is_dir() => thumbnails(&ckpt.config.corpus_root, size)?,
            None => Vec::new(),
        };
        Ok(Self {
            generator: ckpt.models.generator,
            step: ckpt.state.step,
            identities,
        })
    }

    pub fn image_size(&self) -> usize {
        self.generator.config().image_size
    }
}

fn thumbnails(root: &Path, size: u32) -> fexgan::Result<Vec<IdentityThumb>> {
    let records = corpus::load_dataset(root)?;
    let mut first: BTreeMap<u32, &corpus::SampleRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| r.affect == AffectClass::Neutral) {
        first.entry(r.identity_id).or_insert(r);
    }
    first
        .into_values()
        .map(|r| {
            let path = root.join(&r.path);
            let img = image::open(&path)
                .map_err(|source| fexgan::Error::Image { path, source })?
                .to_rgb8();
            let t = preprocess(&img, size)?;
            Ok(IdentityThumb {
                identity_id: r.identity_id,
                thumbnail: png_base64(&to_rgb_image(t.data(), size)),
            })
        })
        .collect()
}

fn png_base64(img: &image::RgbImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).expect("PNG encoding to memory");
    BASE64.encode(buf.into_inner())
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        self.status
    }

    pub fn detail(&self) -> &str {
        &self.detail
    }

    fn bad(detail: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            error: "bad_request",
            detail: detail.into(),
        }
    }

    fn internal(detail: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            error: "internal",
            detail: detail.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.error, "detail": self.detail }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            Self {
                status: StatusCode::PAYLOAD_TOO_LARGE,
                error: "payload_too_large",
                detail: r.body_text(),
            }
        } else {
            Self::bad(r.body_text())
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn default_neutral() -> String {
    AffectClass::Neutral.name().to_string()
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeRequest {
    pub image: String,
    #[serde(default = "default_neutral")]
    pub affect: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRequest {
    pub z: Vec<f64>,
    pub blend: BTreeMap<String, f64>,
    #[serde(default)]
    pub lambda: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformRequest {
    pub image: String,
    #[serde(default = "default_neutral")]
    pub source_affect: String,
    pub blend: BTreeMap<String, f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    /// Latent noise seed when `deterministic` is false.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageResponse {
    pub image: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub mu: Vec<f32>,
    pub log_var: Vec<f32>,
}

fn parse_affect(field: &str, name: &str) -> Result<AffectClass, ApiError> {
    name.parse()
        .map_err(|_| ApiError::bad(format!("{field}: unknown affect `{name}`")))
}

/// Parses and validates a name→weight map into a target affect vector.
pub fn blend_vector(blend: &BTreeMap<String, f64>, lambda: f64) -> Result<AffectVector, ApiError> {
    let weights = blend
        .iter()
        .map(|(k, &w)| Ok((parse_affect("blend", k)?, w)))
        .collect::<Result<Vec<_>, ApiError>>()?;
    if !lambda.is_finite() {
        return Err(ApiError::bad("lambda: must be finite"));
    }
    let spec = BlendSpec::new(weights, lambda);
    affect::blend(&spec).map_err(|e| ApiError::bad(format!("blend: {e}")))
}

fn decode_image(b64: &str, size: usize) -> Result<Tensor<f32>, ApiError> {
    let bytes = BASE64
        .decode(b64.trim())
        .map_err(|e| ApiError::bad(format!("image: invalid base64 ({e})")))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| ApiError::bad(format!("image: not a decodable image ({e})")))?
        .to_rgb8();
    let t = preprocess(&img, size as u32).map_err(|e| ApiError::bad(format!("image: {e}")))?;
    t.reshape(&[1, 3, size, size]).map_err(|e| ApiError::internal(e.to_string()))
}

fn encode_output(images: &Tensor<f32>, size: usize) -> String {
    png_base64(&to_rgb_image(&images.data()[..3 * size * size], size as u32))
}

#[derive(Clone)]
struct AppState {
    snapshot: Arc<Snapshot>,
    timeout: Duration,
}

impl AppState {
    /// Runs inference off the async workers, bounded by the request timeout.
    async fn infer<T: Send + 'static>(
        &self,
        f: impl FnOnce(&Snapshot) -> Result<T, ApiError> + Send + 'static,
    ) -> Result<T, ApiError> {
        let snap = Arc::clone(&self.snapshot);
        let task = tokio::task::spawn_blocking(move || f(&snap));
        match tokio::time::timeout(self.timeout, task).await {
            Ok(Ok(r)) => r,
            Ok(Err(join)) => Err(ApiError::internal(format!("inference task failed: {join}"))),
            Err(_) => Err(ApiError {
                status: StatusCode::SERVICE_UNAVAILABLE,
                error: "timeout",
                detail: format!("inference exceeded {:?}", self.timeout),
            }),
        }
    }
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "checkpoint_step": s.snapshot.step }))
}

async fn affects() -> Json<serde_json::Value> {
    let table: Vec<_> = AffectClass::ALL
        .iter()
        .map(|c| json!({ "id": c.id(), "name": c.name() }))
        .collect();
    Json(json!(table))
}

async fn identities(State(s): State<AppState>) -> Json<Vec<IdentityThumb>> {
    Json(s.snapshot.identities.clone())
}

async fn encode(State(s): State<AppState>, body: Result<Json<EncodeRequest>, JsonRejection>) -> ApiResult<EncodeResponse> {
    let Json(req) = body?;
    let class = parse_affect("affect", &req.affect)?;
    s.infer(move |snap| {
        let image = decode_image(&req.image, snap.image_size())?;
        let source = affect_batch(&[affect::one_hot(class)]);
        let dist = snap
            .generator
            .encode(&image, &source)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(Json(EncodeResponse {
            mu: dist.mu.into_data(),
            log_var: dist.log_var.into_data(),
        }))
    })
    .await
}

async fn decode(State(s): State<AppState>, body: Result<Json<DecodeRequest>, JsonRejection>) -> ApiResult<ImageResponse> {
    let Json(req) = body?;
    let target = blend_vector(&req.blend, req.lambda)?;
    let n = s.snapshot.generator.config().latent_dim;
    if req.z.len() != n {
        return Err(ApiError::bad(format!("z: expected {n} values, got {}", req.z.len())));
    }
    if req.z.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::bad("z: values must be finite"));
    }
    s.infer(move |snap| {
        let z = Tensor::from_vec(&[1, n], req.z.iter().map(|&v| v as f32).collect())
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let out = snap
            .generator
            .decode(&LatentVector { z }, &affect_batch(&[target]))
            .map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(Json(ImageResponse { image: encode_output(&out, snap.image_size()) }))
    })
    .await
}

/// Core of `/transform`, shared with the one-shot CLI command.
pub fn run_transform(snap: &Snapshot, req: &TransformRequest) -> Result<String, ApiError> {
    let source_class = parse_affect("source_affect", &req.source_affect)?;
    let target = blend_vector(&req.blend, req.lambda)?;
    let size = snap.image_size();
    let image = decode_image(&req.image, size)?;
    let noise = if req.deterministic {
        Noise::Deterministic
    } else {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(req.seed);
        let n = snap.generator.config().latent_dim;
        Noise::Sample(fexgan::nn::param::init_normal(&[1, n], 1.0, &mut rng))
    };
    let out = snap
        .generator
        .generate(&image, &affect_batch(&[affect::one_hot(source_class)]), &affect_batch(&[target]), &noise)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(encode_output(&out, size))
}

async fn transform(
    State(s): State<AppState>,
    body: Result<Json<TransformRequest>, JsonRejection>,
) -> ApiResult<ImageResponse> {
    let Json(req) = body?;
    s.infer(move |snap| Ok(Json(ImageResponse { image: run_transform(snap, &req)? })))
        .await
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        error: "not_found",
        detail: "no such endpoint".into(),
    }
}

async fn method_not_allowed() -> ApiError {
    ApiError {
        status: StatusCode::METHOD_NOT_ALLOWED,
        error: "method_not_allowed",
        detail: "method not supported on this endpoint".into(),
    }
}

pub fn router(snapshot: Arc<Snapshot>, config: &ServiceConfig) -> Router {
    let state = AppState {
        snapshot,
        timeout: config.request_timeout,
    };
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/affects", get(affects))
        .route("/identities", get(identities))
        .route("/encode", post(encode))
        .route("/decode", post(decode))
        .route("/transform", post(transform));
    if let Some(dir) = &config.static_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(DefaultBodyLimit::max(config.max_body_bytes))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Loads the checkpoint (failing fast) and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    use anyhow::Context;
    let ckpt = load_checkpoint(&config.checkpoint)
        .with_context(|| format!("loading checkpoint {}", config.checkpoint.display()))?;
    let snapshot = Snapshot::from_checkpoint(ckpt, config.corpus_root.as_deref()).context("loading identity thumbnails")?;
    let app = router(Arc::new(snapshot), &config);
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .with_context(|| format!("binding {}", config.bind))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
