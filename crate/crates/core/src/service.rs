//! HTTP inference service.
//!
//! `POST /api/infer` runs the loaded model on a context set and a query,
//! `GET /api/tasks`, `GET /api/samples` and `GET /api/health` serve the
//! composer UI, whose static bundle is mounted at `/` when configured.
//! The model is loaded once and never mutated, so handlers share it
//! without locking.

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::context::{ContextPair, ContextSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::Split;
use crate::nn::{decode_checkpoint, Model};
use crate::palette::{
    decode_to_classes, extract_context_colors, Palette, Rgb8, DEFAULT_MAX_CLASSES,
};
use crate::rng::named_stream;
use crate::tasks::{make_task_pair, Corpus, TaskDescriptor, DEFAULT_UNSEEN_FOREGROUND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub max_context: usize,
    /// Largest accepted image side; larger payloads get 413.
    pub max_image_side: u32,
    pub max_body_bytes: usize,
    /// Static UI bundle served at `/`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            max_context: 8,
            max_image_side: 512,
            max_body_bytes: 32 << 20,
            ui_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_context == 0 {
            return Err(Error::Config("service.max_context must be positive".into()));
        }
        if self.max_image_side == 0 {
            return Err(Error::Config(
                "service.max_image_side must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct LoadedModel {
    pub id: String,
    pub model: Model<f32>,
}

impl LoadedModel {
    /// Id is the file stem plus the CRC-32 of the checkpoint bytes.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let model = decode_checkpoint(&bytes)?.into_f32();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        Ok(Self {
            id: format!("{stem}-{:08x}", crc32fast::hash(&bytes)),
            model,
        })
    }
}

/// Everything the handlers read. Immutable apart from the one-time model slot.
#[derive(Debug)]
pub struct ServiceState {
    pub config: ServiceConfig,
    pub corpus: Option<Corpus>,
    pub tasks: Vec<TaskDescriptor>,
    pub foreground: Rgb8,
    model: OnceLock<LoadedModel>,
}

impl ServiceState {
    pub fn new(config: ServiceConfig, corpus: Option<Corpus>, tasks: Vec<TaskDescriptor>) -> Self {
        Self {
            config,
            corpus,
            tasks,
            foreground: DEFAULT_UNSEEN_FOREGROUND,
            model: OnceLock::new(),
        }
    }

    /// Installs the model; a second call is a configuration error.
    pub fn install_model(&self, model: LoadedModel) -> Result<()> {
        self.model
            .set(model)
            .map_err(|_| Error::Config("a model is already loaded".into()))
    }

    pub fn model(&self) -> Option<&LoadedModel> {
        self.model.get()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPayload {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    pub context: Vec<PairPayload>,
    pub query: String,
    #[serde(default)]
    pub decode: bool,
    #[serde(default)]
    pub palette: Option<Palette>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub prediction: String,
    pub width: usize,
    pub height: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labelmap: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub palette: Option<Palette>,
    pub model_id: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_id: Option<String>,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleItem {
    pub id: String,
    pub name: String,
    pub vendor: String,
    pub image: String,
    /// Task output for this sample when a task was requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesResponse {
    pub dataset: String,
    pub split: Split,
    pub total: usize,
    pub samples: Vec<SampleItem>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SamplesQuery {
    pub dataset: String,
    pub split: Option<Split>,
    pub limit: Option<usize>,
    pub task: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub status: u16,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            status: self.status.as_u16(),
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Context(_) | Error::Shape(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Codec(_) | Error::Parse { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn encode_payload(img: &Image) -> Result<String> {
    Ok(B64.encode(img.encode_png()?))
}

/// Base64 PNG to image: 400 when malformed, 413 when a side exceeds `max_side`.
pub fn decode_payload(payload: &str, max_side: u32, what: &str) -> ApiResult<Image> {
    let bytes = B64.decode(payload.trim()).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("{what}: invalid base64: {e}"),
        )
    })?;
    let (w, h) = image::ImageReader::with_format(Cursor::new(&bytes), image::ImageFormat::Png)
        .into_dimensions()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("{what}: not a PNG: {e}")))?;
    if w > max_side || h > max_side {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("{what}: {w}x{h} exceeds the {max_side}-pixel limit"),
        ));
    }
    Image::decode_png(&bytes)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("{what}: {e}")))
}

fn unprocessable(message: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, message)
}

/// Validated request ready for the forward pass.
struct Prepared {
    context: ContextSet,
    query: Image,
    decode: bool,
    palette: Option<Palette>,
}

fn prepare(state: &ServiceState, body: &[u8], image_size: usize) -> ApiResult<Prepared> {
    let req: InferRequest = serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))?;
    let n = req.context.len();
    let max = state.config.max_context;
    if n == 0 || n > max {
        return Err(unprocessable(format!(
            "context has {n} pairs, expected 1..={max}"
        )));
    }
    let side = state.config.max_image_side;
    let query = decode_payload(&req.query, side, "query")?;
    let mut pairs = Vec::with_capacity(n);
    for (i, p) in req.context.iter().enumerate() {
        let input = decode_payload(&p.input, side, &format!("context[{i}].input"))?;
        let output = decode_payload(&p.output, side, &format!("context[{i}].output"))?;
        if input.dims() != query.dims() || output.dims() != query.dims() {
            return Err(unprocessable(format!(
                "context[{i}] is {:?}/{:?}, query is {:?}",
                input.dims(),
                output.dims(),
                query.dims()
            )));
        }
        pairs.push((input.to_rgb8(), output.to_rgb8(), input, output));
    }
    if query.dims() != (image_size, image_size) {
        return Err(unprocessable(format!(
            "query is {:?}, the model expects {image_size}x{image_size}",
            query.dims()
        )));
    }
    // Canonical order, so a permuted context yields the same bytes.
    pairs.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
    let context = ContextSet::new(
        pairs
            .into_iter()
            .map(|(_, _, i, o)| ContextPair::new(i, o))
            .collect::<Result<_>>()?,
    )?;
    Ok(Prepared {
        context,
        query,
        decode: req.decode,
        palette: req.palette,
    })
}

fn run_inference(model: &LoadedModel, p: Prepared, started: Instant) -> ApiResult<InferResponse> {
    let pred = model.model.predict(&p.context, &p.query)?;
    let (labelmap, palette) = if p.decode {
        let palette = match p.palette {
            Some(pal) => pal,
            None => extract_context_colors(&p.context, DEFAULT_MAX_CLASSES).map_err(|e| {
                unprocessable(format!("cannot derive a palette from the context: {e}"))
            })?,
        };
        let decoded =
            decode_to_classes(&pred, &palette).map_err(|e| unprocessable(e.to_string()))?;
        let png = decoded.labels.encode_png(&palette.lookup_table())?;
        (Some(B64.encode(png)), Some(palette))
    } else {
        (None, None)
    };
    Ok(InferResponse {
        prediction: encode_payload(&pred)?,
        width: pred.width(),
        height: pred.height(),
        labelmap,
        palette,
        model_id: model.id.clone(),
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

async fn infer(
    State(state): State<Arc<ServiceState>>,
    body: Bytes,
) -> ApiResult<Json<InferResponse>> {
    let started = Instant::now();
    let Some(model) = state.model() else {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "model is still loading",
        ));
    };
    let prepared = prepare(&state, &body, model.model.config().image_size)?;
    let shared = Arc::clone(&state);
    let resp = tokio::task::spawn_blocking(move || {
        let model = shared.model().expect("model was present");
        run_inference(model, prepared, started)
    })
    .await
    .map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("inference task failed: {e}"),
        )
    })??;
    Ok(Json(resp))
}

async fn tasks(State(state): State<Arc<ServiceState>>) -> Json<Vec<TaskDescriptor>> {
    Json(state.tasks.clone())
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<HealthResponse> {
    let model = state.model();
    Json(HealthResponse {
        status: if model.is_some() { "ready" } else { "loading" }.into(),
        model_id: model.map(|m| m.id.clone()),
        tasks: state.tasks.len(),
    })
}

fn list_samples(state: &ServiceState, q: SamplesQuery) -> ApiResult<SamplesResponse> {
    let corpus = state
        .corpus
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no corpus is mounted"))?;
    let split = q.split.unwrap_or(Split::Train);
    let refs = corpus.refs(&q.dataset, split).map_err(|_| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            format!("unknown dataset `{}`", q.dataset),
        )
    })?;
    let task = match &q.task {
        Some(id) => {
            let t = state.tasks.iter().find(|t| &t.id == id).ok_or_else(|| {
                ApiError::new(StatusCode::NOT_FOUND, format!("unknown task `{id}`"))
            })?;
            if !t.sources.contains(&q.dataset) {
                return Err(unprocessable(format!(
                    "task `{id}` does not draw from `{}`",
                    q.dataset
                )));
            }
            Some(t)
        }
        None => None,
    };
    let ds = &corpus.datasets()[refs.first().map_or(0, |r| r.dataset)];
    let mut samples = Vec::new();
    for r in refs.iter().take(q.limit.unwrap_or(usize::MAX)) {
        let entry = &ds.manifest.samples[r.index];
        let (input, output) = match task {
            Some(t) => {
                let mut rng = named_stream(0, &t.id, r.index as u64);
                let pair = make_task_pair(
                    t,
                    corpus.image(*r),
                    corpus.labels(*r),
                    state.foreground,
                    t.palette.as_ref(),
                    &mut rng,
                )?;
                (pair.input, Some(pair.output))
            }
            None => (corpus.image(*r).clone(), None),
        };
        samples.push(SampleItem {
            id: entry.id.clone(),
            name: corpus.sample_name(*r),
            vendor: entry.vendor.clone(),
            image: encode_payload(&input)?,
            output: output.as_ref().map(encode_payload).transpose()?,
        });
    }
    Ok(SamplesResponse {
        dataset: q.dataset,
        split,
        total: refs.len(),
        samples,
    })
}

async fn samples(
    State(state): State<Arc<ServiceState>>,
    Query(q): Query<SamplesQuery>,
) -> ApiResult<Json<SamplesResponse>> {
    Ok(Json(list_samples(&state, q)?))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    let limit = state.config.max_body_bytes;
    let ui = state.config.ui_dir.clone();
    let api = Router::new()
        .route("/api/infer", post(infer))
        .route("/api/tasks", get(tasks))
        .route("/api/samples", get(samples))
        .route("/api/health", get(health))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state);
    match ui {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Binds, starts answering (health reports `loading`), loads the checkpoint
/// in the background and serves until the process ends.
pub async fn serve(state: Arc<ServiceState>, checkpoint: PathBuf) -> Result<()> {
    let addr: SocketAddr = format!("{}:{}", state.config.host, state.config.port)
        .parse()
        .map_err(|e| Error::Config(format!("bad listen address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(PathBuf::from(addr.to_string()), e))?;
    info!("listening on http://{addr}");
    let loader = Arc::clone(&state);
    tokio::task::spawn_blocking(move || match LoadedModel::from_checkpoint(&checkpoint) {
        Ok(m) => {
            info!("model {} ready", m.id);
            if let Err(e) = loader.install_model(m) {
                warn!("{e}");
            }
        }
        Err(e) => warn!("could not load {}: {e}", checkpoint.display()),
    });
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::io(PathBuf::from(addr.to_string()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_round_trip_is_lossless_after_quantization() {
        let img = Image::from_gray(4, 4, &[0.0, 0.25, 0.5, 1.0].repeat(4));
        let back = decode_payload(&encode_payload(&img).unwrap(), 16, "x").unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn malformed_and_oversize_payloads() {
        assert_eq!(
            decode_payload("%%%", 16, "x").unwrap_err().status,
            StatusCode::BAD_REQUEST
        );
        assert_eq!(
            decode_payload(&B64.encode(b"not a png"), 16, "x")
                .unwrap_err()
                .status,
            StatusCode::BAD_REQUEST
        );
        let big = encode_payload(&Image::zeros(32, 8)).unwrap();
        assert_eq!(
            decode_payload(&big, 16, "x").unwrap_err().status,
            StatusCode::PAYLOAD_TOO_LARGE
        );
    }

    #[test]
    fn model_slot_fills_once() {
        let state = ServiceState::new(ServiceConfig::default(), None, Vec::new());
        assert!(state.model().is_none());
        let m = || LoadedModel {
            id: "m".into(),
            model: Model::new(crate::nn::ModelConfig {
                levels: 1,
                base_channels: 2,
                image_size: 8,
                ..Default::default()
            })
            .unwrap(),
        };
        state.install_model(m()).unwrap();
        assert!(state.install_model(m()).is_err());
        assert_eq!(state.model().unwrap().id, "m");
    }
}
