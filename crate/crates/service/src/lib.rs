//! HTTP JSON API over one checkpoint and one dataset directory.
//!
//! Everything is loaded at startup and shared read-only; handlers run the
//! numeric work on the blocking pool. Non-2xx responses always carry an
//! [`ApiError`] body.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use segcam::checkpoint::{Checkpoint, TrainingMeta};
use segcam::data::{self, Sample};
use segcam::explain::{saliency_map, seg_grad_cam};
use segcam::model::predict_mask;
use segcam::{render, Error, ExplainRequest, Model, PixelSet, SegmentationNet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", message)
    }

    fn bad_pixel_set(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BAD_PIXEL_SET", message)
    }

    fn unknown_image(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UNKNOWN_IMAGE", format!("no image with id `{id}`"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::BadClass { .. } => Self::new(StatusCode::BAD_REQUEST, "BAD_CLASS", msg),
            Error::UnknownTap { .. } => Self::new(StatusCode::BAD_REQUEST, "UNKNOWN_TAP", msg),
            Error::PixelOutOfBounds { .. } | Error::InvalidShape(_) => Self::bad_pixel_set(msg),
            Error::EmptyPixelSet => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "EMPTY_PIXEL_SET", msg),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", msg),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone, Debug, Serialize)]
pub struct TapShape {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Info {
    pub classes: Vec<String>,
    pub taps: Vec<String>,
    pub tap_shapes: Vec<TapShape>,
    pub image_size: usize,
    pub num_classes: usize,
    pub checkpoint_meta: Option<TrainingMeta>,
}

/// Immutable server state.
pub struct AppState {
    model: Model<f32>,
    info: Info,
    ids: Vec<String>,
    samples: HashMap<String, Sample>,
}

impl AppState {
    pub fn new(checkpoint: Checkpoint, image_size: usize, samples: Vec<Sample>) -> segcam::Result<Self> {
        let model = checkpoint.model;
        model.config().check_input_size(image_size, image_size)?;
        let probe = Tensor::zeros(&[1, model.config().in_channels, image_size, image_size])?;
        let pass = model.forward(&probe)?;
        let tap_shapes = model
            .tap_names()
            .into_iter()
            .map(|name| {
                let id = pass.graph.tap_node(&name)?;
                let [_, channels, height, width] = pass.graph.value(id)?.dims4("tap")?;
                Ok(TapShape { name, channels, height, width })
            })
            .collect::<segcam::Result<_>>()?;
        let info = Info {
            classes: checkpoint.class_names,
            taps: model.tap_names(),
            tap_shapes,
            image_size,
            num_classes: model.num_classes(),
            checkpoint_meta: checkpoint.training,
        };
        Ok(Self {
            model,
            info,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            samples: samples.into_iter().map(|s| (s.id.clone(), s)).collect(),
        })
    }

    pub fn load(ckpt: &Path, data_dir: &Path) -> segcam::Result<Self> {
        let checkpoint = Checkpoint::load(ckpt)?;
        let (manifest, samples) = data::read_dataset(data_dir)?;
        Self::new(checkpoint, manifest.size, samples)
    }

    pub fn info(&self) -> &Info {
        &self.info
    }

    fn sample(&self, id: &str) -> Result<&Sample, ApiError> {
        self.samples.get(id).ok_or_else(|| ApiError::unknown_image(id))
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum PixelSetBody {
    Single { i: usize, j: usize },
    Rect { i0: usize, j0: usize, i1: usize, j1: usize },
    All,
    Predicted { class_id: usize },
    /// `bits_base64` packs one bit per pixel, row-major, most significant bit
    /// first; trailing bits of the last byte are ignored.
    Mask { width: usize, height: usize, bits_base64: String },
}

fn parse_pixel_set(value: serde_json::Value) -> Result<PixelSet, ApiError> {
    let body: PixelSetBody = serde_json::from_value(value).map_err(|e| ApiError::bad_pixel_set(e.to_string()))?;
    Ok(match body {
        PixelSetBody::Single { i, j } => PixelSet::Single { i, j },
        PixelSetBody::Rect { i0, j0, i1, j1 } => PixelSet::Rect { i0, j0, i1, j1 },
        PixelSetBody::All => PixelSet::All,
        PixelSetBody::Predicted { class_id } => PixelSet::PredictedClass { class_id },
        PixelSetBody::Mask { width, height, bits_base64 } => {
            let packed = B64
                .decode(bits_base64)
                .map_err(|e| ApiError::bad_pixel_set(format!("bits_base64: {e}")))?;
            let n = width * height;
            if packed.len() != n.div_ceil(8) {
                return Err(ApiError::bad_pixel_set(format!(
                    "bits_base64 holds {} bytes, a {height}x{width} mask needs {}",
                    packed.len(),
                    n.div_ceil(8)
                )));
            }
            let bits = (0..n).map(|p| packed[p / 8] & (0x80 >> (p % 8)) != 0).collect();
            PixelSet::Mask { height, width, bits }
        }
    })
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

#[derive(Debug, Deserialize)]
struct PredictBody {
    image_id: String,
}

#[derive(Debug, Deserialize)]
struct ExplainBody {
    image_id: String,
    class_id: usize,
    tap: String,
    pixel_set: serde_json::Value,
    #[serde(default)]
    include_saliency: bool,
}

#[derive(Debug, Serialize)]
pub struct ImageList {
    pub ids: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct ImageBody {
    pub width: usize,
    pub height: usize,
    pub rgba_base64: String,
}

#[derive(Debug, Serialize)]
pub struct PredictResponse {
    pub width: usize,
    pub height: usize,
    pub class_ids_base64: String,
    pub palette: Vec<[u8; 3]>,
}

#[derive(Debug, Serialize)]
pub struct ExplainResponse {
    pub tap_width: usize,
    pub tap_height: usize,
    pub raw_base64: String,
    pub overlay_rgba_base64: String,
    pub max_raw_value: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub saliency_rgba_base64: Option<String>,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))?
        .map(Json)
}

fn image_dims(image: &Tensor<f32>) -> (usize, usize) {
    let d = image.dims();
    (d[3], d[2])
}

async fn info(State(state): State<Arc<AppState>>) -> Json<Info> {
    Json(state.info.clone())
}

async fn list_images(State(state): State<Arc<AppState>>) -> Json<ImageList> {
    Json(ImageList { ids: state.ids.clone() })
}

async fn get_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<ImageBody> {
    let sample = state.sample(&id)?;
    let (width, height) = image_dims(&sample.image);
    let rgba = render::image_to_rgba8(&sample.image).map_err(ApiError::from)?;
    Ok(Json(ImageBody { width, height, rgba_base64: B64.encode(rgba) }))
}

pub fn predict_response(model: &Model<f32>, image: &Tensor<f32>) -> segcam::Result<PredictResponse> {
    let mask = predict_mask(model.forward(image)?.logits())?;
    Ok(PredictResponse {
        width: mask.width(),
        height: mask.height(),
        class_ids_base64: B64.encode(mask.ids()),
        palette: render::class_palette(model.num_classes()),
    })
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<PredictResponse> {
    let req: PredictBody = parse_body(&body)?;
    state.sample(&req.image_id)?;
    blocking(move || {
        let sample = state.sample(&req.image_id)?;
        Ok(predict_response(&state.model, &sample.image)?)
    })
    .await
}

fn f32_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn explain_response(
    model: &Model<f32>,
    image: &Tensor<f32>,
    request: &ExplainRequest,
    include_saliency: bool,
) -> segcam::Result<ExplainResponse> {
    let heat = seg_grad_cam(model, image, request)?;
    let [tap_height, tap_width] = heat.raw.dims2("explain")?;
    let overlay = render::colorize_overlay(image, &heat.upsampled)?;
    let saliency_rgba_base64 = if include_saliency {
        let sal = saliency_map(model, image, request)?;
        let overlay = render::colorize_overlay(image, &sal)?;
        Some(B64.encode(render::image_to_rgba8(&overlay)?))
    } else {
        None
    };
    Ok(ExplainResponse {
        tap_width,
        tap_height,
        raw_base64: B64.encode(f32_le(heat.raw.data())),
        overlay_rgba_base64: B64.encode(render::image_to_rgba8(&overlay)?),
        max_raw_value: heat.raw.max_value(),
        saliency_rgba_base64,
    })
}

async fn explain(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<ExplainResponse> {
    let req: ExplainBody = parse_body(&body)?;
    let pixel_set = parse_pixel_set(req.pixel_set)?;
    state.sample(&req.image_id)?;
    blocking(move || {
        let sample = state.sample(&req.image_id)?;
        let request = ExplainRequest::new(req.class_id, req.tap, pixel_set);
        Ok(explain_response(&state.model, &sample.image, &request, req.include_saliency)?)
    })
    .await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", "no such endpoint")
}

/// The API under `/api`, plus `static_dir` (the explorer UI) at `/` if given.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/info", get(info))
        .route("/images", get(list_images))
        .route("/images/{id}", get(get_image))
        .route("/predict", post(predict))
        .route("/explain", post(explain))
        .fallback(not_found)
        .with_state(state);
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let app = Router::new().nest("/api", api);
    let app = match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.fallback(not_found),
    };
    app.layer(cors)
}

/// Serves until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
