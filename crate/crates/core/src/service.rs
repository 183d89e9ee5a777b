//! HTTP inference service.
//!
//! | method | path           | request                                   | response            |
//! |--------|----------------|-------------------------------------------|---------------------|
//! | GET    | `/model-info`  |                                           | [`ModelInfo`] JSON  |
//! | POST   | `/encode`      | [`EncodeRequest`] JSON                    | [`EncodeResponse`]  |
//! | POST   | `/translate`   | [`TranslateRequest`] JSON                 | `image/png`         |
//! | POST   | `/interpolate` | [`InterpolateRequest`] JSON               | `image/png` strip   |
//!
//! Images travel as base64-encoded PNG. Malformed requests get a 400 with
//! `{"error": ..., "field": ...}`; requests made before a model is loaded get
//! a 503.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::Error;
use crate::imageio;
use crate::inference::{style_rows, ManipulationPlan, Translator};

pub const DEFAULT_INTERPOLATION_STEPS: usize = 8;
const MAX_INTERPOLATION_STEPS: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelInfo {
    pub nd: usize,
    pub nz: usize,
    pub style_dim: usize,
    pub attribute_names: Vec<String>,
    pub image_size: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub image: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContentSummary {
    pub shape: Vec<i64>,
    pub mean: f64,
    pub std: f64,
    pub l2_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub style: Vec<f32>,
    pub noise: Vec<f32>,
    pub attributes: Vec<f32>,
    pub attribute_names: Vec<String>,
    pub content: ContentSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranslateRequest {
    pub image: String,
    pub plan: ManipulationPlan,
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpolateRequest {
    pub image: String,
    pub dim: usize,
    /// Number of evenly spaced frames from `t = 0` to `t = 1`.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Explicit interpolation positions; overrides `steps`.
    #[serde(default)]
    pub t_values: Option<Vec<f32>>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub error: String,
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn bad_request(field: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                error: message.into(),
                field: field.map(str::to_string),
            },
        }
    }

    fn unavailable() -> Self {
        Self {
            status: StatusCode::SERVICE_UNAVAILABLE,
            body: ErrorBody {
                error: "no model is loaded".into(),
                field: None,
            },
        }
    }

    fn from_error(field: &str, e: Error) -> Self {
        match e {
            Error::Plan(_) | Error::Shape(_) | Error::Image(_) | Error::Config(_) => {
                Self::bad_request(Some(field), e.to_string())
            }
            other => Self {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                body: ErrorBody {
                    error: other.to_string(),
                    field: None,
                },
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Shared service state: at most one loaded translator.
#[derive(Clone, Default)]
pub struct AppState {
    model: Arc<Mutex<Option<Translator>>>,
}

impl AppState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_translator(translator: Translator) -> Self {
        Self {
            model: Arc::new(Mutex::new(Some(translator))),
        }
    }

    pub fn set_translator(&self, translator: Option<Translator>) {
        *self.model.lock().unwrap_or_else(|p| p.into_inner()) = translator;
    }

    fn with_model<T>(&self, f: impl FnOnce(&Translator) -> ApiResult<T>) -> ApiResult<T> {
        let guard = self.model.lock().unwrap_or_else(|p| p.into_inner());
        match guard.as_ref() {
            Some(t) => f(t),
            None => Err(ApiError::unavailable()),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/model-info", get(model_info))
        .route("/encode", post(encode))
        .route("/translate", post(translate))
        .route("/interpolate", post(interpolate))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub fn model_info_of(t: &Translator) -> ModelInfo {
    let layout = t.layout();
    ModelInfo {
        nd: layout.nd,
        nz: layout.nz,
        style_dim: layout.len(),
        attribute_names: t.attribute_names().to_vec(),
        image_size: t.image_size(),
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.inner().to_string();
        let field = if path == "." { field_of(&msg) } else { Some(path) };
        ApiError::bad_request(field.as_deref(), msg)
    })
}

/// Pulls the field name out of serde messages such as "missing field `plan`".
fn field_of(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

fn decode_image(field: &str, b64: &str, size: i64) -> ApiResult<Tensor> {
    let bytes = BASE64
        .decode(b64.trim())
        .map_err(|e| ApiError::bad_request(Some(field), format!("invalid base64: {e}")))?;
    if !bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        return Err(ApiError::bad_request(Some(field), "payload is not a PNG image"));
    }
    let img = imageio::decode_png(&bytes, size).map_err(|e| ApiError::from_error(field, e))?;
    Ok(img.unsqueeze(0))
}

fn png_response(img: &Tensor) -> ApiResult<Response> {
    let bytes = imageio::encode_png(img).map_err(|e| ApiError::from_error("image", e))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn request_rng(seed: Option<u64>) -> ChaCha8Rng {
    match seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => ChaCha8Rng::from_os_rng(),
    }
}

async fn model_info(State(state): State<AppState>) -> ApiResult<Json<ModelInfo>> {
    state.with_model(|t| Ok(Json(model_info_of(t))))
}

async fn encode(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<EncodeResponse>> {
    state.with_model(|t| {
        let req: EncodeRequest = parse(&body)?;
        let img = decode_image("image", &req.image, t.image_size())?;
        let enc = t.encode(&img).map_err(|e| ApiError::from_error("image", e))?;
        let layout = t.layout();
        let style = style_rows(&enc.style, layout)
            .map_err(|e| ApiError::from_error("image", e))?
            .remove(0);
        let c = enc.content.to_kind(Kind::Double);
        Ok(Json(EncodeResponse {
            noise: style[..layout.nz].to_vec(),
            attributes: style[layout.nz..].to_vec(),
            style,
            attribute_names: t.attribute_names().to_vec(),
            content: ContentSummary {
                shape: enc.content.size()[1..].to_vec(),
                mean: c.mean(Kind::Double).double_value(&[]),
                std: c.std(true).double_value(&[]),
                l2_norm: c.square().sum(Kind::Double).sqrt().double_value(&[]),
            },
        }))
    })
}

async fn translate(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    state.with_model(|t| {
        let req: TranslateRequest = parse(&body)?;
        req.plan
            .validate(t.layout())
            .map_err(|e| ApiError::from_error("plan", e))?;
        let img = decode_image("image", &req.image, t.image_size())?;
        let mut rng = request_rng(req.seed);
        let out = match &req.reference {
            Some(r) => {
                let reference = decode_image("reference", r, t.image_size())?;
                t.translate_with_reference(&img, &reference, &req.plan, &mut rng)
            }
            None => t.translate(&img, &req.plan, &mut rng),
        }
        .map_err(|e| ApiError::from_error("plan", e))?;
        png_response(&out.squeeze_dim(0))
    })
}

async fn interpolate(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    state.with_model(|t| {
        let req: InterpolateRequest = parse(&body)?;
        let style_dim = t.layout().len();
        if req.dim >= style_dim {
            return Err(ApiError::bad_request(
                Some("dim"),
                format!("dim {} out of range 0..{style_dim}", req.dim),
            ));
        }
        let ts = match (&req.t_values, req.steps) {
            (Some(ts), _) if ts.is_empty() || ts.len() > MAX_INTERPOLATION_STEPS => {
                return Err(ApiError::bad_request(
                    Some("t_values"),
                    format!("between 1 and {MAX_INTERPOLATION_STEPS} values are required"),
                ));
            }
            (Some(ts), _) => ts.clone(),
            (None, steps) => {
                let steps = steps.unwrap_or(DEFAULT_INTERPOLATION_STEPS);
                if !(2..=MAX_INTERPOLATION_STEPS).contains(&steps) {
                    return Err(ApiError::bad_request(
                        Some("steps"),
                        format!("steps must be in 2..={MAX_INTERPOLATION_STEPS}, got {steps}"),
                    ));
                }
                (0..steps).map(|i| i as f32 / (steps - 1) as f32).collect()
            }
        };
        let img = decode_image("image", &req.image, t.image_size())?;
        let mut rng = request_rng(req.seed);
        let frames = t
            .interpolate(&img, req.dim, &ts, &mut rng)
            .map_err(|e| ApiError::from_error("t_values", e))?;
        let frames: Vec<Tensor> = frames.iter().map(|f| f.squeeze_dim(0)).collect();
        png_response(&imageio::strip(&frames))
    })
}
