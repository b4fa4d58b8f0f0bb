use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use muralfill_core::data::{extract_lines, SobelNms};
use muralfill_core::raster::{decode_gray, decode_rgb, encode_gray_png};
use muralfill_core::{LineDrawing, LineProvenance, Mask, MuralSource, RawMural};
use serde::Deserialize;
use serde_json::json;

use crate::error::ServiceError;
use crate::jobs::{JobInput, JobManager};
use crate::registry::Registry;

/// Model used when a submission names none.
pub const DEFAULT_MODEL: &str = "default";

/// Largest accepted request body.
pub const MAX_BODY_BYTES: usize = 256 * 1024 * 1024;

/// Binarization threshold of `POST /api/lines` when none is given.
pub const DEFAULT_LINE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Default)]
pub struct AppState {
    pub registry: Arc<Mutex<Registry>>,
    pub jobs: Arc<JobManager>,
}

impl AppState {
    pub fn new(registry: Registry) -> Self {
        AppState {
            registry: Arc::new(Mutex::new(registry)),
            jobs: Arc::new(JobManager::new()),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/models", get(list_models))
        .route("/api/models/{name}/load", post(load_model))
        .route("/api/jobs", post(submit_job))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/jobs/{id}/result", get(job_result))
        .route("/api/lines", post(lines))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    let loaded = state.registry.lock().expect("registry").loaded_names();
    Json(json!({ "ok": true, "loaded_models": loaded }))
}

async fn list_models(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "models": state.registry.lock().expect("registry").view() }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadRequest {
    checkpoint: Option<PathBuf>,
}

async fn load_model(State(state): State<AppState>, Path(name): Path<String>, body: Bytes) -> Result<Response, ServiceError> {
    let req: LoadRequest = if body.is_empty() {
        LoadRequest { checkpoint: None }
    } else {
        serde_json::from_slice(&body).map_err(|e| ServiceError::validation(format!("load request: {e}")))?
    };
    let registry = state.registry.clone();
    let view = tokio::task::spawn_blocking(move || -> Result<_, ServiceError> {
        let mut reg = registry.lock().expect("registry");
        if let Some(path) = &req.checkpoint {
            reg.register(&name, path)?;
        }
        reg.load(&name)?;
        Ok(reg.view().into_iter().find(|v| v.name == name).expect("loaded entry"))
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(view).into_response())
}

struct Upload {
    image: Option<Bytes>,
    mask: Option<Bytes>,
    line: Option<Bytes>,
    model: Option<String>,
    threshold: Option<String>,
}

async fn read_multipart(mut mp: Multipart) -> Result<Upload, ServiceError> {
    let mut up = Upload {
        image: None,
        mask: None,
        line: None,
        model: None,
        threshold: None,
    };
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| ServiceError::validation(format!("multipart: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ServiceError::validation(format!("field `{name}`: {e}")))?;
        let text = || String::from_utf8(bytes.to_vec()).map_err(|_| ServiceError::validation(format!("field `{name}` is not UTF-8")));
        match name.as_str() {
            "image" => up.image = Some(bytes.clone()),
            "mask" => up.mask = Some(bytes.clone()),
            "line" => up.line = Some(bytes.clone()),
            "model_name" => up.model = Some(text()?),
            "threshold" => up.threshold = Some(text()?),
            other => return Err(ServiceError::validation(format!("unexpected field `{other}`"))),
        }
    }
    Ok(up)
}

fn required(field: Option<Bytes>, name: &str) -> Result<Bytes, ServiceError> {
    field.ok_or_else(|| ServiceError::validation(format!("missing field `{name}`")))
}

/// Decodes the three rasters with the on-disk conventions and checks that
/// they agree in size.
pub fn decode_job_input(image: &[u8], mask: &[u8], line: &[u8]) -> Result<JobInput, ServiceError> {
    let image = decode_rgb(image).map_err(|e| ServiceError::validation(format!("image: {e}")))?;
    let mask = decode_gray(mask).map_err(|e| ServiceError::validation(format!("mask: {e}")))?;
    let line = decode_gray(line).map_err(|e| ServiceError::validation(format!("line: {e}")))?;
    let dims = [("image", (image.dim().0, image.dim().1)), ("mask", mask.dim()), ("line", line.dim())];
    if dims.iter().any(|(_, d)| *d != dims[0].1) {
        let shapes: serde_json::Map<String, serde_json::Value> = dims.iter().map(|(k, (h, w))| (k.to_string(), json!([h, w]))).collect();
        let text: Vec<String> = dims.iter().map(|(k, (h, w))| format!("{k} {h}x{w}")).collect();
        return Err(ServiceError::Validation {
            message: format!("input sizes differ: {}", text.join(", ")),
            details: Some(json!({ "shapes": shapes })),
        });
    }
    if image.is_empty() {
        return Err(ServiceError::validation("image is empty"));
    }
    Ok(JobInput {
        image,
        mask: Mask::new(mask.mapv(|v| if v > 127 { 1.0 } else { 0.0 })),
        line: LineDrawing::new(line.mapv(|v| if v < 128 { 1.0 } else { 0.0 }), LineProvenance::ManualCompleted),
    })
}

async fn submit_job(State(state): State<AppState>, mp: Multipart) -> Result<Response, ServiceError> {
    let up = read_multipart(mp).await?;
    let model = up.model.unwrap_or_else(|| DEFAULT_MODEL.to_string());
    let input = decode_job_input(&required(up.image, "image")?, &required(up.mask, "mask")?, &required(up.line, "line")?)?;
    let bundle = {
        let reg = state.registry.lock().expect("registry");
        match reg.loaded(&model) {
            Some(b) => b,
            None if reg.is_registered(&model) => {
                return Err(ServiceError::validation(format!(
                    "model `{model}` is registered but not loaded; POST /api/models/{model}/load first"
                )))
            }
            None => return Err(ServiceError::validation(format!("unknown model `{model}`"))),
        }
    };
    let id = state.jobs.submit(&model, bundle, input)?;
    Ok((axum::http::StatusCode::ACCEPTED, Json(json!({ "id": id }))).into_response())
}

async fn job_status(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(state.jobs.status(&id)?).into_response())
}

async fn job_result(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let r = state.jobs.result(&id)?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::HeaderName::from_static("x-job-id"), r.view.id.clone()),
            (header::HeaderName::from_static("x-model-fingerprint"), r.view.model_fingerprint.clone()),
            (header::HeaderName::from_static("x-hole-ratio"), r.view.hole_ratio.to_string()),
        ],
        r.png.as_ref().clone(),
    )
        .into_response())
}

/// Line drawing of an uploaded image, in the on-disk convention, so a
/// client can start editing from an extracted drawing.
async fn lines(mp: Multipart) -> Result<Response, ServiceError> {
    let up = read_multipart(mp).await?;
    let threshold = match up.threshold {
        Some(t) => t
            .trim()
            .parse::<f64>()
            .map_err(|_| ServiceError::validation(format!("threshold `{t}` is not a number")))?,
        None => DEFAULT_LINE_THRESHOLD,
    };
    let pixels = decode_rgb(&required(up.image, "image")?).map_err(|e| ServiceError::validation(format!("image: {e}")))?;
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, ServiceError> {
        let mural = RawMural::from_pixels_unchecked("upload", MuralSource::Real, pixels);
        let line = extract_lines(&mural, &SobelNms, threshold).map_err(|e| ServiceError::validation(e.to_string()))?;
        encode_gray_png(&line.to_gray()).map_err(|e| ServiceError::Internal(e.to_string()))
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
