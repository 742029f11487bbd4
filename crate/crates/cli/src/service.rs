//! HTTP render service: `GET /info` and `POST /render`.

use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dynrad::dataset::orbit_pose;
use dynrad::render::Mat4;
use dynrad::Aabb;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::loaded::LoadedModel;

pub const DEFAULT_MAX_SIZE: usize = 1024;
pub const MAX_SAMPLES: usize = 4096;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub max_size: usize,
    pub samples: Option<usize>,
    pub background: Option<[f64; 3]>,
    /// Renders slower than this are logged as warnings.
    pub latency_budget: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_size: DEFAULT_MAX_SIZE,
            samples: None,
            background: None,
            latency_budget: Duration::from_secs(2),
        }
    }
}

/// Shared state. Requests take a snapshot of the current model; `swap` replaces it.
pub struct ServiceState {
    model: RwLock<Arc<LoadedModel>>,
    pub config: ServiceConfig,
}

impl ServiceState {
    pub fn new(model: LoadedModel, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            model: RwLock::new(Arc::new(model)),
            config,
        })
    }

    pub fn current(&self) -> Arc<LoadedModel> {
        self.model.read().expect("model lock poisoned").clone()
    }

    pub fn swap(&self, model: LoadedModel) {
        *self.model.write().expect("model lock poisoned") = Arc::new(model);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    /// Camera-to-world matrix; alternative to the orbit fields.
    #[serde(default)]
    pub pose: Option<Mat4>,
    #[serde(default)]
    pub azimuth: Option<f64>,
    #[serde(default)]
    pub elevation: Option<f64>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub params: Vec<f64>,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub samples: Option<usize>,
}

impl RenderRequest {
    pub fn orbit(azimuth: f64, elevation: f64, radius: f64, params: Vec<f64>, width: usize, height: usize) -> Self {
        Self {
            pose: None,
            azimuth: Some(azimuth),
            elevation: Some(elevation),
            radius: Some(radius),
            params,
            width,
            height,
            samples: None,
        }
    }

    /// Checks every precondition and resolves the camera pose.
    pub fn validate(&self, ranges: &[(f64, f64)], max_size: usize) -> Result<Mat4, String> {
        for (name, v) in [("width", self.width), ("height", self.height)] {
            if v == 0 || v > max_size {
                return Err(format!("{name} must be in 1..={max_size}, got {v}"));
            }
        }
        if let Some(s) = self.samples {
            if !(2..=MAX_SAMPLES).contains(&s) {
                return Err(format!("samples must be in 2..={MAX_SAMPLES}, got {s}"));
            }
        }
        if self.params.len() != ranges.len() {
            return Err(format!("expected {} params, got {}", ranges.len(), self.params.len()));
        }
        for (i, (&v, &(lo, hi))) in self.params.iter().zip(ranges).enumerate() {
            if !(lo..=hi).contains(&v) {
                return Err(format!("params[{i}] = {v} is outside its range [{lo}, {hi}]"));
            }
        }
        let orbit = [self.azimuth, self.elevation, self.radius];
        match (self.pose, orbit) {
            (Some(pose), [None, None, None]) => Ok(pose),
            (None, [Some(az), Some(el), Some(r)]) => {
                if !(-180.0..=180.0).contains(&az) {
                    return Err(format!("azimuth must be in [-180, 180], got {az}"));
                }
                if !(-90.0..=90.0).contains(&el) {
                    return Err(format!("elevation must be in [-90, 90], got {el}"));
                }
                if !(r > 0.0 && r.is_finite()) {
                    return Err(format!("radius must be positive, got {r}"));
                }
                orbit_pose(az, el, r, [0.0; 3]).map_err(|e| e.to_string())
            }
            _ => Err("give either pose or all of azimuth, elevation, radius".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Info {
    #[serde(rename = "K")]
    pub k: usize,
    pub params: Vec<ParamInfo>,
    /// Spatial grid resolution of the trained field.
    pub training_resolution: [usize; 3],
    /// Width and height of the training images.
    pub image_size: Option<[usize; 2]>,
    pub aabb: Aabb,
    pub max_size: usize,
    pub default_samples: usize,
}

pub fn info(state: &ServiceState) -> Info {
    let m = state.current();
    let ranges = m.param_ranges();
    Info {
        k: ranges.len(),
        params: ranges
            .iter()
            .enumerate()
            .map(|(i, &range)| ParamInfo {
                name: m.meta.param_names.get(i).cloned().unwrap_or_else(|| format!("p{i}")),
                range,
            })
            .collect(),
        training_resolution: m.model.field.resolution(),
        image_size: m.meta.image_size,
        aabb: m.model.field.aabb,
        max_size: state.config.max_size,
        default_samples: m.render_config(state.config.samples, None).n_samples,
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

async fn get_info(State(state): State<Arc<ServiceState>>) -> Json<Info> {
    Json(info(&state))
}

/// Renders a request to PNG bytes.
pub fn render_png(state: &ServiceState, req: &RenderRequest) -> Result<Vec<u8>, String> {
    let m = state.current();
    let pose = req.validate(m.param_ranges(), state.config.max_size)?;
    let camera = m.camera(pose, req.width, req.height).map_err(|e| e.to_string())?;
    let config = m.render_config(req.samples.or(state.config.samples), state.config.background);
    let img = m.render(&camera, &req.params, &config).map_err(|e| e.to_string())?;
    img.encode_png().map_err(|e| e.to_string())
}

async fn post_render(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: RenderRequest = serde_json::from_slice(&body).map_err(|e| bad_request(format!("malformed request: {e}")))?;
    {
        let m = state.current();
        req.validate(m.param_ranges(), state.config.max_size).map_err(bad_request)?;
    }
    let start = Instant::now();
    let worker = state.clone();
    let job = req.clone();
    let png = tokio::task::spawn_blocking(move || render_png(&worker, &job))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(bad_request)?;
    let elapsed = start.elapsed();
    if elapsed > state.config.latency_budget {
        log::warn!("render {}x{} took {elapsed:?}, over the {:?} budget", req.width, req.height, state.config.latency_budget);
    } else {
        log::info!("render {}x{} took {elapsed:?}", req.width, req.height);
    }
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/info", get(get_info))
        .route("/render", post(post_render))
        .with_state(state)
}

/// Binds `port` on all interfaces and serves until the process exits.
pub async fn serve(state: Arc<ServiceState>, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
