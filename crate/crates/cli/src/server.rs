//! HTTP routes over a [`ServiceState`].
//!
//! | method | path            | body / query                                         |
//! |--------|-----------------|------------------------------------------------------|
//! | GET    | `/health`       |                                                      |
//! | GET    | `/countries`    |                                                      |
//! | GET    | `/prescriptors` |                                                      |
//! | GET    | `/forecast`     | `country`, `prescriptor`, `horizon`, `start_date`, `seed` |
//! | POST   | `/scratchpad`   | `ScratchpadRequest` JSON                             |
//!
//! Errors are JSON objects with a machine-readable `code`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::body::Body;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use esp_core::service::{ForecastQuery, Published, ScratchpadRequest, ServiceConfig, ServiceError, ServiceResult, ServiceState};
use esp_core::store::Registry;

use crate::{ServeArgs, Summary};

/// Contents of the serve TOML file. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
    pub port: u16,
    /// Registry holding the published manifest; defaults to `--registry`.
    pub registry: Option<PathBuf>,
    /// Allowed dashboard origin; `*` allows any.
    pub cors_origin: String,
    pub cache_size: usize,
    pub mc_rollouts: usize,
    pub default_seed: u64,
    pub default_horizon: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        let service = ServiceConfig::default();
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            registry: None,
            cors_origin: "*".into(),
            cache_size: service.cache_size,
            mc_rollouts: service.mc_rollouts,
            default_seed: service.default_seed,
            default_horizon: service.default_horizon,
        }
    }
}

impl ServeConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn service(&self) -> ServiceConfig {
        ServiceConfig {
            mc_rollouts: self.mc_rollouts,
            cache_size: self.cache_size,
            default_seed: self.default_seed,
            default_horizon: self.default_horizon,
        }
    }
}

struct ApiError(ServiceError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

fn rejection(status: StatusCode, message: String) -> ApiError {
    let mut e = ServiceError::bad_request(message);
    e.status = status.as_u16();
    e.code = "invalid_request".into();
    ApiError(e)
}

fn json_body<T: Serialize>(value: &T) -> Response {
    match serde_json::to_vec(value) {
        Ok(bytes) => ([(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], Body::from(bytes)).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn blocking<T, F>(state: Arc<ServiceState>, f: F) -> Result<Response, ApiError>
where
    T: Serialize + Send + 'static,
    F: FnOnce(&ServiceState) -> ServiceResult<T> + Send + 'static,
{
    let out = tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError(ServiceError::bad_request(format!("worker failed: {e}"))))?;
    out.map(|v| json_body(&v)).map_err(ApiError)
}

async fn health(State(state): State<Arc<ServiceState>>) -> Response {
    json_body(&state.health())
}

async fn countries(State(state): State<Arc<ServiceState>>) -> Response {
    json_body(&state.countries())
}

async fn prescriptors(State(state): State<Arc<ServiceState>>) -> Response {
    json_body(&state.prescriptors())
}

async fn forecast(State(state): State<Arc<ServiceState>>, query: Result<Query<ForecastQuery>, QueryRejection>) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|r| rejection(StatusCode::BAD_REQUEST, r.body_text()))?;
    blocking(state, move |s| s.forecast(&q)).await
}

async fn scratchpad(State(state): State<Arc<ServiceState>>, body: Result<Json<ScratchpadRequest>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|r| rejection(r.status(), r.body_text()))?;
    blocking(state, move |s| s.scratchpad(&req)).await
}

fn cors(origin: &str) -> Result<CorsLayer> {
    let allow = if origin == "*" {
        AllowOrigin::from(Any)
    } else {
        AllowOrigin::exact(HeaderValue::from_str(origin).with_context(|| format!("invalid CORS origin `{origin}`"))?)
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]))
}

pub fn router(state: Arc<ServiceState>, cors_origin: &str) -> Result<Router> {
    Ok(Router::new()
        .route("/health", get(health))
        .route("/countries", get(countries))
        .route("/prescriptors", get(prescriptors))
        .route("/forecast", get(forecast))
        .route("/scratchpad", post(scratchpad))
        .layer(cors(cors_origin)?)
        .with_state(state))
}

/// Loads the published manifest under `registry` and builds the router.
pub fn app(registry: &Path, cfg: &ServeConfig) -> Result<Router> {
    let reg = Registry::open(registry)?;
    let published = Published::load(&reg)?;
    let state = Arc::new(ServiceState::new(published, cfg.service())?);
    router(state, &cfg.cors_origin)
}

pub fn serve_command(default_registry: &Path, a: &ServeArgs) -> Result<Summary> {
    let mut cfg = match &a.config {
        Some(p) => ServeConfig::load(p)?,
        None => ServeConfig::default(),
    };
    if let Some(b) = &a.bind {
        cfg.bind = b.clone();
    }
    if let Some(p) = a.port {
        cfg.port = p;
    }
    let registry = cfg.registry.clone().unwrap_or_else(|| default_registry.to_path_buf());
    let app = app(&registry, &cfg)?;
    let addr: SocketAddr = format!("{}:{}", cfg.bind, cfg.port)
        .parse()
        .with_context(|| format!("invalid bind address {}:{}", cfg.bind, cfg.port))?;
    let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
    let shown = registry.display().to_string();
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        let local = listener.local_addr()?;
        eprintln!("serving {shown} on http://{local}");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("server error")?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(Summary {
        command: "serve",
        message: format!("stopped serving {}", registry.display()),
        fields: serde_json::json!({ "registry": registry, "address": addr.to_string() }),
    })
}
