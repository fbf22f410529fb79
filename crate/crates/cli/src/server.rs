//! Read-only HTTP service over an immutable engine snapshot.

use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use rt2v_core::engine::{Engine, EngineConfig, EngineError, RetrieveOptions};
use rt2v_core::twin::serialize_twin;
use serde::Deserialize;
use serde_json::json;

/// Shared service state. The engine slot is empty while loading.
#[derive(Clone, Default)]
pub struct AppState {
    engine: Arc<OnceLock<Arc<Engine>>>,
}

impl AppState {
    pub fn loading() -> Self {
        Self::default()
    }

    pub fn ready(engine: Engine) -> Self {
        let state = Self::default();
        state.install(engine);
        state
    }

    pub fn install(&self, engine: Engine) {
        let _ = self.engine.set(Arc::new(engine));
    }

    fn get(&self) -> Result<Arc<Engine>, Response> {
        self.engine.get().cloned().ok_or_else(|| json_response(StatusCode::SERVICE_UNAVAILABLE, json!({"status": "loading"}).to_string() + "\n"))
    }
}

fn json_response(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    json_response(status, json!({"error": message.to_string()}).to_string() + "\n")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrieveRequest {
    query: String,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    tau: Option<f64>,
}

async fn retrieve(State(state): State<AppState>, body: Bytes) -> Response {
    let engine = match state.get() {
        Ok(e) => e,
        Err(r) => return r,
    };
    let req: RetrieveRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid request: {e}")),
    };
    if req.query.trim().is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "query must not be empty");
    }
    let opts = RetrieveOptions { k: req.k, tau: req.tau };
    let result = tokio::task::spawn_blocking(move || engine.retrieve_read_only(&req.query, opts)).await;
    match result {
        Ok(Ok(response)) => json_response(StatusCode::OK, response.to_json() + "\n"),
        Ok(Err(e @ (EngineError::EmptyQuery | EngineError::Config(_)))) => error(StatusCode::UNPROCESSABLE_ENTITY, e),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn twin(State(state): State<AppState>, Path(video_id): Path<String>) -> Response {
    let engine = match state.get() {
        Ok(e) => e,
        Err(r) => return r,
    };
    match engine.twin(&video_id) {
        Some(t) => json_response(StatusCode::OK, serialize_twin(t) + "\n"),
        None => error(StatusCode::NOT_FOUND, format!("unknown video {video_id}")),
    }
}

async fn mask(State(state): State<AppState>, Path((video_id, instance, frame)): Path<(String, String, String)>) -> Response {
    let engine = match state.get() {
        Ok(e) => e,
        Err(r) => return r,
    };
    let (Ok(instance), Ok(frame)) = (instance.parse::<u64>(), frame.parse::<u64>()) else {
        return error(StatusCode::NOT_FOUND, "instance and frame must be integers");
    };
    match engine.mask_text(&video_id, instance, frame) {
        Some(Ok(text)) => (StatusCode::OK, [(header::CONTENT_TYPE, "text/plain")], text).into_response(),
        Some(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        None => error(StatusCode::NOT_FOUND, format!("no mask for {video_id}/{instance}/{frame}")),
    }
}

async fn health(State(state): State<AppState>) -> Response {
    let engine = match state.get() {
        Ok(e) => e,
        Err(r) => return r,
    };
    let meta = engine.index().meta();
    let body = json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "index": {
            "format": meta.format,
            "provider_id": meta.provider_id,
            "head_version": meta.head_version,
            "dim": meta.dim,
            "videos": engine.index().video_count(),
            "components": engine.index().len(),
        },
        "k": engine.config().k,
        "tau": engine.config().tau,
    });
    json_response(StatusCode::OK, body.to_string() + "\n")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/twins/:video_id", get(twin))
        .route("/v1/masks/:video_id/:instance/:frame", get(mask))
        .route("/health", get(health))
        .with_state(state)
}

/// Bind `addr`, then load the engine in the background; requests get 503
/// until it is ready.
pub async fn serve(config: EngineConfig, listener: tokio::net::TcpListener) -> anyhow::Result<()> {
    let state = AppState::loading();
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match Engine::load(config) {
        Ok(engine) => {
            tracing::info!("engine loaded");
            loader.install(engine);
        }
        Err(e) => tracing::error!(error = %e, "engine failed to load"),
    });
    axum::serve(listener, router(state)).await?;
    Ok(())
}

pub fn serve_blocking(config: EngineConfig, addr: &str) -> anyhow::Result<()> {
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        serve(config, listener).await
    })
}
