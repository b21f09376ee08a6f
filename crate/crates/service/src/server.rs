//! HTTP parameter server.
//!
//! `POST /v1/params` takes a PNG thumbnail and returns `(d, r)`,
//! `GET /v1/projections` returns the four projection matrices and
//! `GET /v1/health` reports the loaded checkpoint.

use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chromaset_core::encoder::encode;
use chromaset_core::imaging::{decode_png, downsample, png_dimensions, Thumbnail};
use chromaset_core::pipeline::fingerprint_hex;
use chromaset_core::trainer::Model;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use tower_http::cors::{Any, CorsLayer};

use crate::wire::{ParamResponse, ProjectionsResponse};

pub const OCTET_STREAM: &str = "application/octet-stream";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    /// Largest accepted thumbnail side; larger uploads get 413.
    pub max_thumbnail_side: usize,
    /// Request bodies above this size are rejected with 413 before decoding.
    pub max_body_bytes: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { max_thumbnail_side: 256, max_body_bytes: 4 << 20 }
    }
}

/// Shared server state. The model can be swapped while serving; requests in
/// flight keep the `Arc` they started with.
#[derive(Debug, Default)]
pub struct ServerState {
    model: RwLock<Option<Arc<Model>>>,
    config: ServerConfig,
}

impl ServerState {
    pub fn new(model: Option<Model>, config: ServerConfig) -> Self {
        Self { model: RwLock::new(model.map(Arc::new)), config }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn model(&self) -> Option<Arc<Model>> {
        self.model.read().expect("model lock").clone()
    }

    /// Replace the served model; returns the previous one.
    pub fn swap(&self, model: Option<Model>) -> Option<Arc<Model>> {
        std::mem::replace(&mut *self.model.write().expect("model lock"), model.map(Arc::new))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub fingerprint: Option<String>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

fn binary(body: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, OCTET_STREAM)], body).into_response()
}

fn no_checkpoint() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded")
}

/// Decode, bound-check and encode one uploaded thumbnail. Split out of the
/// handler so it can be called without HTTP.
pub fn params_for_png(model: &Model, config: &ServerConfig, body: &[u8]) -> Result<ParamResponse, (StatusCode, String)> {
    let bad = |e: &dyn std::fmt::Display| (StatusCode::BAD_REQUEST, format!("undecodable thumbnail: {e}"));
    let (h, w) = png_dimensions(body).map_err(|e| bad(&e))?;
    let limit = config.max_thumbnail_side;
    if h.max(w) > limit {
        return Err((StatusCode::PAYLOAD_TOO_LARGE, format!("thumbnail {w}x{h} exceeds {limit}px")));
    }
    let image = decode_png(body).map_err(|e| bad(&e))?;
    let side = model.encoder.config.thumbnail_size;
    let thumb = if h == side && w == side {
        Thumbnail::from_image(image).expect("square")
    } else {
        downsample(&image, side).expect("nonzero side")
    };
    let (d, r) = encode(&thumb, &model.encoder).map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(ParamResponse { fingerprint: model.fingerprint(), d, r })
}

async fn handle_params(State(state): State<Arc<ServerState>>, body: Bytes) -> Response {
    let Some(model) = state.model() else {
        return no_checkpoint();
    };
    let config = state.config.clone();
    let result = tokio::task::spawn_blocking(move || params_for_png(&model, &config, &body)).await;
    match result {
        Ok(Ok(resp)) => binary(resp.encode()),
        Ok(Err((status, msg))) => error(status, msg),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

fn etag_for(fingerprint: &[u8; 8], k: usize) -> String {
    format!("\"{}-{k}\"", fingerprint_hex(fingerprint))
}

async fn handle_projections(State(state): State<Arc<ServerState>>, headers: HeaderMap) -> Response {
    let Some(model) = state.model() else {
        return no_checkpoint();
    };
    let resp = ProjectionsResponse::from_model(&model);
    let etag = etag_for(&resp.fingerprint, resp.k());
    let etag_value = HeaderValue::from_str(&etag).expect("ascii etag");
    let matches = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"));
    if matches {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, etag_value)]).into_response();
    }
    let mut response = binary(resp.encode());
    response.headers_mut().insert(header::ETAG, etag_value);
    response
}

async fn handle_health(State(state): State<Arc<ServerState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        fingerprint: state.model().map(|m| fingerprint_hex(&m.fingerprint())),
    })
}

pub fn router(state: Arc<ServerState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods(Any)
        .allow_headers(Any)
        .expose_headers([header::ETAG]);
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/v1/params", post(handle_params))
        .route("/v1/projections", get(handle_projections))
        .route("/v1/health", get(handle_health))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state)
}

/// Serve on `addr` until the process exits.
pub fn run(addr: SocketAddr, state: Arc<ServerState>) -> io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state)).await
    })
}

/// A server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    state: Arc<ServerState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &Arc<ServerState> {
        &self.state
    }

    pub fn stop(mut self) -> io::Result<()> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}

/// Bind `addr` (port 0 picks a free port) and serve on a new thread.
pub fn spawn(addr: SocketAddr, state: Arc<ServerState>) -> io::Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state.clone());
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener)?;
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    });
    Ok(ServerHandle { addr, state, shutdown: Some(tx), thread: Some(thread) })
}
