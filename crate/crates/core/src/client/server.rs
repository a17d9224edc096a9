//! HTTP server exposing any [`InferenceClient`] over the wire protocol.
//! `vicl mock-serve` uses it to put the mock behind real transport.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::sync::oneshot;

use crate::client::wire::{self, decode_b64, decode_parts};
use crate::client::SharedClient;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// /v1/trace answers 501.
    pub trace_disabled: bool,
    /// Fault injection: every n-th request fails with 503 (0 disables).
    pub fail_every: usize,
}

#[derive(Clone)]
struct AppState {
    client: SharedClient,
    options: ServerOptions,
    requests: Arc<AtomicUsize>,
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (
        status,
        Json(wire::ErrorBody {
            error: message.into(),
        }),
    )
        .into_response()
}

fn status_for(err: &Error) -> StatusCode {
    match err {
        Error::InvalidArgument(_) | Error::InvalidPrompt(_) | Error::Config(_) => {
            StatusCode::BAD_REQUEST
        }
        Error::Unsupported(_) => StatusCode::NOT_IMPLEMENTED,
        Error::Http { status, .. } => {
            StatusCode::from_u16(*status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn handle<Req, Resp, F>(state: AppState, body: Bytes, work: F) -> Response
where
    Req: DeserializeOwned + Send + 'static,
    Resp: Serialize + Send + 'static,
    F: FnOnce(&SharedClient, Req) -> Result<Resp> + Send + 'static,
{
    let n = state.requests.fetch_add(1, Ordering::SeqCst) + 1;
    if state.options.fail_every > 0 && n.is_multiple_of(state.options.fail_every) {
        return error_response(StatusCode::SERVICE_UNAVAILABLE, "injected fault");
    }
    let req: Req = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("bad request body: {e}")),
    };
    let client = state.client.clone();
    match tokio::task::spawn_blocking(move || work(&client, req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => error_response(status_for(&e), e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn embed(State(state): State<AppState>, body: Bytes) -> Response {
    handle(state, body, |client, req: wire::EmbedRequest| {
        let bytes = decode_b64(&req.image_b64)?;
        let v = client.embed_image(&bytes)?;
        Ok(wire::EmbedResponse {
            dim: v.dim(),
            values: v.values().to_vec(),
            model_id: Some(req.model_id),
        })
    })
    .await
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Response {
    handle(state, body, |client, req: wire::GenerateRequest| {
        let prompt = decode_parts(&req.parts)?;
        Ok(wire::GenerateResponse {
            text: client.generate(&prompt)?,
            model_id: Some(req.model_id),
        })
    })
    .await
}

async fn score(State(state): State<AppState>, body: Bytes) -> Response {
    handle(state, body, |client, req: wire::ScoreRequest| {
        let bytes = decode_b64(&req.image_b64)?;
        Ok(wire::ScoreResponse {
            score: client.score_image_text(&bytes, &req.text)?,
            model_id: Some(req.model_id),
        })
    })
    .await
}

async fn trace(State(state): State<AppState>, body: Bytes) -> Response {
    if state.options.trace_disabled {
        return error_response(
            StatusCode::NOT_IMPLEMENTED,
            "unsupported: trace export disabled",
        );
    }
    handle(state, body, |client, req: wire::TraceRequest| {
        let prompt = decode_parts(&req.parts)?;
        client.fetch_trace(&prompt, &req.target)
    })
    .await
}

async fn health(State(state): State<AppState>) -> Response {
    let mut models = serde_json::Map::new();
    models.insert(
        "default".into(),
        serde_json::Value::String(state.client.model_id().to_string()),
    );
    Json(wire::HealthResponse {
        status: "ok".into(),
        models,
    })
    .into_response()
}

async fn not_found() -> Response {
    error_response(StatusCode::NOT_FOUND, "no such endpoint")
}

pub fn router(client: SharedClient, options: ServerOptions) -> Router {
    let state = AppState {
        client,
        options,
        requests: Arc::new(AtomicUsize::new(0)),
    };
    Router::new()
        .route(wire::EMBED_PATH, post(embed))
        .route(wire::GENERATE_PATH, post(generate))
        .route(wire::SCORE_PATH, post(score))
        .route(wire::TRACE_PATH, post(trace))
        .route(wire::HEALTH_PATH, get(health))
        .fallback(not_found)
        .with_state(state)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| Error::Transport(format!("runtime: {e}")))
}

/// Serves until the process is killed. `on_bound` receives the bound address.
pub fn serve_forever(
    addr: &str,
    client: SharedClient,
    options: ServerOptions,
    on_bound: impl FnOnce(SocketAddr),
) -> Result<()> {
    let rt = runtime()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::Transport(format!("bind {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| Error::Transport(e.to_string()))?;
        info!("serving inference protocol on http://{local}");
        on_bound(local);
        axum::serve(listener, router(client, options))
            .await
            .map_err(|e| Error::Transport(e.to_string()))
    })
}

/// A server running on a background thread; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn spawn(addr: &str, client: SharedClient, options: ServerOptions) -> Result<ServerHandle> {
    let rt = runtime()?;
    let std_listener = std::net::TcpListener::bind(addr)
        .map_err(|e| Error::Transport(format!("bind {addr}: {e}")))?;
    std_listener
        .set_nonblocking(true)
        .map_err(|e| Error::Transport(e.to_string()))?;
    let local = std_listener
        .local_addr()
        .map_err(|e| Error::Transport(e.to_string()))?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
            let _ = axum::serve(listener, router(client, options))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
