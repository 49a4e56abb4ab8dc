//! OpenAI-compatible HTTP facade.
//!
//! | route | purpose |
//! |---|---|
//! | `POST /v1/chat/completions` | chat, tools, SSE streaming, `session_id` |
//! | `POST /v1/sessions` | bind a session sequence |
//! | `DELETE /v1/sessions/{id}` | release it |
//! | `GET /metrics` | counters snapshot |
//! | `POST /admin/config` | toggle feature flags |
//! | `GET /v1/models` | model listing |
//!
//! Non-streaming responses carry `x-cache: hit` or `x-cache: miss`.

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use tokio::sync::{mpsc, oneshot};
use futures::stream::{self, StreamExt};
use tokio_stream::wrappers::UnboundedReceiverStream;

use crate::api::{
    ChatChunk, ChatRequest, ChunkDelta, ErrorBody, ErrorDetail, SessionCreated, DEFAULT_MODEL,
};
use crate::engine::{ChatOutcome, Engine, ServeError};

pub const CACHE_HEADER: &str = "x-cache";

type Shared = Arc<Engine>;

struct ApiError(ServeError);

impl From<ServeError> for ApiError {
    fn from(e: ServeError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        error_response(&self.0)
    }
}

fn error_response(e: &ServeError) -> Response {
    let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let kind = if status.is_client_error() {
        "invalid_request_error"
    } else {
        "server_error"
    };
    let body = ErrorBody {
        error: ErrorDetail {
            message: e.to_string(),
            kind: kind.into(),
            code: e.code().into(),
        },
    };
    (status, Json(body)).into_response()
}

pub fn router(engine: Shared) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/:id", delete(delete_session))
        .route("/v1/models", get(models))
        .route("/metrics", get(metrics))
        .route("/admin/config", post(admin_config).get(get_config))
        .route("/health", get(|| async { "ok" }))
        .with_state(engine)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServeError> + Send + 'static,
) -> Result<T, ServeError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or(Err(ServeError::ShuttingDown))
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ServeError> {
    serde_json::from_slice(body).map_err(|e| ServeError::BadRequest(e.to_string()))
}

async fn chat(State(engine): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: ChatRequest = parse(&body)?;
    if req.stream {
        return Ok(stream_chat(engine, req));
    }
    let outcome = blocking(move || engine.chat(&req)).await?;
    Ok(json_outcome(&outcome))
}

fn json_outcome(o: &ChatOutcome) -> Response {
    let mut resp = (
        [(header::CONTENT_TYPE, "application/json")],
        o.body.to_string(),
    )
        .into_response();
    let tag = if o.cache_hit { "hit" } else { "miss" };
    resp.headers_mut()
        .insert(CACHE_HEADER, HeaderValue::from_static(tag));
    resp
}

enum StreamMsg {
    Piece(String),
    Done(Box<Result<ChatOutcome, ServeError>>),
}

fn stream_chat(engine: Shared, req: ChatRequest) -> Response {
    let (tx, rx) = mpsc::unbounded_channel();
    let sink_tx = tx.clone();
    tokio::task::spawn_blocking(move || {
        let sink = Box::new(move |s: &str| {
            let _ = sink_tx.send(StreamMsg::Piece(s.to_string()));
        });
        let r = engine.chat_streaming(&req, sink);
        let _ = tx.send(StreamMsg::Done(Box::new(r)));
    });
    // Chunks before the response id is known use a placeholder id and the
    // final chunk carries the real one.
    let model = DEFAULT_MODEL.to_string();
    let opening = ChatChunk::new(
        "chatcmpl-pending",
        0,
        &model,
        ChunkDelta {
            role: Some("assistant".into()),
            content: None,
            tool_calls: None,
        },
    );
    let head = stream::once(async move { json_event(&opening) });
    let body = UnboundedReceiverStream::new(rx).flat_map(move |m| {
        let events: Vec<Result<Event, Infallible>> = match m {
            StreamMsg::Done(r) => done_events(*r),
            StreamMsg::Piece(p) => {
                let c = ChatChunk::content("chatcmpl-pending", 0, &model, &p);
                vec![json_event(&c)]
            }
        };
        stream::iter(events)
    });
    Sse::new(head.chain(body)).into_response()
}

fn done_events(r: Result<ChatOutcome, ServeError>) -> Vec<Result<Event, Infallible>> {
    let last = match r {
        Ok(o) => json_event(&ChatChunk::finish(&o.response)),
        Err(e) => json_event(&ErrorBody {
            error: ErrorDetail {
                message: e.to_string(),
                kind: "server_error".into(),
                code: e.code().into(),
            },
        }),
    };
    vec![last, Ok(Event::default().data("[DONE]"))]
}

fn json_event<T: serde::Serialize>(v: &T) -> Result<Event, Infallible> {
    Ok(Event::default().data(serde_json::to_string(v).expect("chunk serializes")))
}

async fn create_session(State(engine): State<Shared>) -> Result<Json<SessionCreated>, ApiError> {
    let id = blocking(move || engine.create_session()).await?;
    Ok(Json(SessionCreated {
        id,
        object: "session".into(),
    }))
}

async fn delete_session(
    State(engine): State<Shared>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    blocking(move || engine.delete_session(&id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn models() -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "object": "list",
        "data": [{"id": DEFAULT_MODEL, "object": "model", "owned_by": "deltaserve"}],
    }))
}

async fn metrics(State(engine): State<Shared>) -> Response {
    Json(engine.metrics()).into_response()
}

async fn get_config(State(engine): State<Shared>) -> Response {
    Json(engine.features()).into_response()
}

async fn admin_config(State(engine): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let flags: HashMap<String, bool> = parse(&body)?;
    let features = engine.update_features(&flags)?;
    Ok(Json(features).into_response())
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    engine: Shared,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server on its own runtime thread; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn start(engine: Shared, listen: &str) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind(listen)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new()
            .name("deltaserve-http".into())
            .spawn(move || {
                let rt = tokio::runtime::Builder::new_multi_thread()
                    .enable_all()
                    .build()?;
                rt.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(std_listener)?;
                    serve(engine, listener, async {
                        let _ = stopped.await;
                    })
                    .await
                })
            })?;
        Ok(Self {
            addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
