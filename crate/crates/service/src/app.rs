//! Routes, handlers and the server loop.

use std::convert::Infallible;
use std::future::Future;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;
use tokio_stream::wrappers::UnboundedReceiverStream;
use tokio_stream::StreamExt;
use tower_http::cors::{AllowOrigin, CorsLayer};

use sciqa_core::index::IndexCatalog;
use sciqa_core::orchestrator::{handle_message, Deps, PipelineConfig};
use sciqa_core::trace::EventKind;

use crate::config::{ApiConfig, ConfigError, ServiceConfig};
use crate::store::{SessionStore, StoreError};

pub struct AppState {
    api: ApiConfig,
    pipeline: PipelineConfig,
    store: SessionStore,
    deps: OnceLock<Deps>,
    turns: Arc<Semaphore>,
}

impl AppState {
    pub fn new(api: ApiConfig, pipeline: PipelineConfig, store: SessionStore) -> Arc<Self> {
        let turns = Arc::new(Semaphore::new(api.max_concurrent_turns));
        Arc::new(AppState {
            api,
            pipeline,
            store,
            deps: OnceLock::new(),
            turns,
        })
    }

    /// Marks the service ready; later calls are ignored.
    pub fn set_ready(&self, deps: Deps) {
        let _ = self.deps.set(deps);
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.store
    }

    pub fn is_ready(&self) -> bool {
        self.deps.get().is_some()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown session")]
    NotFound,
    #[error("a turn is already running for this session")]
    Busy,
    #[error("service is starting")]
    NotReady,
    #[error("too many turns in flight")]
    Overloaded,
    #[error("{0}")]
    BadRequest(String),
    #[error("missing or invalid bearer token")]
    Unauthorized,
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::NotFound => StatusCode::NOT_FOUND,
            ApiError::Busy => StatusCode::CONFLICT,
            ApiError::NotReady | ApiError::Overloaded => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::Store(e) => {
                tracing::error!(error = %e, "session store failure");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageBody {
    pub text: String,
}

async fn require_token(State(state): State<Arc<AppState>>, request: Request, next: Next) -> Result<Response, ApiError> {
    if let Some(expected) = &state.api.auth_token {
        let given = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(expected.as_str()) {
            return Err(ApiError::Unauthorized);
        }
    }
    Ok(next.run(request).await)
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.deps.get() {
        Some(deps) => Json(json!({
            "status": "ok",
            "shards": deps.catalog.len(),
            "llm": deps.tools.gateway.mode(),
        }))
        .into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "starting" }))).into_response(),
    }
}

async fn shards(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let deps = state.deps.get().ok_or(ApiError::NotReady)?;
    Ok(Json(deps.catalog.summaries()).into_response())
}

async fn create_session(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let session_id = state.store.create().await?;
    Ok((StatusCode::CREATED, Json(CreatedSession { session_id })).into_response())
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = state.store.get(&id).await?.ok_or(ApiError::NotFound)?;
    let session = handle.lock().await.clone();
    Ok(Json(session).into_response())
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<MessageBody>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let deps = state.deps.get().ok_or(ApiError::NotReady)?.clone();
    let handle = state.store.get(&id).await?.ok_or(ApiError::NotFound)?;
    let mut session = handle.try_lock_owned().map_err(|_| ApiError::Busy)?;
    if session.pending_clarification.is_none() && body.text.trim().is_empty() {
        return Err(ApiError::BadRequest("message text is empty".into()));
    }
    let permit = Arc::clone(&state.turns).try_acquire_owned().map_err(|_| ApiError::Overloaded)?;

    let (tx, rx) = tokio::sync::mpsc::unbounded_channel();
    let mut trace = session.begin_exchange().with_sink(tx);
    let worker = Arc::clone(&state);
    tokio::spawn(async move {
        if let Err(e) = handle_message(&mut session, &body.text, &deps, &worker.pipeline, &mut trace).await {
            trace.emit(EventKind::Error, json!({ "message": e.to_string() }));
        }
        if let Err(e) = worker.store.save(&session).await {
            tracing::error!(error = %e, session = %session.session_id, "failed to persist session");
        }
        drop(session);
        drop(permit);
        drop(trace);
    });

    let events = UnboundedReceiverStream::new(rx)
        .map(|ev| Ok(Event::default().event(ev.kind.as_str()).data(ev.to_json_line())));
    Ok(Sse::new(events).keep_alive(KeepAlive::new().interval(Duration::from_secs(state.api.keepalive_secs))))
}

fn cors(api: &ApiConfig) -> Option<CorsLayer> {
    let origins: Vec<HeaderValue> = api.cors_allowlist.iter().filter_map(|o| o.parse().ok()).collect();
    if origins.is_empty() {
        return None;
    }
    Some(
        CorsLayer::new()
            .allow_origin(AllowOrigin::list(origins))
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE]),
    )
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/shards", get(shards))
        .route_layer(middleware::from_fn_with_state(Arc::clone(&state), require_token));
    let app = Router::new().route("/v1/health", get(health)).merge(api);
    let app = match cors(&state.api) {
        Some(layer) => app.layer(layer),
        None => app,
    };
    app.with_state(state)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

pub async fn bind(config: &ServiceConfig) -> Result<TcpListener, ServeError> {
    TcpListener::bind(&config.server.bind).await.map_err(|source| ServeError::Bind {
        addr: config.server.bind.clone(),
        source,
    })
}

/// Serves until `shutdown` resolves, then drains open streams. The catalog opens
/// in the background; until then health and shard routes answer 503.
pub async fn serve_on(
    listener: TcpListener,
    config: ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    config.validate()?;
    let tools = config.tools()?;
    let web = config.web_client()?;
    let reranker = config.reranker()?;
    let store = SessionStore::open(&config.data_dir)?;
    let state = AppState::new(config.server.clone(), config.pipeline.clone(), store);

    let loader = Arc::clone(&state);
    let data_dir = config.data_dir.clone();
    tokio::spawn(async move {
        match tokio::task::spawn_blocking(move || IndexCatalog::open(data_dir)).await {
            Ok(Ok(catalog)) => {
                tracing::info!(shards = catalog.len(), "catalog ready");
                loader.set_ready(Deps {
                    tools,
                    catalog: Arc::new(catalog),
                    embedder: Arc::new(sciqa_core::index::HashingEmbedder::default()),
                    web,
                    reranker,
                });
            }
            Ok(Err(e)) => tracing::error!(error = %e, "catalog failed to open"),
            Err(e) => tracing::error!(error = %e, "catalog loader panicked"),
        }
    });

    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

pub async fn serve(config: ServiceConfig) -> Result<(), ServeError> {
    let listener = bind(&config).await?;
    serve_on(listener, config, shutdown_signal()).await
}

/// Resolves on Ctrl-C or, on Unix, SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
