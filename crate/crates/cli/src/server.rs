//! JSON service over one loaded checkpoint.
//!
//! | route               | body                | response                          |
//! |---------------------|---------------------|-----------------------------------|
//! | `POST /v1/generate` | `GenerateRequest`   | `GenerateResponse`, or SSE        |
//! | `POST /v1/attribute`| `AttributeRequest`  | `AttributeResponse`               |
//! | `GET /v1/codes`     |                     | `CodesResponse`                   |
//! | `GET /v1/model`     |                     | `ModelInfo`                       |
//!
//! Streaming generation sends one `token` event per step (a `TokenEvent`),
//! then a `done` event with the full `GenerateResponse`, or an `error` event.

use std::convert::Infallible;
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::stream;
use tokio::sync::{mpsc, OwnedSemaphorePermit, Semaphore};
use tower_http::services::ServeDir;

use crate::api::{self, ApiError, AttributeRequest, ErrorKind, GenerateRequest};
use crate::bundle::Bundle;

pub const DEFAULT_PORT: u16 = 8787;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Clone)]
pub struct AppState {
    bundle: Option<Arc<Bundle>>,
    limiter: Arc<Semaphore>,
}

impl AppState {
    /// `bundle` is `None` when no checkpoint is configured; model routes then
    /// answer 503.
    pub fn new(bundle: Option<Bundle>, max_in_flight: usize) -> Self {
        AppState {
            bundle: bundle.map(Arc::new),
            limiter: Arc::new(Semaphore::new(max_in_flight.max(1))),
        }
    }

    fn bundle(&self) -> Result<Arc<Bundle>, Failure> {
        self.bundle.clone().ok_or_else(|| {
            Failure(ApiError {
                error: ErrorKind::ModelNotLoaded,
                message: "no checkpoint loaded; set CTRLKIT_CHECKPOINT".into(),
            })
        })
    }

    fn permit(&self) -> Result<OwnedSemaphorePermit, Failure> {
        self.limiter.clone().try_acquire_owned().map_err(|_| {
            Failure(ApiError {
                error: ErrorKind::Busy,
                message: "too many requests in flight".into(),
            })
        })
    }
}

struct Failure(ApiError);

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        Failure(e)
    }
}

impl From<JsonRejection> for Failure {
    fn from(r: JsonRejection) -> Self {
        Failure(ApiError::invalid(r.body_text()))
    }
}

fn status(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::InvalidRequest => StatusCode::BAD_REQUEST,
        ErrorKind::UnknownCode | ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::ModelNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
        ErrorKind::Busy => StatusCode::TOO_MANY_REQUESTS,
        ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (status(self.0.error), Json(self.0)).into_response()
    }
}

async fn blocking<R: Send + 'static>(f: impl FnOnce() -> Result<R, ApiError> + Send + 'static) -> Result<R, Failure> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Failure(ApiError::internal(e.to_string())))?
        .map_err(Failure)
}

fn json_event(name: &str, value: &impl serde::Serialize) -> Event {
    Event::default()
        .event(name)
        .json_data(value)
        .unwrap_or_else(|_| Event::default().event("error"))
}

async fn generate(
    State(state): State<AppState>,
    body: Result<Json<GenerateRequest>, JsonRejection>,
) -> Result<Response, Failure> {
    let Json(request) = body?;
    let bundle = state.bundle()?;
    let prepared = api::prepare_generation(&bundle, request)?;
    let permit = state.permit()?;

    if !prepared.request.stream {
        let response = blocking(move || {
            let _permit = permit;
            api::run_generation(&bundle, prepared, |_| ControlFlow::Continue(()))
        })
        .await?;
        return Ok(Json(response).into_response());
    }

    let (tx, rx) = mpsc::channel::<Event>(64);
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let result = api::run_generation(&bundle, prepared, |event| {
            // A closed channel means the client went away.
            match tx.blocking_send(json_event("token", event)) {
                Ok(()) => ControlFlow::Continue(()),
                Err(_) => ControlFlow::Break(()),
            }
        });
        let last = match result {
            Ok(response) => json_event("done", &response),
            Err(e) => json_event("error", &e),
        };
        let _ = tx.blocking_send(last);
    });
    let events = stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|e| (Ok::<_, Infallible>(e), rx)) });
    Ok(Sse::new(events).into_response())
}

async fn attribute(
    State(state): State<AppState>,
    body: Result<Json<AttributeRequest>, JsonRejection>,
) -> Result<Response, Failure> {
    let Json(request) = body?;
    let bundle = state.bundle()?;
    let permit = state.permit()?;
    let response = blocking(move || {
        let _permit = permit;
        api::attribute(&bundle, &request)
    })
    .await?;
    Ok(Json(response).into_response())
}

async fn codes(State(state): State<AppState>) -> Result<Response, Failure> {
    let bundle = state.bundle()?;
    Ok(Json(api::codes(&bundle)).into_response())
}

async fn model(State(state): State<AppState>) -> Result<Response, Failure> {
    Ok(Json(state.bundle()?.info.clone()).into_response())
}

async fn no_route() -> Failure {
    Failure(ApiError {
        error: ErrorKind::NotFound,
        message: "no such route".into(),
    })
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/generate", post(generate))
        .route("/v1/attribute", post(attribute))
        .route("/v1/codes", get(codes))
        .route("/v1/model", get(model))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(no_route),
    }
}

/// Bind and serve until Ctrl-C.
pub async fn serve(state: AppState, static_dir: Option<PathBuf>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
