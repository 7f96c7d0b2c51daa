//! HTTP transport for [`SessionManager`].
//!
//! Generation is CPU-bound and runs on the blocking pool; the manager's
//! per-session lock queues concurrent requests to one session.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dragflow_core::rewards::track_position;
use dragflow_core::scene::Point;
use dragflow_core::service::{SessionError, SessionManager};
use serde::de::DeserializeOwned;

use crate::wire::{CreateSession, ErrorBody, FrameResponse, HistoryResponse, NextFrame, Regenerate, ServerConfig};

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into() } }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::UnknownCheckpoint(_) | SessionError::UnknownSession(_) => StatusCode::NOT_FOUND,
            SessionError::InvalidControl(_) | SessionError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
            SessionError::Rollback(_) => StatusCode::CONFLICT,
            SessionError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Parses a JSON body; malformed bodies get the same error payload shape as
/// every other failure.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn config(State(m): State<Arc<SessionManager>>) -> Json<ServerConfig> {
    Json(ServerConfig { checkpoints: m.model_ids(), schedule: m.schedule().times().to_vec() })
}

async fn create(State(m): State<Arc<SessionManager>>, body: Bytes) -> ApiResult<FrameResponse> {
    let req: CreateSession = parse(&body)?;
    let reference = req.reference.map(|r| r.decode()).transpose().map_err(ApiError::bad_request)?;
    let start = match (req.position, &reference) {
        (Some(p), _) => p,
        (None, Some(r)) => track_position(r, m.reward()).ok_or_else(|| ApiError::bad_request("reference frame has no trackable blob"))?,
        (None, None) => return Err(ApiError::bad_request("either `position` or `reference` is required")),
    };
    blocking(move || {
        let (id, first) = m.create(&req.checkpoint, start, reference, req.seed)?;
        Ok(Json(FrameResponse::new(&id, &first)))
    })
    .await
}

async fn next_frame(State(m): State<Arc<SessionManager>>, Path(id): Path<String>, body: Bytes) -> ApiResult<FrameResponse> {
    let req: NextFrame = parse(&body)?;
    blocking(move || {
        let e = m.next_frame(&id, Point::new(req.x, req.y))?;
        Ok(Json(FrameResponse::new(&id, &e)))
    })
    .await
}

async fn regenerate(State(m): State<Arc<SessionManager>>, Path(id): Path<String>, body: Bytes) -> ApiResult<FrameResponse> {
    let req: Regenerate = parse(&body)?;
    let noise_seed = req
        .noise_seed
        .map(|s| s.parse::<u64>().map_err(|_| ApiError::bad_request(format!("noise_seed {s:?} is not an unsigned integer"))))
        .transpose()?;
    blocking(move || {
        let e = m.regenerate(&id, Point::new(req.x, req.y), req.frame, noise_seed)?;
        Ok(Json(FrameResponse::new(&id, &e)))
    })
    .await
}

async fn history(State(m): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<HistoryResponse> {
    blocking(move || {
        let frames = m.history(&id)?.iter().map(|e| FrameResponse::new(&id, e)).collect();
        Ok(Json(HistoryResponse { session: id, frames }))
    })
    .await
}

async fn delete(State(m): State<Arc<SessionManager>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    m.delete(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/config", get(config))
        .route("/sessions", post(create))
        .route("/sessions/{id}/frames", post(next_frame))
        .route("/sessions/{id}/regenerate", post(regenerate))
        .route("/sessions/{id}/history", get(history))
        .route("/sessions/{id}", axum::routing::delete(delete))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(manager)
}

pub async fn serve(manager: Arc<SessionManager>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(manager)).await?;
    Ok(())
}
