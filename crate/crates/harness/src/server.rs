//! HTTP front for a [`HumanQueue`]: labelers pull the next pending question
//! and post a yes/no verdict.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use scopegen_core::human::{HumanQueue, VerdictError};

pub const BIND_ENV: &str = "SCOPEGEN_ORACLE_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8765";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictBody {
    pub admissible: bool,
}

#[derive(Debug, Serialize)]
struct Ack {
    query_id: u64,
    admissible: bool,
}

pub fn router(queue: Arc<HumanQueue>) -> Router {
    Router::new()
        .route("/queries/next", get(next_query))
        .route("/queries/{id}/verdict", post(post_verdict))
        .route("/status", get(status))
        .with_state(queue)
}

fn error(code: StatusCode, message: impl ToString) -> Response {
    (code, Json(json!({ "error": message.to_string() }))).into_response()
}

async fn next_query(State(q): State<Arc<HumanQueue>>) -> Response {
    match q.next_task() {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn post_verdict(
    State(q): State<Arc<HumanQueue>>,
    Path(id): Path<String>,
    body: Result<Json<VerdictBody>, JsonRejection>,
) -> Response {
    let Ok(id) = id.parse::<u64>() else {
        return error(StatusCode::BAD_REQUEST, format!("bad query id {id:?}"));
    };
    let body = match body {
        Ok(Json(b)) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    match q.post_verdict(id, body.admissible) {
        Ok(()) => Json(Ack {
            query_id: id,
            admissible: body.admissible,
        })
        .into_response(),
        Err(e @ VerdictError::NotFound) => error(StatusCode::NOT_FOUND, e),
        Err(e @ VerdictError::Conflict) => error(StatusCode::CONFLICT, e),
    }
}

async fn status(State(q): State<Arc<HumanQueue>>) -> Response {
    Json(q.status()).into_response()
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    queue: Arc<HumanQueue>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(queue)).with_graceful_shutdown(shutdown).await
}
