//! HTTP routes.

use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

use crate::error::ServiceError;
use crate::job::JobRequest;
use crate::service::Service;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/jobs", post(submit))
        .route("/api/jobs/{id}", get(status))
        .route("/api/images/{reference}", get(image))
        .route("/api/health", get(health))
        .with_state(service)
}

async fn submit(State(svc): State<Arc<Service>>, body: Bytes) -> Result<Response, ServiceError> {
    let req: JobRequest =
        serde_json::from_slice(&body).map_err(|e| ServiceError::validation("body", e.to_string()))?;
    let id = svc.submit(req)?;
    let body = json!({ "id": id, "status": "queued" });
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

async fn status(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(svc.status(&id)?).into_response())
}

async fn image(State(svc): State<Arc<Service>>, Path(reference): Path<String>) -> Result<Response, ServiceError> {
    let bytes = svc.image(&reference)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn health(State(svc): State<Arc<Service>>) -> Response {
    Json(svc.health()).into_response()
}

/// Serves until `shutdown` resolves, then drains running jobs.
pub async fn serve(
    service: Arc<Service>,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(Arc::clone(&service));
    let result = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    tokio::task::spawn_blocking(move || service.shutdown())
        .await
        .map_err(std::io::Error::other)?;
    result
}

/// Resolves on Ctrl-C or SIGTERM.
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
