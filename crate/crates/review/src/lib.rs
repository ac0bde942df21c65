//! JSON-over-HTTP review service for an analyzed cohort.
//!
//! Every response carries the cohort `revision`, which increases by one on
//! each applied reselection. Reselection requests may include the revision
//! the client last saw; a request based on a revision older than the
//! subject's last change is answered with 409 and the current state.

mod store;

pub use store::{
    RecoveryView, ReselectRequest, SeriesView, StatusFilter, Store, StoreError, SubjectSummary, OVERLAY_SAMPLES,
};

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use p31_core::relax::T1Mode;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::RwLock;

/// Environment variable holding the bind address used by [`serve`] callers.
pub const BIND_ENV: &str = "P31_REVIEW_ADDR";
pub const DEFAULT_BIND: &str = "127.0.0.1:8731";

pub type SharedStore = Arc<RwLock<Store>>;

pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "error": message.into() }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::NotAnalyzed(_) | StoreError::Rejected(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Conflict { .. } => StatusCode::CONFLICT,
            StoreError::InvalidCohort(_) | StoreError::Snapshot { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

pub fn router(store: SharedStore) -> Router {
    Router::new()
        .route("/subjects", get(list_subjects))
        .route("/subjects/{id}/recovery", get(recovery))
        .route("/subjects/{id}/recovery/start-index", post(reselect))
        .route("/reports/cohort", get(cohort_report))
        .with_state(store)
}

#[derive(Deserialize)]
struct ListQuery {
    #[serde(default)]
    status: StatusFilter,
}

async fn list_subjects(
    State(store): State<SharedStore>,
    query: Result<Query<ListQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let s = store.read().await;
    Ok(Json(json!({ "revision": s.revision(), "subjects": s.list(q.status) })))
}

async fn recovery(State(store): State<SharedStore>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let s = store.read().await;
    let view = s.recovery_view(&id)?;
    Ok(Json(json!({ "revision": s.revision(), "subject": view })))
}

async fn reselect(
    State(store): State<SharedStore>,
    Path(id): Path<String>,
    body: Result<Json<ReselectRequest>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let mut s = store.write().await;
    match s.reselect(&id, &req) {
        Ok(view) => Ok(Json(json!({
            "revision": s.revision(),
            "dry_run": req.dry_run,
            "subject": view,
        }))),
        Err(e @ StoreError::Conflict { .. }) => {
            let mut err = ApiError::from(e);
            err.body["revision"] = json!(s.revision());
            err.body["subject"] = serde_json::to_value(s.recovery_view(&id)?).expect("views serialize");
            Err(err)
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Deserialize)]
struct ReportQuery {
    mode: Option<String>,
    qcs: Option<bool>,
}

async fn cohort_report(
    State(store): State<SharedStore>,
    query: Result<Query<ReportQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let s = store.read().await;
    let Some(mode) = q.mode else {
        return Ok(Json(json!({ "revision": s.revision(), "report": s.report() })));
    };
    let mode: T1Mode = mode
        .parse()
        .map_err(|e: String| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    let with_qcs = q.qcs.unwrap_or(true);
    let comparison = s
        .report()
        .comparison(mode, with_qcs)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no {} results in this cohort", mode.label())))?;
    Ok(Json(json!({ "revision": s.revision(), "comparison": comparison })))
}

/// Serves the router until the process is stopped.
pub async fn serve(store: Store, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(Arc::new(RwLock::new(store)))).await
}
