//! HTTP/JSON API over a judgment campaign.
//!
//! Submissions are serialized through a write lock, so the judgment log is
//! totally ordered; reads share a read lock and see a consistent state.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use kgeval::annotation::{CampaignStore, Judgment, Role, TaskState, Verdict};
use kgeval::Error;

pub type SharedStore = Arc<RwLock<CampaignStore>>;

pub fn router(store: SharedStore) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/judgments", post(submit))
        .route("/api/conflicts", get(conflicts))
        .route("/api/progress", get(progress))
        .route("/api/export/qrels", get(export_qrels))
        .with_state(store)
}

/// Serves the API until the process is stopped.
pub async fn serve(addr: SocketAddr, store: CampaignStore) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation API listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(RwLock::new(store)))).await
}

struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::UnknownTask(_) => StatusCode::NOT_FOUND,
            Error::Rejected(_) | Error::UnknownAnnotator(_) | Error::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Unresolved(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn poisoned() -> ApiError {
    ApiError(Error::Invalid("campaign state lock poisoned".into()))
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

#[derive(Serialize)]
struct TaskView<'a> {
    task_id: u32,
    question_text: &'a str,
    triple: &'a [String; 3],
    entity_label: &'a str,
    fallback: bool,
}

async fn next_task(State(store): State<SharedStore>, Query(q): Query<NextQuery>) -> ApiResult<Response> {
    let store = store.read().map_err(|_| poisoned())?;
    Ok(match store.campaign().assign(&q.annotator)? {
        Some(t) => Json(TaskView {
            task_id: t.task_id,
            question_text: &t.question_text,
            triple: &t.triple,
            entity_label: &t.entity_label,
            fallback: t.fallback,
        })
        .into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Deserialize)]
struct SubmitBody {
    task_id: u32,
    annotator: String,
    label: Verdict,
    source_url: String,
    /// Inferred from the task state when absent.
    #[serde(default)]
    role: Option<Role>,
}

#[derive(Serialize)]
struct SubmitReply {
    task_id: u32,
    #[serde(flatten)]
    state: TaskState,
}

async fn submit(State(store): State<SharedStore>, Json(body): Json<SubmitBody>) -> ApiResult<Json<SubmitReply>> {
    let mut store = store.write().map_err(|_| poisoned())?;
    let role = match body.role {
        Some(r) => r,
        None => store.campaign().role_for(body.task_id)?,
    };
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as i64);
    let state = store.submit(Judgment {
        task_id: body.task_id,
        annotator: body.annotator,
        label: body.label,
        source_url: body.source_url,
        timestamp,
        role,
    })?;
    Ok(Json(SubmitReply {
        task_id: body.task_id,
        state,
    }))
}

#[derive(Serialize)]
struct PrimaryView {
    annotator: String,
    label: Verdict,
    source_url: String,
}

#[derive(Serialize)]
struct ConflictView<'a> {
    task_id: u32,
    question_text: &'a str,
    triple: &'a [String; 3],
    entity_label: &'a str,
    judgments: Vec<PrimaryView>,
}

async fn conflicts(State(store): State<SharedStore>) -> ApiResult<Response> {
    let store = store.read().map_err(|_| poisoned())?;
    let list: Vec<ConflictView> = store
        .campaign()
        .conflicts()
        .into_iter()
        .map(|(t, js)| ConflictView {
            task_id: t.task_id,
            question_text: &t.question_text,
            triple: &t.triple,
            entity_label: &t.entity_label,
            judgments: js
                .into_iter()
                .map(|(annotator, label, source_url)| PrimaryView {
                    annotator,
                    label,
                    source_url,
                })
                .collect(),
        })
        .collect();
    Ok(Json(list).into_response())
}

async fn progress(State(store): State<SharedStore>) -> ApiResult<Response> {
    let store = store.read().map_err(|_| poisoned())?;
    Ok(Json(store.campaign().progress()).into_response())
}

async fn export_qrels(State(store): State<SharedStore>) -> ApiResult<Response> {
    let store = store.read().map_err(|_| poisoned())?;
    let judgments = store.campaign().export_judgments()?;
    let mut body = Vec::new();
    judgments
        .write_qrels(&mut body)
        .map_err(|e| ApiError(Error::Invalid(e.to_string())))?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], body).into_response())
}
