//! JSON-over-HTTP interface under `/api/v1`.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};

use qualcode_core::annotation::{CodedSegment, CorpusRecord, Span};
use qualcode_core::metrics::SortKey;

use crate::error::ServiceError;
use crate::run::{RunProgress, RunStatus};
use crate::state::RunScope;
use crate::workspace::Workspace;

type Shared = Arc<Workspace>;

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

fn status_for(e: &ServiceError) -> StatusCode {
    use ServiceError::*;
    match e {
        UnknownProject(_) | UnknownText(_) | UnknownRun(_) | UnknownCode(_) => StatusCode::NOT_FOUND,
        ProjectExists(_) | RunIncomplete(_) | RunInProgress(_) | Split(_) => StatusCode::CONFLICT,
        NoExamples | InvalidProjectId(_) | Annotation(_) | Corpus(_) => StatusCode::UNPROCESSABLE_ENTITY,
        RunFailed(..) | Coder(_) | Metrics(_) | Lab(_) | Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.0.code().to_string(),
            message: self.0.to_string(),
        };
        (status_for(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ServiceError::Storage(e.to_string())))?
        .map_err(ApiError)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateProjectRequest {
    #[serde(default)]
    pub project_id: Option<String>,
    pub texts: Vec<CorpusRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreatedProject {
    pub project_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentInput {
    pub start: usize,
    pub end: usize,
    pub codes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub segments: Vec<SegmentInput>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TextIdsRequest {
    pub text_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InstructionsRequest {
    pub lines: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DescriptionRequest {
    pub description: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunRequest {
    #[serde(default = "default_scope")]
    pub scope: RunScope,
}

fn default_scope() -> RunScope {
    RunScope::Validation
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StartedRun {
    pub run_id: String,
}

#[derive(Debug, Deserialize)]
pub struct ReportQuery {
    pub sort: Option<String>,
}

pub fn router(ws: Shared) -> Router {
    Router::new()
        .route("/api/v1/projects", post(create_project).get(list_projects))
        .route("/api/v1/projects/:id", get(get_project))
        .route("/api/v1/projects/:id/changes", get(get_changes))
        .route(
            "/api/v1/projects/:id/texts/:tid/annotation",
            put(put_annotation).delete(delete_annotation),
        )
        .route("/api/v1/projects/:id/codes/:label", put(put_description))
        .route("/api/v1/projects/:id/examples", put(put_examples))
        .route("/api/v1/projects/:id/instructions", put(put_instructions))
        .route("/api/v1/projects/:id/test-set", put(put_test_set))
        .route("/api/v1/projects/:id/runs", post(start_run).get(list_runs))
        .route("/api/v1/projects/:id/runs/:rid", get(get_run))
        .route("/api/v1/projects/:id/runs/:rid/report", get(get_report))
        .route("/api/v1/projects/:id/runs/:rid/events", get(run_events))
        .route("/api/v1/projects/:id/export", get(export))
        .with_state(ws)
}

async fn create_project(
    State(ws): State<Shared>,
    Json(req): Json<CreateProjectRequest>,
) -> ApiResult<(StatusCode, Json<CreatedProject>)> {
    let project_id = blocking(move || ws.create_project_from_records(req.project_id, req.texts)).await?;
    Ok((StatusCode::CREATED, Json(CreatedProject { project_id })))
}

async fn list_projects(State(ws): State<Shared>) -> ApiResult<Json<Vec<String>>> {
    Ok(Json(blocking(move || ws.list_projects()).await?))
}

async fn get_project(State(ws): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || ws.view(&id)).await?))
}

async fn get_changes(State(ws): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || ws.changes(&id)).await?))
}

async fn put_annotation(
    State(ws): State<Shared>,
    Path((id, tid)): Path<(String, String)>,
    Json(req): Json<AnnotationRequest>,
) -> ApiResult<impl IntoResponse> {
    let annotation = blocking(move || {
        let segments = req
            .segments
            .iter()
            .map(|s| CodedSegment::new(Span::new(s.start, s.end), &s.codes))
            .collect::<Result<Vec<_>, _>>()?;
        ws.upsert_annotation(&id, &tid, segments)
    })
    .await?;
    Ok(Json(annotation))
}

async fn delete_annotation(
    State(ws): State<Shared>,
    Path((id, tid)): Path<(String, String)>,
) -> ApiResult<StatusCode> {
    blocking(move || ws.remove_annotation(&id, &tid)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn put_description(
    State(ws): State<Shared>,
    Path((id, label)): Path<(String, String)>,
    Json(req): Json<DescriptionRequest>,
) -> ApiResult<StatusCode> {
    blocking(move || ws.describe_code(&id, &label, &req.description)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn put_examples(
    State(ws): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<TextIdsRequest>,
) -> ApiResult<StatusCode> {
    blocking(move || ws.set_examples(&id, req.text_ids)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn put_instructions(
    State(ws): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<InstructionsRequest>,
) -> ApiResult<StatusCode> {
    blocking(move || ws.set_instructions(&id, req.lines)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn put_test_set(
    State(ws): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<TextIdsRequest>,
) -> ApiResult<StatusCode> {
    blocking(move || ws.set_test_set(&id, req.text_ids)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn start_run(
    State(ws): State<Shared>,
    Path(id): Path<String>,
    body: Option<Json<RunRequest>>,
) -> ApiResult<(StatusCode, Json<StartedRun>)> {
    let scope = body.map_or(RunScope::Validation, |Json(r)| r.scope);
    let run_id = blocking(move || ws.start_run(&id, scope)).await?;
    Ok((StatusCode::ACCEPTED, Json(StartedRun { run_id })))
}

async fn list_runs(State(ws): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Vec<RunProgress>>> {
    Ok(Json(blocking(move || ws.runs(&id)).await?))
}

async fn get_run(
    State(ws): State<Shared>,
    Path((id, rid)): Path<(String, String)>,
) -> ApiResult<Json<RunProgress>> {
    Ok(Json(blocking(move || ws.run_status(&id, &rid)).await?))
}

async fn get_report(
    State(ws): State<Shared>,
    Path((id, rid)): Path<(String, String)>,
    Query(q): Query<ReportQuery>,
) -> Result<Response, ApiError> {
    let sort = match q.sort.as_deref() {
        None => SortKey::Corpus,
        Some(s) => match s.parse::<SortKey>() {
            Ok(k) => k,
            Err(e) => {
                let body = ErrorBody {
                    error: "InvalidSort".into(),
                    message: e.to_string(),
                };
                return Ok((StatusCode::BAD_REQUEST, Json(body)).into_response());
            }
        },
    };
    let report = blocking(move || ws.report(&id, &rid, sort)).await?;
    Ok(Json(report).into_response())
}

/// Server-sent `progress` events until the run ends, then one `complete` or
/// `failed` event.
async fn run_events(
    State(ws): State<Shared>,
    Path((id, rid)): Path<(String, String)>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let first = {
        let (ws, id, rid) = (Arc::clone(&ws), id.clone(), rid.clone());
        blocking(move || ws.run_status(&id, &rid)).await?
    };
    let stream = futures::stream::unfold(
        (ws, id, rid, Some(first), None::<RunProgress>, false),
        |(ws, id, rid, pending, last, finished)| async move {
            if finished {
                return None;
            }
            let mut status = pending;
            loop {
                let current = match status.take() {
                    Some(s) => s,
                    None => {
                        tokio::time::sleep(Duration::from_millis(50)).await;
                        match ws.run_status(&id, &rid) {
                            Ok(s) => s,
                            Err(_) => return None,
                        }
                    }
                };
                let terminal = current.status != RunStatus::Running;
                if terminal || last.as_ref() != Some(&current) {
                    let name = match current.status {
                        RunStatus::Running => "progress",
                        RunStatus::Complete => "complete",
                        RunStatus::Failed => "failed",
                    };
                    let event = Event::default()
                        .event(name)
                        .json_data(&current)
                        .unwrap_or_else(|_| Event::default().event(name));
                    return Some((Ok(event), (ws, id, rid, None, Some(current), terminal)));
                }
            }
        },
    );
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn export(State(ws): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let name = format!("attachment; filename=\"{id}.zip\"");
    // the project exists past this point, so `id` is a safe file name
    let bytes = blocking(move || ws.export(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/zip".to_string()), (header::CONTENT_DISPOSITION, name)], bytes).into_response())
}
