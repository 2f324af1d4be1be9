//! HTTP API. All bodies are JSON; every route except login needs
//! `Authorization: Bearer <token>`. Errors use the envelope
//! `{"error": {"code", "message"}}`, with `fields` added for validation
//! failures.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::NaiveDate;
use serde::Deserialize;
use serde_json::json;

use crate::error::ServiceError;
use crate::model::{Account, ReportEdits};
use crate::service::AssessmentService;

pub type SharedService = Arc<AssessmentService>;

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(ServiceError::Invalid(e.body_text()))
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError(ServiceError::Invalid(e.body_text()))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let e = self.0;
        let status = StatusCode::from_u16(e.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut error = json!({"code": e.code(), "message": e.to_string()});
        let fields = e.fields();
        if !fields.is_empty() {
            error["fields"] = json!(fields);
        }
        if let ServiceError::Gateway { retryable, .. } = e {
            error["retryable"] = json!(retryable);
        }
        (status, Json(json!({ "error": error }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// The account behind the request's bearer token.
pub struct Auth(pub Account);

impl FromRequestParts<SharedService> for Auth {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, svc: &SharedService) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or(ServiceError::Unauthenticated)?;
        Ok(Auth(svc.authenticate(token.trim())?))
    }
}

#[derive(Deserialize)]
struct LoginBody {
    account_id: String,
    password: String,
}

#[derive(Deserialize)]
struct TextBody {
    text: String,
}

#[derive(Deserialize)]
struct WindowQuery {
    from: NaiveDate,
    to: NaiveDate,
}

pub fn router(svc: SharedService) -> Router {
    Router::new()
        .route("/auth/login", post(login))
        .route("/sessions", post(open_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/turns", post(post_turn))
        .route("/sessions/{id}/close", post(close_session))
        .route("/jobs/{id}", get(job_status))
        .route("/patients", get(list_patients))
        .route("/patients/{id}/timeline", get(timeline))
        .route("/patients/{id}/cyclical", get(cyclical))
        .route("/reports/{id}", get(get_report).patch(revise_report))
        .route("/reports/{id}/release", post(release_report))
        .route("/reports/{id}/feedback", post(submit_feedback))
        .fallback(|| async { ApiError(ServiceError::not_found("route", "")) })
        .with_state(svc)
}

async fn login(
    State(svc): State<SharedService>,
    body: Result<Json<LoginBody>, JsonRejection>,
) -> ApiResult<crate::model::LoginGrant> {
    let Json(b) = body?;
    Ok(Json(svc.login(&b.account_id, &b.password).await?))
}

async fn open_session(State(svc): State<SharedService>, Auth(a): Auth) -> Result<impl IntoResponse, ApiError> {
    Ok((StatusCode::CREATED, Json(svc.open_session(&a).await?)))
}

async fn get_session(
    State(svc): State<SharedService>,
    Auth(a): Auth,
    Path(id): Path<String>,
) -> ApiResult<crate::model::Session> {
    Ok(Json(svc.get_session(&a, &id)?))
}

async fn post_turn(
    State(svc): State<SharedService>,
    Auth(a): Auth,
    Path(id): Path<String>,
    body: Result<Json<TextBody>, JsonRejection>,
) -> ApiResult<moodbridge_core::Turn> {
    let Json(b) = body?;
    Ok(Json(svc.post_turn(&a, &id, &b.text).await?))
}

async fn close_session(
    State(svc): State<SharedService>,
    Auth(a): Auth,
    Path(id): Path<String>,
) -> ApiResult<crate::model::CloseOutcome> {
    Ok(Json(svc.close_session(&a, &id).await?))
}

async fn job_status(
    State(svc): State<SharedService>,
    Auth(_): Auth,
    Path(id): Path<String>,
) -> ApiResult<crate::model::JobStatus> {
    Ok(Json(svc.job_status(&id)?))
}

async fn list_patients(
    State(svc): State<SharedService>,
    Auth(a): Auth,
) -> ApiResult<Vec<crate::model::PatientSummary>> {
    Ok(Json(svc.list_patients(&a)?))
}

async fn timeline(
    State(svc): State<SharedService>,
    Auth(a): Auth,
    Path(id): Path<String>,
) -> ApiResult<crate::model::Timeline> {
    Ok(Json(svc.get_timeline(&a, &id)?))
}

async fn cyclical(
    State(svc): State<SharedService>,
    Auth(a): Auth,
    Path(id): Path<String>,
    q: Result<Query<WindowQuery>, QueryRejection>,
) -> ApiResult<moodbridge_core::pipeline::CyclicalSummary> {
    let Query(q) = q?;
    Ok(Json(svc.cyclical(&a, &id, q.from, q.to).await?))
}

async fn get_report(
    State(svc): State<SharedService>,
    Auth(a): Auth,
    Path(id): Path<String>,
) -> ApiResult<crate::model::ReportView> {
    Ok(Json(svc.get_report(&a, &id)?))
}

async fn revise_report(
    State(svc): State<SharedService>,
    Auth(a): Auth,
    Path(id): Path<String>,
    body: Result<Json<ReportEdits>, JsonRejection>,
) -> ApiResult<crate::model::ReviewRecord> {
    let Json(edits) = body?;
    Ok(Json(svc.revise_report(&a, &id, &edits).await?))
}

async fn release_report(
    State(svc): State<SharedService>,
    Auth(a): Auth,
    Path(id): Path<String>,
) -> ApiResult<crate::model::ReviewRecord> {
    Ok(Json(svc.release_report(&a, &id).await?))
}

async fn submit_feedback(
    State(svc): State<SharedService>,
    Auth(a): Auth,
    Path(id): Path<String>,
    body: Result<Json<TextBody>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(b) = body?;
    Ok((StatusCode::CREATED, Json(svc.submit_feedback(&a, &id, &b.text).await?)))
}

/// Binds and serves until the task is cancelled.
pub async fn serve(svc: SharedService, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc)).await
}
