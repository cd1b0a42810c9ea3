//! HTTP API.
//!
//! Every error body has the shape `{"error": {"code", "message", "details"?}}`
//! and each code maps to exactly one status:
//!
//! | code                     | status |
//! |--------------------------|--------|
//! | `unauthorized`           | 401    |
//! | `forbidden`              | 403    |
//! | `not_found`              | 404    |
//! | `method_not_allowed`     | 405    |
//! | `stale_revision`         | 409    |
//! | `invalid_state`          | 409    |
//! | `payload_too_large`      | 413    |
//! | `unsupported_media_type` | 415    |
//! | `validation`             | 422    |
//! | `internal`               | 500    |
//!
//! Authorization is checked against the caller's stored role before the
//! target resource is looked up or the body is parsed, so a denied request
//! learns nothing about what exists.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, FromRequestParts, Multipart, Path, Query, State};
use axum::http::header::{self, HeaderMap, HeaderName, HeaderValue};
use axum::http::request::Parts;
use axum::http::{Method, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use futures::Stream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{broadcast, watch};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::auth::{Action, AuthError, Decision, PolicyMatrix, TokenKey};
use crate::domain::{AccountView, AssetRef, DomainError, NewTask, Priority, Role, Task, TaskPatch, TaskStatus, UserAccount};
use crate::events::{EntityKind, MutationEvent};
use crate::id::Id;
use crate::service::{Service, ServiceError};
use crate::store::{Page, StoreError, TaskFilter};

pub const DEFAULT_ORIGINS: [&str; 4] = [
    "http://localhost:5173",
    "http://127.0.0.1:5173",
    "http://localhost:3000",
    "http://127.0.0.1:3000",
];
pub const DEFAULT_PAGE_LIMIT: usize = 100;
pub const DEFAULT_ACTIVITY_COUNT: usize = 20;
const BACKLOG_CHUNK: usize = 500;
/// Room for multipart framing on top of the asset limit.
const MULTIPART_OVERHEAD: usize = 64 * 1024;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), details: None }
    }

    fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid credentials")
    }

    pub fn forbidden() -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", "your role does not permit this action")
    }

    pub fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("{what} not found"))
    }

    pub fn validation(field: Option<&str>, message: impl Into<String>) -> Self {
        let message = message.into();
        let e = Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message.clone());
        match field {
            Some(f) => e.with_details(json!({ f: message })),
            None => e,
        }
    }

    pub fn invalid_state(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "invalid_state", message)
    }

    pub fn payload_too_large(message: impl Into<String>) -> Self {
        Self::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", message)
    }

    pub fn unsupported_media_type(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_media_type", message)
    }

    pub fn internal(err: impl std::fmt::Display) -> Self {
        tracing::error!(error = %err, "request failed");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal error")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "code": self.code, "message": self.message });
        if let Some(d) = self.details {
            body["details"] = d;
        }
        (self.status, Json(json!({ "error": body }))).into_response()
    }
}

fn domain_field(e: &DomainError) -> Option<&'static str> {
    match e {
        DomainError::EmptyTitle | DomainError::TitleTooLong(_) => Some("title"),
        DomainError::DescriptionTooLong(_) => Some("description"),
        DomainError::EmptyName | DomainError::NameTooLong => Some("name"),
        DomainError::InvalidEmail => Some("email"),
        DomainError::EmptyAsset => Some("file"),
        _ => None,
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Domain(d) => match d {
                DomainError::TaskTrashed | DomainError::AlreadyTrashed | DomainError::NotTrashed => {
                    ApiError::invalid_state(d.to_string())
                }
                DomainError::AssetTooLarge { .. } => ApiError::payload_too_large(d.to_string()),
                _ => ApiError::validation(domain_field(&d), d.to_string()),
            },
            ServiceError::NotFound(what) => ApiError::not_found(what),
            ServiceError::Stale { current } => {
                ApiError::new(StatusCode::CONFLICT, "stale_revision", format!("stale revision, current is {current}"))
                    .with_details(json!({ "current_revision": current }))
            }
            ServiceError::Validation { message, details } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message).with_details(json!(details))
            }
            ServiceError::InvalidState(m) => ApiError::invalid_state(m),
            ServiceError::Unauthorized => ApiError::unauthorized(),
            ServiceError::PayloadTooLarge { size, limit } => {
                ApiError::payload_too_large(format!("payload is {size} bytes, limit is {limit}"))
            }
            ServiceError::Auth(a @ (AuthError::PasswordTooShort | AuthError::PasswordTooLong)) => {
                ApiError::validation(Some("password"), a.to_string())
            }
            ServiceError::Auth(a) => ApiError::internal(a),
            ServiceError::Store(s) => match s {
                StoreError::NotFound | StoreError::BlobNotFound => ApiError::not_found("resource"),
                StoreError::AlreadyExists => ApiError::invalid_state(s.to_string()),
                StoreError::EmptyBlob => ApiError::validation(Some("file"), s.to_string()),
                other => ApiError::internal(other),
            },
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub allowed_origins: Vec<String>,
    pub heartbeat: Duration,
}

impl Default for ApiConfig {
    fn default() -> Self {
        ApiConfig {
            allowed_origins: DEFAULT_ORIGINS.iter().map(|s| s.to_string()).collect(),
            heartbeat: Duration::from_secs(15),
        }
    }
}

struct Inner {
    service: Arc<Service>,
    key: TokenKey,
    policy: PolicyMatrix,
    heartbeat: Duration,
    shutdown: watch::Sender<bool>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(service: Arc<Service>, key: TokenKey, heartbeat: Duration) -> Self {
        AppState(Arc::new(Inner {
            service,
            key,
            policy: PolicyMatrix::default(),
            heartbeat,
            shutdown: watch::channel(false).0,
        }))
    }

    pub fn service(&self) -> &Arc<Service> {
        &self.0.service
    }

    /// Ends every open event stream so a graceful shutdown can complete.
    pub fn close_streams(&self) {
        self.0.shutdown.send_replace(true);
    }

    fn require(&self, user: &UserAccount, action: Action) -> ApiResult<()> {
        match self.0.policy.decide(user.role, action) {
            Decision::Allow => Ok(()),
            Decision::Deny => Err(ApiError::forbidden()),
        }
    }
}

/// Runs a blocking service call (file I/O, password hashing) off the async
/// workers.
async fn blocking<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
{
    let svc = state.0.service.clone();
    tokio::task::spawn_blocking(move || f(&svc)).await.map_err(ApiError::internal)?.map_err(ApiError::from)
}

/// The authenticated caller, resolved to its current stored account.
pub struct Caller(pub UserAccount);

fn query_param<'a>(query: Option<&'a str>, name: &str) -> Option<&'a str> {
    query?.split('&').find_map(|kv| {
        let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
        (k == name).then_some(v)
    })
}

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let header_token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(|t| t.trim().to_string());
        // Browsers cannot set headers on an EventSource, so the stream also
        // takes the token as a query parameter.
        let token = header_token.or_else(|| {
            (parts.uri.path() == "/api/events")
                .then(|| query_param(parts.uri.query(), "access_token").map(str::to_string))
                .flatten()
        });
        let token = token.ok_or_else(ApiError::unauthorized)?;
        let key = state.0.key.clone();
        let user = blocking(state, move |svc| svc.authenticate(&token, &key)).await?;
        Ok(Caller(user))
    }
}

/// Path extractor whose failures are 404s: a malformed id names nothing.
pub struct IdPath(pub Id);

impl<S: Send + Sync> FromRequestParts<S> for IdPath {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        Path::<Id>::from_request_parts(parts, state)
            .await
            .map(|Path(id)| IdPath(id))
            .map_err(|_| ApiError::not_found("resource"))
    }
}

pub struct ApiQuery<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequestParts<S> for ApiQuery<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        Query::<T>::from_request_parts(parts, state)
            .await
            .map(|Query(q)| ApiQuery(q))
            .map_err(|e| ApiError::validation(None, e.body_text()))
    }
}

/// Parses a JSON body. Done inside handlers, after the policy check.
fn json_body<T: DeserializeOwned>(headers: &HeaderMap, body: &Bytes) -> ApiResult<T> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.split(';').next())
        .is_some_and(|m| {
            let m = m.trim().to_ascii_lowercase();
            m == "application/json" || (m.starts_with("application/") && m.ends_with("+json"))
        });
    if !is_json {
        return Err(ApiError::unsupported_media_type("expected an application/json body"));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::validation(None, format!("invalid request body: {e}")))
}

/// `If-Match` as a revision number; accepts `3` and `"3"`.
fn if_match(headers: &HeaderMap) -> ApiResult<Option<u64>> {
    let Some(v) = headers.get(header::IF_MATCH) else {
        return Ok(None);
    };
    v.to_str()
        .ok()
        .map(|s| s.trim().trim_matches('"'))
        .and_then(|s| s.parse::<u64>().ok())
        .filter(|r| *r >= 1)
        .map(Some)
        .ok_or_else(|| ApiError::validation(Some("If-Match"), "If-Match must be a revision number"))
}

fn etag(revision: u64) -> [(HeaderName, HeaderValue); 1] {
    [(header::ETAG, HeaderValue::from_str(&format!("\"{revision}\"")).expect("digits are a valid header"))]
}

fn task_response(status: StatusCode, task: Task) -> Response {
    (status, etag(task.revision), Json(task)).into_response()
}

#[derive(Debug, Deserialize)]
struct LoginRequest {
    email: String,
    password: String,
}

#[derive(Debug, Serialize)]
struct LoginResponse {
    token: String,
    account: AccountView,
    expires_in: i64,
}

async fn login(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<Json<LoginResponse>> {
    let req: LoginRequest = json_body(&headers, &body)?;
    let key = state.0.key.clone();
    let (token, account) = blocking(&state, move |svc| svc.login(&req.email, &req.password, &key)).await?;
    Ok(Json(LoginResponse { token, account, expires_in: state.0.service.config().token_ttl_secs }))
}

async fn me(Caller(user): Caller) -> Json<AccountView> {
    Json(user.view())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ListQuery {
    status: Option<TaskStatus>,
    priority: Option<Priority>,
    assignee: Option<Id>,
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ListResponse<T> {
    items: Vec<T>,
    total_count: usize,
    offset: usize,
    limit: usize,
}

async fn list_with(state: &AppState, q: ListQuery, trashed: bool) -> ApiResult<Json<ListResponse<Task>>> {
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE_LIMIT);
    let page = Page::new(offset, limit).map_err(|e| ApiError::validation(Some("limit"), e.to_string()))?;
    let filter = TaskFilter { status: q.status, priority: q.priority, assignee: q.assignee, trashed: Some(trashed) };
    let listing = blocking(state, move |svc| svc.list_tasks(&filter, page)).await?;
    Ok(Json(ListResponse { items: listing.items, total_count: listing.total_count, offset, limit }))
}

async fn list_tasks(
    State(state): State<AppState>,
    Caller(user): Caller,
    ApiQuery(q): ApiQuery<ListQuery>,
) -> ApiResult<Json<ListResponse<Task>>> {
    state.require(&user, Action::TaskRead)?;
    list_with(&state, q, false).await
}

async fn list_trash(
    State(state): State<AppState>,
    Caller(user): Caller,
    ApiQuery(q): ApiQuery<ListQuery>,
) -> ApiResult<Json<ListResponse<Task>>> {
    state.require(&user, Action::TaskRead)?;
    list_with(&state, q, true).await
}

async fn create_task(State(state): State<AppState>, Caller(user): Caller, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    state.require(&user, Action::TaskCreate)?;
    let input: NewTask = json_body(&headers, &body)?;
    let m = blocking(&state, move |svc| svc.create_task(&user.id, input)).await?;
    Ok(task_response(StatusCode::CREATED, m.value))
}

async fn get_task(State(state): State<AppState>, Caller(user): Caller, IdPath(id): IdPath) -> ApiResult<Response> {
    state.require(&user, Action::TaskRead)?;
    let task = blocking(&state, move |svc| svc.get_task(&id)).await?;
    Ok(task_response(StatusCode::OK, task))
}

async fn update_task(
    State(state): State<AppState>,
    Caller(user): Caller,
    IdPath(id): IdPath,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    state.require(&user, Action::TaskEdit)?;
    let expected = if_match(&headers)?.ok_or_else(|| ApiError::validation(Some("If-Match"), "If-Match header is required"))?;
    let patch: TaskPatch = json_body(&headers, &body)?;
    let m = blocking(&state, move |svc| svc.update_task(&user.id, &id, Some(expected), &patch)).await?;
    Ok(task_response(StatusCode::OK, m.value))
}

async fn trash_task(State(state): State<AppState>, Caller(user): Caller, IdPath(id): IdPath, headers: HeaderMap) -> ApiResult<Response> {
    state.require(&user, Action::TaskTrash)?;
    let expected = if_match(&headers)?;
    let m = blocking(&state, move |svc| svc.trash_task(&user.id, &id, expected)).await?;
    Ok(task_response(StatusCode::OK, m.value))
}

async fn restore_task(State(state): State<AppState>, Caller(user): Caller, IdPath(id): IdPath, headers: HeaderMap) -> ApiResult<Response> {
    state.require(&user, Action::TaskRestore)?;
    let expected = if_match(&headers)?;
    let m = blocking(&state, move |svc| svc.restore_task(&user.id, &id, expected)).await?;
    Ok(task_response(StatusCode::OK, m.value))
}

async fn purge_task(State(state): State<AppState>, Caller(user): Caller, IdPath(id): IdPath) -> ApiResult<StatusCode> {
    state.require(&user, Action::TrashPurge)?;
    blocking(&state, move |svc| svc.purge_task(&user.id, &id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn task_activity(State(state): State<AppState>, Caller(user): Caller, IdPath(id): IdPath) -> ApiResult<Response> {
    state.require(&user, Action::TaskRead)?;
    let task = blocking(&state, move |svc| svc.get_task(&id)).await?;
    Ok((etag(task.revision), Json(task.activity)).into_response())
}

#[derive(Debug, Serialize)]
struct UploadResponse {
    #[serde(flatten)]
    asset: AssetRef,
    download_path: String,
    task_revision: u64,
}

/// Keeps a client-supplied media type only if it looks like `type/subtype`.
fn media_type(raw: Option<&str>) -> String {
    let ok = raw.filter(|m| {
        let m = m.trim();
        m.len() <= 255
            && m.split_once('/').is_some_and(|(a, b)| !a.is_empty() && !b.is_empty())
            && m.bytes().all(|c| c.is_ascii_graphic() || c == b' ')
    });
    ok.map(|m| m.trim().to_ascii_lowercase()).unwrap_or_else(|| "application/octet-stream".into())
}

async fn upload_asset(
    State(state): State<AppState>,
    Caller(user): Caller,
    IdPath(id): IdPath,
    headers: HeaderMap,
    multipart: Result<Multipart, MultipartRejection>,
) -> ApiResult<Response> {
    state.require(&user, Action::AssetUpload)?;
    let expected = if_match(&headers)?;
    let mut multipart = multipart.map_err(|e| ApiError::unsupported_media_type(e.body_text()))?;
    let limit = state.0.service.store().blob_limit();
    let too_large = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::payload_too_large(format!("upload exceeds the {limit} byte limit"))
        } else {
            ApiError::validation(Some("file"), e.body_text())
        }
    };
    let mut file = None;
    while let Some(field) = multipart.next_field().await.map_err(too_large)? {
        if field.name() != Some("file") {
            continue;
        }
        let filename = field.file_name().unwrap_or("upload").to_string();
        let mt = media_type(field.content_type());
        let bytes = field.bytes().await.map_err(too_large)?;
        file = Some((filename, mt, bytes));
        break;
    }
    let (filename, mt, bytes) =
        file.ok_or_else(|| ApiError::unsupported_media_type("multipart body has no \"file\" part"))?;
    let (m, asset) =
        blocking(&state, move |svc| svc.add_asset(&user.id, &id, expected, &filename, &mt, &bytes)).await?;
    let resp = UploadResponse {
        download_path: format!("/api/assets/{}", asset.id),
        task_revision: m.value.revision,
        asset,
    };
    Ok((StatusCode::CREATED, etag(m.value.revision), Json(resp)).into_response())
}

async fn download_asset(State(state): State<AppState>, Caller(user): Caller, IdPath(id): IdPath) -> ApiResult<Response> {
    state.require(&user, Action::TaskRead)?;
    let (asset, bytes) = blocking(&state, move |svc| svc.asset(&id)).await?;
    let disposition = format!("attachment; filename=\"{}\"", asset.filename.replace(['"', '\\'], "_"));
    let headers = [
        (header::CONTENT_TYPE, HeaderValue::from_str(&asset.media_type).unwrap_or(HeaderValue::from_static("application/octet-stream"))),
        (header::CONTENT_DISPOSITION, HeaderValue::from_str(&disposition).unwrap_or(HeaderValue::from_static("attachment"))),
        (header::ETAG, HeaderValue::from_str(&format!("\"{}\"", asset.content_hash)).expect("hex is a valid header")),
        (header::X_CONTENT_TYPE_OPTIONS, HeaderValue::from_static("nosniff")),
    ];
    Ok((headers, Body::from(bytes)).into_response())
}

async fn dashboard_summary(State(state): State<AppState>, Caller(user): Caller) -> ApiResult<Response> {
    state.require(&user, Action::DashboardRead)?;
    Ok(Json(blocking(&state, |svc| svc.dashboard_summary()).await?).into_response())
}

async fn dashboard_workload(State(state): State<AppState>, Caller(user): Caller) -> ApiResult<Response> {
    state.require(&user, Action::DashboardRead)?;
    Ok(Json(blocking(&state, |svc| svc.dashboard_workload()).await?).into_response())
}

async fn dashboard_priority(State(state): State<AppState>, Caller(user): Caller) -> ApiResult<Response> {
    state.require(&user, Action::DashboardRead)?;
    Ok(Json(blocking(&state, |svc| svc.dashboard_priority()).await?).into_response())
}

#[derive(Debug, Deserialize)]
struct ActivityQuery {
    n: Option<usize>,
}

async fn dashboard_activity(
    State(state): State<AppState>,
    Caller(user): Caller,
    ApiQuery(q): ApiQuery<ActivityQuery>,
) -> ApiResult<Response> {
    state.require(&user, Action::DashboardRead)?;
    let n = q.n.unwrap_or(DEFAULT_ACTIVITY_COUNT);
    Ok(Json(blocking(&state, move |svc| svc.dashboard_activity(n)).await?).into_response())
}

async fn list_team(State(state): State<AppState>, Caller(user): Caller) -> ApiResult<Json<Vec<AccountView>>> {
    state.require(&user, Action::UserList)?;
    let users = blocking(&state, |svc| svc.users()).await?;
    Ok(Json(users.iter().map(UserAccount::view).collect()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewAccount {
    name: String,
    email: String,
    password: String,
    #[serde(default = "default_role")]
    role: Role,
}

fn default_role() -> Role {
    Role::User
}

async fn create_member(State(state): State<AppState>, Caller(user): Caller, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    state.require(&user, Action::UserCreate)?;
    let req: NewAccount = json_body(&headers, &body)?;
    let m = blocking(&state, move |svc| svc.create_user(&user.id, &req.name, &req.email, &req.password, req.role)).await?;
    Ok((StatusCode::CREATED, etag(m.value.revision), Json(m.value.view())).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AccountPatch {
    role: Option<Role>,
    active: Option<bool>,
}

async fn update_member(
    State(state): State<AppState>,
    Caller(user): Caller,
    IdPath(id): IdPath,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let may_role = state.require(&user, Action::UserEditRole);
    let may_active = state.require(&user, Action::UserDeactivate);
    if may_role.is_err() && may_active.is_err() {
        return Err(ApiError::forbidden());
    }
    let expected = if_match(&headers)?;
    let req: AccountPatch = json_body(&headers, &body)?;
    if req.role.is_some() {
        may_role?;
    }
    if req.active.is_some() {
        may_active?;
    }
    let m = blocking(&state, move |svc| svc.update_user(&user.id, &id, expected, req.role, req.active)).await?;
    Ok((etag(m.value.revision), Json(m.value.view())).into_response())
}

async fn export_archive(State(state): State<AppState>, Caller(user): Caller) -> ApiResult<Response> {
    state.require(&user, Action::ExportImport)?;
    let bytes = blocking(&state, |svc| Ok(svc.store().export_snapshot_to(Vec::new())?)).await?;
    let headers = [
        (header::CONTENT_TYPE, HeaderValue::from_static("application/gzip")),
        (header::CONTENT_DISPOSITION, HeaderValue::from_static("attachment; filename=\"wms-snapshot.tar.gz\"")),
    ];
    Ok((headers, Body::from(bytes)).into_response())
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "last_event_seq": state.0.service.store().events().last_seq() }))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    after_seq: Option<u64>,
    #[allow(dead_code)]
    access_token: Option<String>,
}

/// Event as sent to clients: account snapshots lose their password hash.
pub fn redact(e: &MutationEvent) -> MutationEvent {
    let mut e = e.clone();
    if e.entity_kind == EntityKind::User {
        if let Some(Value::Object(m)) = e.snapshot.as_mut() {
            m.remove("password_hash");
        }
    }
    e
}

fn sse_event(e: &MutationEvent) -> Event {
    Event::default()
        .event("mutation")
        .id(e.seq.to_string())
        .json_data(redact(e))
        .expect("events serialize")
}

async fn events(
    State(state): State<AppState>,
    Caller(user): Caller,
    ApiQuery(q): ApiQuery<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, std::convert::Infallible>>>> {
    state.require(&user, Action::TaskRead)?;
    let last_event_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let after = q.after_seq.unwrap_or(0).max(last_event_id.unwrap_or(0));
    // Subscribe before reading the backlog so nothing falls between them.
    let mut live = state.0.service.store().events().subscribe();
    let mut shutdown = state.0.shutdown.subscribe();
    let svc = state.0.service.clone();
    let stream = async_stream::stream! {
        let mut last = after;
        let log = svc.store().events();
        loop {
            let chunk = match log.read_since(last, BACKLOG_CHUNK) {
                Ok(c) => c,
                Err(e) => {
                    tracing::error!(error = %e, "event backlog read failed");
                    return;
                }
            };
            if chunk.is_empty() {
                break;
            }
            for e in &chunk {
                last = e.seq;
                yield Ok(sse_event(e));
            }
        }
        loop {
            if *shutdown.borrow() {
                return;
            }
            let next = tokio::select! {
                r = live.recv() => r,
                _ = shutdown.changed() => return,
            };
            match next {
                Ok(e) if e.seq <= last => {}
                Ok(e) if e.seq == last + 1 => {
                    last = e.seq;
                    yield Ok(sse_event(&e));
                }
                Ok(_) => {
                    // Missed events: fill from the file.
                    match log.read_since(last, BACKLOG_CHUNK) {
                        Ok(chunk) => for e in &chunk {
                            last = e.seq;
                            yield Ok(sse_event(e));
                        },
                        Err(_) => return,
                    }
                }
                // A lagging subscriber is cut off; the client resumes by seq.
                Err(broadcast::error::RecvError::Lagged(_)) | Err(broadcast::error::RecvError::Closed) => return,
            }
        }
    };
    Ok(Sse::new(stream).keep_alive(KeepAlive::new().interval(state.0.heartbeat)))
}

fn cors(origins: &[String]) -> CorsLayer {
    let origins: Vec<HeaderValue> = origins.iter().filter_map(|o| HeaderValue::from_str(o.trim()).ok()).collect();
    CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST, Method::PATCH, Method::DELETE, Method::OPTIONS])
        .allow_headers([
            header::AUTHORIZATION,
            header::CONTENT_TYPE,
            header::IF_MATCH,
            HeaderName::from_static("last-event-id"),
        ])
        .expose_headers([header::ETAG])
}

pub fn router(state: AppState, config: &ApiConfig) -> Router {
    let upload_limit = usize::try_from(state.0.service.store().blob_limit())
        .unwrap_or(usize::MAX)
        .saturating_add(MULTIPART_OVERHEAD);
    Router::new()
        .route("/api/auth/login", post(login))
        .route("/api/me", get(me))
        .route("/api/tasks", get(list_tasks).post(create_task))
        .route("/api/tasks/{id}", get(get_task).patch(update_task).delete(trash_task))
        .route("/api/tasks/{id}/activity", get(task_activity))
        .route("/api/tasks/{id}/assets", post(upload_asset).layer(DefaultBodyLimit::max(upload_limit)))
        .route("/api/assets/{id}", get(download_asset))
        .route("/api/trash", get(list_trash))
        .route("/api/trash/{id}/restore", post(restore_task))
        .route("/api/trash/{id}", axum::routing::delete(purge_task))
        .route("/api/dashboard/summary", get(dashboard_summary))
        .route("/api/dashboard/workload", get(dashboard_workload))
        .route("/api/dashboard/priority", get(dashboard_priority))
        .route("/api/dashboard/activity", get(dashboard_activity))
        .route("/api/team", get(list_team).post(create_member))
        .route("/api/team/{id}", patch(update_member))
        .route("/api/admin/export", get(export_archive))
        .route("/api/events", get(events))
        .route("/api/health", get(health))
        .fallback(|| async { ApiError::not_found("route") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed on this route")
        })
        .layer(cors(&config.allowed_origins))
        .with_state(state)
}

/// Error codes by status, as documented above.
pub fn error_codes() -> BTreeMap<&'static str, u16> {
    BTreeMap::from([
        ("unauthorized", 401),
        ("forbidden", 403),
        ("not_found", 404),
        ("method_not_allowed", 405),
        ("stale_revision", 409),
        ("invalid_state", 409),
        ("payload_too_large", 413),
        ("unsupported_media_type", 415),
        ("validation", 422),
        ("internal", 500),
    ])
}
