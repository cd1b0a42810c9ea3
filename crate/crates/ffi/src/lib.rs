//! C ABI over the workflow store.
//!
//! Conventions:
//! - every fallible call returns a [`WmsStatus`]; on failure a message is
//!   available from [`wms_last_error`] on the same thread;
//! - structured data crosses the boundary as UTF-8 JSON;
//! - strings handed out through `out` pointers are owned by the caller and
//!   must be released with [`wms_string_free`];
//! - ids and actors are ULID strings, a null actor means the system actor;
//! - `expected_revision == 0` means "no precondition".
//!
//! A [`WmsStore`] handle may be shared between threads.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use wms_core::api::redact;
use wms_core::auth::{self, Action, Decision, TokenClaims, TokenKey};
use wms_core::clock::SystemClock;
use wms_core::domain::{DomainError, NewTask, Priority, Role, TaskPatch, TaskStatus};
use wms_core::id::{Entropy, Id};
use wms_core::service::{Service, ServiceConfig, ServiceError};
use wms_core::store::{Page, Store, StoreError, TaskFilter};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WmsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    NotFound = 4,
    StaleRevision = 5,
    AlreadyExists = 6,
    Validation = 7,
    InvalidState = 8,
    TooLarge = 9,
    Io = 10,
    Corrupt = 11,
    Auth = 12,
    Internal = 13,
}

/// Opaque store handle.
pub struct WmsStore {
    service: Service,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(WmsStatus, String);

type FfiResult<T> = Result<T, Failure>;

fn fail(status: WmsStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_last_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).expect("nul bytes removed"));
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, records its error message and converts panics to `Internal`.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> WmsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(None);
            WmsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(Some(msg));
            status
        }
        Err(_) => {
            set_last_error(Some("internal panic".into()));
            WmsStatus::Internal
        }
    }
}

fn store_status(e: &StoreError) -> WmsStatus {
    match e {
        StoreError::NotFound | StoreError::BlobNotFound => WmsStatus::NotFound,
        StoreError::StaleRevision { .. } => WmsStatus::StaleRevision,
        StoreError::AlreadyExists | StoreError::NotEmpty => WmsStatus::AlreadyExists,
        StoreError::BlobTooLarge { .. } => WmsStatus::TooLarge,
        StoreError::BadPage | StoreError::EmptyBlob | StoreError::BadRevision { .. } => WmsStatus::Validation,
        StoreError::CorruptManifest(_)
        | StoreError::SeqMismatch { .. }
        | StoreError::CorruptDocument { .. }
        | StoreError::HashMismatch { .. }
        | StoreError::BadArchive(_)
        | StoreError::CorruptLog(_) => WmsStatus::Corrupt,
        StoreError::Io(_) | StoreError::Log(_) => WmsStatus::Io,
        #[allow(unreachable_patterns)]
        _ => WmsStatus::Internal,
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::Domain(DomainError::TaskTrashed | DomainError::AlreadyTrashed | DomainError::NotTrashed) => {
                WmsStatus::InvalidState
            }
            ServiceError::Domain(DomainError::AssetTooLarge { .. }) | ServiceError::PayloadTooLarge { .. } => {
                WmsStatus::TooLarge
            }
            ServiceError::Domain(_) | ServiceError::Validation { .. } => WmsStatus::Validation,
            ServiceError::NotFound(_) => WmsStatus::NotFound,
            ServiceError::Stale { .. } => WmsStatus::StaleRevision,
            ServiceError::InvalidState(_) => WmsStatus::InvalidState,
            ServiceError::Unauthorized => WmsStatus::Auth,
            ServiceError::Auth(auth::AuthError::Hashing(_)) => WmsStatus::Internal,
            ServiceError::Auth(_) => WmsStatus::Validation,
            ServiceError::Store(s) => store_status(s),
        };
        Failure(status, e.to_string())
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure(store_status(&e), e.to_string())
    }
}

unsafe fn arg_str<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(fail(WmsStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(WmsStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn arg_opt_str<'a>(p: *const c_char, name: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        arg_str(p, name).map(Some)
    }
}

unsafe fn arg_id(p: *const c_char, name: &str) -> FfiResult<Id> {
    let s = arg_str(p, name)?;
    Id::parse(s).ok_or_else(|| fail(WmsStatus::NotFound, format!("{name} `{s}` is not a valid id")))
}

unsafe fn arg_actor(p: *const c_char) -> FfiResult<Id> {
    if p.is_null() {
        Ok(Id::system())
    } else {
        let s = arg_str(p, "actor")?;
        Id::parse(s).ok_or_else(|| fail(WmsStatus::Validation, format!("actor `{s}` is not a valid id")))
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(s: &str, what: &str) -> FfiResult<T> {
    serde_json::from_str(s).map_err(|e| fail(WmsStatus::InvalidJson, format!("{what}: {e}")))
}

unsafe fn handle<'a>(h: *const WmsStore) -> FfiResult<&'a WmsStore> {
    h.as_ref().ok_or_else(|| fail(WmsStatus::NullArgument, "store handle is null"))
}

unsafe fn put_json<T: Serialize>(out: *mut *mut c_char, value: &T) -> FfiResult<()> {
    if out.is_null() {
        return Err(fail(WmsStatus::NullArgument, "out is null"));
    }
    let s = serde_json::to_string(value).map_err(|e| fail(WmsStatus::Internal, e.to_string()))?;
    *out = CString::new(s).map_err(|e| fail(WmsStatus::Internal, e.to_string()))?.into_raw();
    Ok(())
}

fn expected(rev: u64) -> Option<u64> {
    (rev != 0).then_some(rev)
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn wms_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn wms_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub unsafe extern "C" fn wms_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opens (creating if needed) the store under `data_dir`.
#[no_mangle]
pub unsafe extern "C" fn wms_store_open(data_dir: *const c_char, out: *mut *mut WmsStore) -> WmsStatus {
    guard(|| {
        let dir = PathBuf::from(arg_str(data_dir, "data_dir")?);
        if out.is_null() {
            return Err(fail(WmsStatus::NullArgument, "out is null"));
        }
        let store = Arc::new(Store::open(&dir)?);
        let service = Service::new(store, Arc::new(SystemClock), Arc::new(Entropy::from_os()), ServiceConfig::default());
        *out = Box::into_raw(Box::new(WmsStore { service }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn wms_store_close(h: *mut WmsStore) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

#[no_mangle]
pub unsafe extern "C" fn wms_store_last_seq(h: *const WmsStore, out: *mut u64) -> WmsStatus {
    guard(|| {
        let h = handle(h)?;
        let out = out.as_mut().ok_or_else(|| fail(WmsStatus::NullArgument, "out is null"))?;
        *out = h.service.store().events().last_seq();
        Ok(())
    })
}

/// Creates an account; the first one must be an admin. Writes the account
/// without its password hash.
#[no_mangle]
pub unsafe extern "C" fn wms_user_create(
    h: *const WmsStore,
    actor: *const c_char,
    name: *const c_char,
    email: *const c_char,
    password: *const c_char,
    role: *const c_char,
    out_json: *mut *mut c_char,
) -> WmsStatus {
    guard(|| {
        let h = handle(h)?;
        let role: Role = arg_str(role, "role")?.parse().map_err(|e: wms_core::domain::ParseEnumError| fail(WmsStatus::Validation, e.to_string()))?;
        let m = h.service.create_user(
            &arg_actor(actor)?,
            arg_str(name, "name")?,
            arg_str(email, "email")?,
            arg_str(password, "password")?,
            role,
        )?;
        put_json(out_json, &m.value.view())
    })
}

/// `input_json` follows the task creation body: `title`, optional
/// `description`, `priority`, `assignee_ids`, `due_date`.
#[no_mangle]
pub unsafe extern "C" fn wms_task_create(
    h: *const WmsStore,
    actor: *const c_char,
    input_json: *const c_char,
    out_json: *mut *mut c_char,
) -> WmsStatus {
    guard(|| {
        let h = handle(h)?;
        let input: NewTask = parse_json(arg_str(input_json, "input_json")?, "task input")?;
        let m = h.service.create_task(&arg_actor(actor)?, input)?;
        put_json(out_json, &m.value)
    })
}

#[no_mangle]
pub unsafe extern "C" fn wms_task_get(h: *const WmsStore, id: *const c_char, out_json: *mut *mut c_char) -> WmsStatus {
    guard(|| {
        let h = handle(h)?;
        put_json(out_json, &h.service.get_task(&arg_id(id, "id")?)?)
    })
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FilterInput {
    status: Option<TaskStatus>,
    priority: Option<Priority>,
    assignee: Option<Id>,
    trashed: Option<bool>,
}

/// Lists tasks. `filter_json` may be null or an object with any of
/// `status`, `priority`, `assignee`, `trashed`. Writes
/// `{"items":[...],"total_count":n}`.
#[no_mangle]
pub unsafe extern "C" fn wms_task_list(
    h: *const WmsStore,
    filter_json: *const c_char,
    offset: u64,
    limit: u64,
    out_json: *mut *mut c_char,
) -> WmsStatus {
    guard(|| {
        let h = handle(h)?;
        let f: FilterInput = match arg_opt_str(filter_json, "filter_json")? {
            Some(s) => parse_json(s, "filter")?,
            None => FilterInput::default(),
        };
        let filter = TaskFilter { status: f.status, priority: f.priority, assignee: f.assignee, trashed: f.trashed };
        let page = Page::new(offset as usize, limit as usize)?;
        put_json(out_json, &h.service.list_tasks(&filter, page)?)
    })
}

/// Applies a partial update (`title`, `description`, `status`, `priority`,
/// `assignee_ids`, `due_date`).
#[no_mangle]
pub unsafe extern "C" fn wms_task_update(
    h: *const WmsStore,
    actor: *const c_char,
    id: *const c_char,
    expected_revision: u64,
    patch_json: *const c_char,
    out_json: *mut *mut c_char,
) -> WmsStatus {
    guard(|| {
        let h = handle(h)?;
        let patch: TaskPatch = parse_json(arg_str(patch_json, "patch_json")?, "task patch")?;
        let m = h.service.update_task(&arg_actor(actor)?, &arg_id(id, "id")?, expected(expected_revision), &patch)?;
        put_json(out_json, &m.value)
    })
}

/// Moves a task to `status` (`todo`, `in_progress` or `done`).
#[no_mangle]
pub unsafe extern "C" fn wms_task_transition(
    h: *const WmsStore,
    actor: *const c_char,
    id: *const c_char,
    expected_revision: u64,
    status: *const c_char,
    out_json: *mut *mut c_char,
) -> WmsStatus {
    guard(|| {
        let h = handle(h)?;
        let status: TaskStatus =
            arg_str(status, "status")?.parse().map_err(|e: wms_core::domain::ParseEnumError| fail(WmsStatus::Validation, e.to_string()))?;
        let patch = TaskPatch { status: Some(status), ..TaskPatch::default() };
        let m = h.service.update_task(&arg_actor(actor)?, &arg_id(id, "id")?, expected(expected_revision), &patch)?;
        put_json(out_json, &m.value)
    })
}

#[no_mangle]
pub unsafe extern "C" fn wms_task_trash(
    h: *const WmsStore,
    actor: *const c_char,
    id: *const c_char,
    expected_revision: u64,
    out_json: *mut *mut c_char,
) -> WmsStatus {
    guard(|| {
        let h = handle(h)?;
        let m = h.service.trash_task(&arg_actor(actor)?, &arg_id(id, "id")?, expected(expected_revision))?;
        put_json(out_json, &m.value)
    })
}

#[no_mangle]
pub unsafe extern "C" fn wms_task_restore(
    h: *const WmsStore,
    actor: *const c_char,
    id: *const c_char,
    expected_revision: u64,
    out_json: *mut *mut c_char,
) -> WmsStatus {
    guard(|| {
        let h = handle(h)?;
        let m = h.service.restore_task(&arg_actor(actor)?, &arg_id(id, "id")?, expected(expected_revision))?;
        put_json(out_json, &m.value)
    })
}

#[no_mangle]
pub unsafe extern "C" fn wms_dashboard_summary(h: *const WmsStore, out_json: *mut *mut c_char) -> WmsStatus {
    guard(|| {
        let h = handle(h)?;
        put_json(out_json, &h.service.dashboard_summary()?)
    })
}

/// Writes a JSON array of at most `limit` events with `seq > after_seq`.
/// Account snapshots are redacted.
#[no_mangle]
pub unsafe extern "C" fn wms_events_since(
    h: *const WmsStore,
    after_seq: u64,
    limit: u64,
    out_json: *mut *mut c_char,
) -> WmsStatus {
    guard(|| {
        let h = handle(h)?;
        let events = h
            .service
            .store()
            .events()
            .read_since(after_seq, limit as usize)
            .map_err(|e| fail(WmsStatus::Io, e.to_string()))?;
        put_json(out_json, &events.iter().map(redact).collect::<Vec<_>>())
    })
}

unsafe fn arg_key(key: *const u8, key_len: usize) -> FfiResult<TokenKey> {
    if key.is_null() {
        return Err(fail(WmsStatus::NullArgument, "key is null"));
    }
    TokenKey::new(std::slice::from_raw_parts(key, key_len).to_vec()).map_err(|e| fail(WmsStatus::Validation, e.to_string()))
}

/// Signs `claims_json` (`sub`, `role`, `iat`, `exp`, `jti`) as an HS256
/// token. The key must be at least 32 bytes.
#[no_mangle]
pub unsafe extern "C" fn wms_token_issue(
    key: *const u8,
    key_len: usize,
    claims_json: *const c_char,
    out_token: *mut *mut c_char,
) -> WmsStatus {
    guard(|| {
        let key = arg_key(key, key_len)?;
        let claims: TokenClaims = parse_json(arg_str(claims_json, "claims_json")?, "claims")?;
        let token = auth::issue_token(&claims, &key).map_err(|e| fail(WmsStatus::Validation, e.to_string()))?;
        if out_token.is_null() {
            return Err(fail(WmsStatus::NullArgument, "out_token is null"));
        }
        *out_token = CString::new(token).expect("tokens are ASCII").into_raw();
        Ok(())
    })
}

/// Verifies `token` at `now_secs` and writes its claims. Any defect gives
/// `WMS_STATUS_AUTH`.
#[no_mangle]
pub unsafe extern "C" fn wms_token_verify(
    key: *const u8,
    key_len: usize,
    token: *const c_char,
    now_secs: i64,
    out_claims_json: *mut *mut c_char,
) -> WmsStatus {
    guard(|| {
        let key = arg_key(key, key_len)?;
        let claims = auth::verify_token(arg_str(token, "token")?, &key, now_secs)
            .map_err(|e| fail(WmsStatus::Auth, e.to_string()))?;
        put_json(out_claims_json, &claims)
    })
}

/// Looks up the policy matrix. `role` is `admin` or `user`; `action` is a
/// snake_case action name such as `task_edit`.
#[no_mangle]
pub unsafe extern "C" fn wms_authorize(role: *const c_char, action: *const c_char, out_allowed: *mut bool) -> WmsStatus {
    guard(|| {
        let role: Role =
            arg_str(role, "role")?.parse().map_err(|e: wms_core::domain::ParseEnumError| fail(WmsStatus::Validation, e.to_string()))?;
        let name = arg_str(action, "action")?;
        let action: Action = serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| fail(WmsStatus::Validation, format!("unknown action `{name}`")))?;
        let out = out_allowed.as_mut().ok_or_else(|| fail(WmsStatus::NullArgument, "out_allowed is null"))?;
        *out = auth::authorize(role, action) == Decision::Allow;
        Ok(())
    })
}
