//! Application operations: each one loads what it needs, applies a domain
//! rule, commits the result with its revision precondition and appends the
//! mutation event. Shared by the HTTP API, the CLI and the C bindings.
//!
//! Authorization is not checked here; callers decide who may call what.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::auth::{self, AuthError, HashParams, HashRecord, TokenClaims, TokenKey};
use crate::clock::Clock;
use crate::dashboard::{self, DashboardSummary, PriorityBreakdown, RecentActivity, WorkloadRow};
use crate::domain::{
    sanitize_filename, AccountView, AssetRef, DomainError, NewTask, Role, Task, TaskPatch, UserAccount,
};
use crate::events::MutationEvent;
use crate::id::{Entropy, Id};
use crate::store::{Listing, Page, Store, StoreError, TaskFilter};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("{0} not found")]
    NotFound(&'static str),
    #[error("stale revision, current is {current}")]
    Stale { current: u64 },
    #[error("{message}")]
    Validation { message: String, details: BTreeMap<String, String> },
    #[error("{0}")]
    InvalidState(String),
    #[error("invalid credentials")]
    Unauthorized,
    #[error("payload is {size} bytes, limit is {limit}")]
    PayloadTooLarge { size: u64, limit: u64 },
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Store(StoreError),
}

impl ServiceError {
    pub fn validation(field: &str, message: impl Into<String>) -> Self {
        let message = message.into();
        ServiceError::Validation {
            details: BTreeMap::from([(field.to_string(), message.clone())]),
            message,
        }
    }
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::StaleRevision { current } => ServiceError::Stale { current },
            StoreError::BlobTooLarge { size, limit } => ServiceError::PayloadTooLarge { size, limit },
            StoreError::BadPage => ServiceError::validation("limit", e.to_string()),
            other => ServiceError::Store(other),
        }
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

/// Outcome of a mutation: the resulting document and the event it produced,
/// if it changed anything.
#[derive(Debug, Clone)]
pub struct Mutation<T> {
    pub value: T,
    pub event: Option<MutationEvent>,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub hash_params: HashParams,
    pub token_ttl_secs: i64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { hash_params: HashParams::default(), token_ttl_secs: 8 * 3600 }
    }
}

pub struct Service {
    store: Arc<Store>,
    clock: Arc<dyn Clock>,
    entropy: Arc<Entropy>,
    config: ServiceConfig,
    /// Serializes account creation and role changes, which check invariants
    /// spanning several documents (unique email, at least one admin).
    accounts: Mutex<()>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").field("store", &self.store).finish()
    }
}

impl Service {
    pub fn new(store: Arc<Store>, clock: Arc<dyn Clock>, entropy: Arc<Entropy>, config: ServiceConfig) -> Self {
        Service { store, clock, entropy, config, accounts: Mutex::new(()) }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn clock(&self) -> &dyn Clock {
        &*self.clock
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn task(&self, id: &Id) -> Result<Task> {
        self.store.get(id).map_err(|e| match e {
            StoreError::NotFound => ServiceError::NotFound("task"),
            e => e.into(),
        })
    }

    pub fn get_task(&self, id: &Id) -> Result<Task> {
        self.task(id)
    }

    pub fn user(&self, id: &Id) -> Result<UserAccount> {
        self.store.get(id).map_err(|e| match e {
            StoreError::NotFound => ServiceError::NotFound("user"),
            e => e.into(),
        })
    }

    pub fn users(&self) -> Result<Vec<UserAccount>> {
        Ok(self.store.scan()?)
    }

    pub fn tasks(&self) -> Result<Vec<Task>> {
        Ok(self.store.scan()?)
    }

    pub fn list_tasks(&self, filter: &TaskFilter, page: Page) -> Result<Listing<Task>> {
        Ok(self.store.list_tasks(filter, page)?)
    }

    fn check_assignees<'a>(&self, ids: impl IntoIterator<Item = &'a Id>) -> Result<()> {
        let mut bad = Vec::new();
        for id in ids {
            match self.store.get::<UserAccount>(id) {
                Ok(u) if u.active => {}
                Ok(_) | Err(StoreError::NotFound) => bad.push(id.to_string()),
                Err(e) => return Err(e.into()),
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ServiceError::validation(
                "assignee_ids",
                format!("unknown or inactive accounts: {}", bad.join(",")),
            ))
        }
    }

    pub fn create_task(&self, actor: &Id, input: NewTask) -> Result<Mutation<Task>> {
        self.check_assignees(&input.assignee_ids)?;
        let now = self.clock.now();
        let task = Task::create(self.entropy.next_id(now), input, actor, now)?;
        let event = self.store.commit(&task, None, actor, now)?;
        Ok(Mutation { value: task, event: Some(event) })
    }

    /// Loads the task, checks the caller's revision precondition (if any),
    /// applies `f` and commits. A no-op result is returned without a write.
    fn mutate_task(
        &self,
        id: &Id,
        expected: Option<u64>,
        actor: &Id,
        f: impl FnOnce(&Task, crate::clock::Timestamp) -> Result<Task>,
    ) -> Result<Mutation<Task>> {
        let current = self.task(id)?;
        let expected = expected.unwrap_or(current.revision);
        if current.revision != expected {
            return Err(ServiceError::Stale { current: current.revision });
        }
        let now = self.clock.now();
        let next = f(&current, now)?;
        if next == current {
            return Ok(Mutation { value: current, event: None });
        }
        let event = self.store.commit(&next, Some(expected), actor, now)?;
        Ok(Mutation { value: next, event: Some(event) })
    }

    pub fn update_task(&self, actor: &Id, id: &Id, expected: Option<u64>, patch: &TaskPatch) -> Result<Mutation<Task>> {
        self.mutate_task(id, expected, actor, |cur, now| {
            if let Some(ids) = &patch.assignee_ids {
                if !cur.trashed {
                    self.check_assignees(ids.difference(&cur.assignee_ids))?;
                }
            }
            Ok(cur.apply_patch(patch, actor, now)?)
        })
    }

    pub fn trash_task(&self, actor: &Id, id: &Id, expected: Option<u64>) -> Result<Mutation<Task>> {
        self.mutate_task(id, expected, actor, |cur, now| Ok(cur.soft_delete(actor, now)?))
    }

    pub fn restore_task(&self, actor: &Id, id: &Id, expected: Option<u64>) -> Result<Mutation<Task>> {
        self.mutate_task(id, expected, actor, |cur, now| Ok(cur.restore(actor, now)?))
    }

    /// Permanently removes a trashed task. Its blobs stay: they are content
    /// addressed and may be shared with other tasks.
    pub fn purge_task(&self, actor: &Id, id: &Id) -> Result<MutationEvent> {
        let task = self.task(id)?;
        if !task.trashed {
            return Err(DomainError::NotTrashed.into());
        }
        Ok(self.store.purge::<Task>(id, actor, self.clock.now())?)
    }

    pub fn add_asset(
        &self,
        actor: &Id,
        task_id: &Id,
        expected: Option<u64>,
        filename: &str,
        media_type: &str,
        bytes: &[u8],
    ) -> Result<(Mutation<Task>, AssetRef)> {
        let limit = self.store.blob_limit();
        if bytes.len() as u64 > limit {
            return Err(ServiceError::PayloadTooLarge { size: bytes.len() as u64, limit });
        }
        if bytes.is_empty() {
            return Err(DomainError::EmptyAsset.into());
        }
        let current = self.task(task_id)?;
        if current.trashed {
            return Err(DomainError::TaskTrashed.into());
        }
        let blob = self.store.put_blob(bytes)?;
        let mut asset = None;
        let m = self.mutate_task(task_id, expected, actor, |cur, now| {
            let a = AssetRef {
                id: self.entropy.next_id(now),
                content_hash: blob.content_hash.clone(),
                filename: sanitize_filename(filename),
                media_type: media_type.to_string(),
                size_bytes: bytes.len() as u64,
                uploaded_at: now,
                uploaded_by: actor.clone(),
            };
            let next = cur.attach_asset(a.clone(), limit, actor, now)?;
            asset = Some(a);
            Ok(next)
        })?;
        Ok((m, asset.expect("asset set on success")))
    }

    /// Finds an asset by id across all tasks and returns it with its bytes.
    pub fn asset(&self, asset_id: &Id) -> Result<(AssetRef, Vec<u8>)> {
        let asset = self
            .tasks()?
            .into_iter()
            .flat_map(|t| t.asset_refs)
            .find(|a| &a.id == asset_id)
            .ok_or(ServiceError::NotFound("asset"))?;
        let bytes = self.store.get_blob(&asset.content_hash).map_err(|e| match e {
            StoreError::BlobNotFound => ServiceError::NotFound("asset"),
            e => e.into(),
        })?;
        Ok((asset, bytes))
    }

    pub fn find_user_by_email(&self, email: &str) -> Result<Option<UserAccount>> {
        let email = email.trim().to_lowercase();
        Ok(self.users()?.into_iter().find(|u| u.email == email))
    }

    /// Creates an account. The very first account must be an admin.
    pub fn create_user(&self, actor: &Id, name: &str, email: &str, password: &str, role: Role) -> Result<Mutation<UserAccount>> {
        let _g = self.accounts.lock();
        let users = self.users()?;
        if users.is_empty() && role != Role::Admin {
            return Err(ServiceError::InvalidState("the first account must have the admin role".into()));
        }
        let email_norm = crate::domain::normalize_email(email)?;
        if users.iter().any(|u| u.email == email_norm) {
            return Err(ServiceError::validation("email", "email is already in use"));
        }
        let now = self.clock.now();
        let hash: HashRecord = auth::hash_password_with(password, self.config.hash_params, &self.entropy)?;
        let user = UserAccount::create(self.entropy.next_id(now), name, &email_norm, role, hash, now)?;
        let event = self.store.commit(&user, None, actor, now)?;
        Ok(Mutation { value: user, event: Some(event) })
    }

    /// Changes role and/or active flag. Refuses to leave the system without
    /// an active admin.
    pub fn update_user(
        &self,
        actor: &Id,
        id: &Id,
        expected: Option<u64>,
        role: Option<Role>,
        active: Option<bool>,
    ) -> Result<Mutation<UserAccount>> {
        let _g = self.accounts.lock();
        let current = self.user(id)?;
        let expected = expected.unwrap_or(current.revision);
        if current.revision != expected {
            return Err(ServiceError::Stale { current: current.revision });
        }
        let now = self.clock.now();
        let next = current.update(role, active, now);
        if next == current {
            return Ok(Mutation { value: current, event: None });
        }
        let loses_admin = current.role == Role::Admin && current.active && !(next.role == Role::Admin && next.active);
        if loses_admin {
            let admins = self.users()?.iter().filter(|u| u.role == Role::Admin && u.active).count();
            if admins <= 1 {
                return Err(ServiceError::InvalidState("cannot remove the last active admin".into()));
            }
        }
        let event = self.store.commit(&next, Some(expected), actor, now)?;
        Ok(Mutation { value: next, event: Some(event) })
    }

    /// Checks credentials and issues a token carrying the account's current
    /// role. Unknown email, wrong password and deactivated account all fail
    /// the same way.
    pub fn login(&self, email: &str, password: &str, key: &TokenKey) -> Result<(String, AccountView)> {
        let user = self.find_user_by_email(email)?;
        let Some(user) = user else {
            // Burn comparable time so response latency does not reveal
            // whether the email exists.
            let _ = auth::hash_password_with("timing-equalizer", self.config.hash_params, &self.entropy);
            return Err(ServiceError::Unauthorized);
        };
        if !auth::verify_password(password, &user.password_hash) || !user.active {
            return Err(ServiceError::Unauthorized);
        }
        let now = self.clock.now();
        let mut jti = [0u8; 16];
        self.entropy.fill(&mut jti);
        let claims = TokenClaims {
            sub: user.id.clone(),
            role: user.role,
            iat: now.seconds(),
            exp: now.seconds() + self.config.token_ttl_secs,
            jti: jti.iter().map(|b| format!("{b:02x}")).collect(),
        };
        Ok((auth::issue_token(&claims, key)?, user.view()))
    }

    /// Resolves a bearer token to a live, active account.
    pub fn authenticate(&self, token: &str, key: &TokenKey) -> Result<UserAccount> {
        let claims = auth::verify_token(token, key, self.clock.now().seconds()).map_err(|_| ServiceError::Unauthorized)?;
        match self.store.get::<UserAccount>(&claims.sub) {
            Ok(u) if u.active => Ok(u),
            Ok(_) | Err(StoreError::NotFound) => Err(ServiceError::Unauthorized),
            Err(e) => Err(e.into()),
        }
    }

    pub fn dashboard_summary(&self) -> Result<DashboardSummary> {
        Ok(dashboard::summary(&self.tasks()?))
    }

    pub fn dashboard_workload(&self) -> Result<Vec<WorkloadRow>> {
        Ok(dashboard::workload_by_assignee(&self.tasks()?, &self.users()?))
    }

    pub fn dashboard_priority(&self) -> Result<PriorityBreakdown> {
        Ok(dashboard::priority_breakdown(&self.tasks()?))
    }

    pub fn dashboard_activity(&self, n: usize) -> Result<Vec<RecentActivity>> {
        dashboard::recent_activity(&self.tasks()?, n).map_err(|e| ServiceError::validation("n", e.to_string()))
    }
}

/// Distinct ids, for request payloads given as lists.
pub fn id_set(ids: impl IntoIterator<Item = Id>) -> BTreeSet<Id> {
    ids.into_iter().collect()
}
