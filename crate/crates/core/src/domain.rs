//! Business entities and the pure rules that govern them.
//!
//! Nothing in here performs I/O or reads a clock: every mutating operation
//! takes the actor and the current time as arguments and returns a new value.
//! An operation that would not change anything (moving a task to the status it
//! already has, re-assigning the same people, ...) returns the task untouched,
//! with the same revision and no new activity entry.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::auth::HashRecord;
use crate::clock::Timestamp;
use crate::id::Id;

pub const MAX_TITLE_LEN: usize = 200;
pub const MAX_DESCRIPTION_LEN: usize = 10_000;
pub const MAX_NAME_LEN: usize = 100;
pub const DEFAULT_ASSET_LIMIT: u64 = 10 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("title must not be empty")]
    EmptyTitle,
    #[error("title is {0} characters, limit is {MAX_TITLE_LEN}")]
    TitleTooLong(usize),
    #[error("description is {0} characters, limit is {MAX_DESCRIPTION_LEN}")]
    DescriptionTooLong(usize),
    #[error("task is in the trash")]
    TaskTrashed,
    #[error("task is already in the trash")]
    AlreadyTrashed,
    #[error("task is not in the trash")]
    NotTrashed,
    #[error("asset is {size} bytes, limit is {limit}")]
    AssetTooLarge { size: u64, limit: u64 },
    #[error("asset is empty")]
    EmptyAsset,
    #[error("name must not be empty")]
    EmptyName,
    #[error("name is longer than {MAX_NAME_LEN} characters")]
    NameTooLong,
    #[error("invalid email address")]
    InvalidEmail,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown {kind} `{value}`")]
pub struct ParseEnumError {
    kind: &'static str,
    value: String,
}

macro_rules! token_enum {
    ($(#[$m:meta])* $name:ident, $kind:literal { $($variant:ident => $tok:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $tok)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $tok),+ }
            }
        }

        impl FromStr for $name {
            type Err = ParseEnumError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($tok => Ok($name::$variant),)+
                    other => Err(ParseEnumError { kind: $kind, value: other.to_string() }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

token_enum!(
    /// Kanban column of a task.
    TaskStatus, "status" {
        Todo => "todo",
        InProgress => "in_progress",
        Done => "done",
    }
);

token_enum!(Priority, "priority" {
    High => "high",
    Medium => "medium",
    Low => "low",
});

token_enum!(Role, "role" {
    Admin => "admin",
    User => "user",
});

token_enum!(ActivityKind, "activity kind" {
    Created => "created",
    StatusChanged => "status_changed",
    PriorityChanged => "priority_changed",
    Assigned => "assigned",
    AssetAdded => "asset_added",
    Trashed => "trashed",
    Restored => "restored",
    Edited => "edited",
});

impl Priority {
    /// Display color of the priority label (red / amber / green).
    pub fn color(self) -> &'static str {
        match self {
            Priority::High => "#D32F2F",
            Priority::Medium => "#F9A825",
            Priority::Low => "#388E3C",
        }
    }

    /// 0 for the most urgent.
    pub fn rank(self) -> u8 {
        match self {
            Priority::High => 0,
            Priority::Medium => 1,
            Priority::Low => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityEntry {
    pub at: Timestamp,
    pub actor_id: Id,
    pub kind: ActivityKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetRef {
    pub id: Id,
    pub content_hash: String,
    pub filename: String,
    pub media_type: String,
    pub size_bytes: u64,
    pub uploaded_at: Timestamp,
    pub uploaded_by: Id,
}

/// Strips directory components and control characters from an uploaded file
/// name. Never returns an empty string.
pub fn sanitize_filename(raw: &str) -> String {
    let base = raw.rsplit(['/', '\\']).next().unwrap_or("");
    let cleaned: String = base
        .chars()
        .filter(|c| !c.is_control() && *c != '"')
        .take(255)
        .collect();
    let cleaned = cleaned.trim().trim_start_matches('.').to_string();
    if cleaned.is_empty() {
        "upload".to_string()
    } else {
        cleaned
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: Id,
    pub title: String,
    pub description: String,
    pub status: TaskStatus,
    pub priority: Priority,
    pub assignee_ids: BTreeSet<Id>,
    pub due_date: Option<NaiveDate>,
    pub asset_refs: Vec<AssetRef>,
    pub activity: Vec<ActivityEntry>,
    pub trashed: bool,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
    pub created_by: Id,
    pub revision: u64,
}

/// Input for [`Task::create`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
pub struct NewTask {
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_priority")]
    pub priority: Priority,
    #[serde(default)]
    pub assignee_ids: BTreeSet<Id>,
    #[serde(default)]
    pub due_date: Option<NaiveDate>,
}

fn default_priority() -> Priority {
    Priority::Medium
}

#[allow(clippy::derivable_impls)]
impl Default for Priority {
    fn default() -> Self {
        Priority::Medium
    }
}

/// A partial update. Absent fields are left alone; `due_date: Some(None)`
/// clears the due date.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskPatch {
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub status: Option<TaskStatus>,
    #[serde(default)]
    pub priority: Option<Priority>,
    #[serde(default)]
    pub assignee_ids: Option<BTreeSet<Id>>,
    #[serde(default, deserialize_with = "present")]
    pub due_date: Option<Option<NaiveDate>>,
}

fn present<'de, D, T>(d: D) -> Result<Option<Option<T>>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(d).map(Some)
}

impl TaskPatch {
    pub fn is_empty(&self) -> bool {
        *self == TaskPatch::default()
    }
}

fn validate_title(title: &str) -> Result<String, DomainError> {
    let t = title.trim();
    if t.is_empty() {
        return Err(DomainError::EmptyTitle);
    }
    let n = t.chars().count();
    if n > MAX_TITLE_LEN {
        return Err(DomainError::TitleTooLong(n));
    }
    Ok(t.to_string())
}

fn validate_description(d: &str) -> Result<(), DomainError> {
    let n = d.chars().count();
    if n > MAX_DESCRIPTION_LEN {
        return Err(DomainError::DescriptionTooLong(n));
    }
    Ok(())
}

fn join_ids<'a>(ids: impl Iterator<Item = &'a Id>) -> String {
    ids.map(Id::as_str).collect::<Vec<_>>().join(",")
}

impl Task {
    pub fn create(id: Id, input: NewTask, actor: &Id, now: Timestamp) -> Result<Task, DomainError> {
        let title = validate_title(&input.title)?;
        validate_description(&input.description)?;
        Ok(Task {
            id,
            activity: vec![ActivityEntry {
                at: now,
                actor_id: actor.clone(),
                kind: ActivityKind::Created,
                detail: title.clone(),
            }],
            title,
            description: input.description,
            status: TaskStatus::Todo,
            priority: input.priority,
            assignee_ids: input.assignee_ids,
            due_date: input.due_date,
            asset_refs: Vec::new(),
            trashed: false,
            created_at: now,
            updated_at: now,
            created_by: actor.clone(),
            revision: 1,
        })
    }

    /// Applies every field of `patch` as one accepted mutation: one revision
    /// bump, one activity entry per kind of change.
    pub fn apply_patch(&self, patch: &TaskPatch, actor: &Id, now: Timestamp) -> Result<Task, DomainError> {
        if self.trashed {
            return Err(DomainError::TaskTrashed);
        }
        let mut next = self.clone();
        let at = self.stamp(now);
        let mut log = Vec::new();

        let mut edited = Vec::new();
        if let Some(title) = &patch.title {
            let title = validate_title(title)?;
            if title != next.title {
                next.title = title;
                edited.push("title");
            }
        }
        if let Some(desc) = &patch.description {
            validate_description(desc)?;
            if *desc != next.description {
                next.description = desc.clone();
                edited.push("description");
            }
        }
        if let Some(due) = patch.due_date {
            if due != next.due_date {
                next.due_date = due;
                edited.push("due_date");
            }
        }
        if !edited.is_empty() {
            log.push((ActivityKind::Edited, edited.join(",")));
        }
        if let Some(status) = patch.status {
            if status != next.status {
                log.push((ActivityKind::StatusChanged, format!("{}→{}", next.status, status)));
                next.status = status;
            }
        }
        if let Some(priority) = patch.priority {
            if priority != next.priority {
                log.push((ActivityKind::PriorityChanged, format!("{}→{}", next.priority, priority)));
                next.priority = priority;
            }
        }
        if let Some(ids) = &patch.assignee_ids {
            if *ids != next.assignee_ids {
                let added = join_ids(ids.difference(&next.assignee_ids));
                let removed = join_ids(next.assignee_ids.difference(ids));
                log.push((ActivityKind::Assigned, format!("added:[{added}] removed:[{removed}]")));
                next.assignee_ids = ids.clone();
            }
        }

        if log.is_empty() {
            return Ok(self.clone());
        }
        for (kind, detail) in log {
            next.push_activity(at, actor, kind, detail);
        }
        next.bump(at);
        Ok(next)
    }

    pub fn transition_status(&self, status: TaskStatus, actor: &Id, now: Timestamp) -> Result<Task, DomainError> {
        self.apply_patch(&TaskPatch { status: Some(status), ..Default::default() }, actor, now)
    }

    pub fn set_priority(&self, priority: Priority, actor: &Id, now: Timestamp) -> Result<Task, DomainError> {
        self.apply_patch(&TaskPatch { priority: Some(priority), ..Default::default() }, actor, now)
    }

    /// Replaces the assignee set wholesale.
    pub fn assign(&self, assignees: BTreeSet<Id>, actor: &Id, now: Timestamp) -> Result<Task, DomainError> {
        self.apply_patch(&TaskPatch { assignee_ids: Some(assignees), ..Default::default() }, actor, now)
    }

    pub fn soft_delete(&self, actor: &Id, now: Timestamp) -> Result<Task, DomainError> {
        if self.trashed {
            return Err(DomainError::AlreadyTrashed);
        }
        let mut next = self.clone();
        let at = self.stamp(now);
        next.trashed = true;
        next.push_activity(at, actor, ActivityKind::Trashed, String::new());
        next.bump(at);
        Ok(next)
    }

    pub fn restore(&self, actor: &Id, now: Timestamp) -> Result<Task, DomainError> {
        if !self.trashed {
            return Err(DomainError::NotTrashed);
        }
        let mut next = self.clone();
        let at = self.stamp(now);
        next.trashed = false;
        next.push_activity(at, actor, ActivityKind::Restored, String::new());
        next.bump(at);
        Ok(next)
    }

    pub fn attach_asset(&self, asset: AssetRef, limit: u64, actor: &Id, now: Timestamp) -> Result<Task, DomainError> {
        if self.trashed {
            return Err(DomainError::TaskTrashed);
        }
        if asset.size_bytes == 0 {
            return Err(DomainError::EmptyAsset);
        }
        if asset.size_bytes > limit {
            return Err(DomainError::AssetTooLarge { size: asset.size_bytes, limit });
        }
        let mut next = self.clone();
        let at = self.stamp(now);
        let detail = format!("{} ({})", asset.filename, &asset.content_hash[..asset.content_hash.len().min(12)]);
        next.asset_refs.push(asset);
        next.push_activity(at, actor, ActivityKind::AssetAdded, detail);
        next.bump(at);
        Ok(next)
    }

    /// `now`, clamped so that activity timestamps never go backwards even if
    /// the wall clock does.
    fn stamp(&self, now: Timestamp) -> Timestamp {
        let last = self.activity.last().map_or(self.updated_at, |e| e.at.max(self.updated_at));
        now.max(last)
    }

    fn push_activity(&mut self, at: Timestamp, actor: &Id, kind: ActivityKind, detail: String) {
        self.activity.push(ActivityEntry {
            at,
            actor_id: actor.clone(),
            kind,
            detail,
        });
    }

    fn bump(&mut self, at: Timestamp) {
        self.revision += 1;
        self.updated_at = at;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub id: Id,
    pub name: String,
    pub email: String,
    pub role: Role,
    pub password_hash: HashRecord,
    pub active: bool,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
    pub revision: u64,
}

/// What clients get to see of an account.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountView {
    pub id: Id,
    pub name: String,
    pub email: String,
    pub role: Role,
    pub active: bool,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
    pub revision: u64,
}

impl From<&UserAccount> for AccountView {
    fn from(u: &UserAccount) -> Self {
        AccountView {
            id: u.id.clone(),
            name: u.name.clone(),
            email: u.email.clone(),
            role: u.role,
            active: u.active,
            created_at: u.created_at,
            updated_at: u.updated_at,
            revision: u.revision,
        }
    }
}

/// Lowercases and syntax-checks an email address.
pub fn normalize_email(raw: &str) -> Result<String, DomainError> {
    let e = raw.trim().to_lowercase();
    let Some((local, domain)) = e.split_once('@') else {
        return Err(DomainError::InvalidEmail);
    };
    let ok = !local.is_empty()
        && e.len() <= 254
        && !domain.contains('@')
        && domain.contains('.')
        && !domain.starts_with('.')
        && !domain.ends_with('.')
        && !domain.contains("..")
        && !e.chars().any(|c| c.is_whitespace() || c.is_control());
    if ok {
        Ok(e)
    } else {
        Err(DomainError::InvalidEmail)
    }
}

impl UserAccount {
    pub fn create(
        id: Id,
        name: &str,
        email: &str,
        role: Role,
        password_hash: HashRecord,
        now: Timestamp,
    ) -> Result<UserAccount, DomainError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(DomainError::EmptyName);
        }
        if name.chars().count() > MAX_NAME_LEN {
            return Err(DomainError::NameTooLong);
        }
        Ok(UserAccount {
            id,
            name: name.to_string(),
            email: normalize_email(email)?,
            role,
            password_hash,
            active: true,
            created_at: now,
            updated_at: now,
            revision: 1,
        })
    }

    /// Changes role and/or active flag; a no-op returns the account unchanged.
    pub fn update(&self, role: Option<Role>, active: Option<bool>, now: Timestamp) -> UserAccount {
        let mut next = self.clone();
        if let Some(r) = role {
            next.role = r;
        }
        if let Some(a) = active {
            next.active = a;
        }
        if next == *self {
            return next;
        }
        next.revision += 1;
        next.updated_at = now.max(self.updated_at);
        next
    }

    pub fn view(&self) -> AccountView {
        AccountView::from(self)
    }
}
