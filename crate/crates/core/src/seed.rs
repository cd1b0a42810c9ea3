//! Demo data and JSON fixtures.
//!
//! Seeding runs on a manual clock and a seeded random source, so the same
//! fixture always produces byte-identical stores.

use std::collections::BTreeSet;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::HashParams;
use crate::clock::{ManualClock, Timestamp};
use crate::domain::{NewTask, Priority, Role, TaskPatch, TaskStatus, UserAccount};
use crate::id::{Entropy, Id};
use crate::service::{Service, ServiceConfig, ServiceError};
use crate::store::{Store, StoreError};

/// 2025-03-03T09:00:00Z
pub const SEED_EPOCH_MS: i64 = 1_740_992_400_000;
pub const SEED_STEP_MS: i64 = 60_000;
pub const SEED_RNG: u64 = 0x5EED_2025;
pub const DEMO_PASSWORD: &str = "demo-password";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureUser {
    pub name: String,
    pub email: String,
    pub password: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureTask {
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub status: Option<TaskStatus>,
    #[serde(default)]
    pub priority: Priority,
    /// Assignee emails.
    #[serde(default)]
    pub assignees: Vec<String>,
    #[serde(default)]
    pub due_date: Option<NaiveDate>,
    #[serde(default)]
    pub trashed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    #[serde(default)]
    pub users: Vec<FixtureUser>,
    #[serde(default)]
    pub tasks: Vec<FixtureTask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SeedSummary {
    pub users: usize,
    pub tasks: usize,
    pub last_event_seq: u64,
}

#[derive(Debug, Error)]
pub enum SeedError {
    #[error("store already holds data; seed only into an empty data directory")]
    NotEmpty,
    #[error("fixture task {task:?} names unknown assignee {email}")]
    UnknownAssignee { task: String, email: String },
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

const DEMO_TITLES: [&str; 12] = [
    "Draft project charter",
    "Set up CI pipeline",
    "Design login screen",
    "Write API documentation",
    "Fix token refresh bug",
    "Migrate task storage",
    "Plan sprint review",
    "Add asset previews",
    "Audit team permissions",
    "Tune dashboard queries",
    "Prepare release notes",
    "Clean up trash handling",
];

/// Three accounts and twelve tasks: four per status, every priority and
/// every account represented.
pub fn demo_fixture() -> Fixture {
    let users = vec![
        FixtureUser { name: "Ada Admin".into(), email: "ada@example.com".into(), password: DEMO_PASSWORD.into(), role: Role::Admin },
        FixtureUser { name: "Ben Builder".into(), email: "ben@example.com".into(), password: DEMO_PASSWORD.into(), role: Role::User },
        FixtureUser { name: "Cleo Coder".into(), email: "cleo@example.com".into(), password: DEMO_PASSWORD.into(), role: Role::User },
    ];
    let tasks = DEMO_TITLES
        .iter()
        .enumerate()
        .map(|(i, title)| FixtureTask {
            title: title.to_string(),
            description: format!("Demo task {} of {}.", i + 1, DEMO_TITLES.len()),
            status: Some(TaskStatus::ALL[i % 3]),
            priority: [Priority::High, Priority::Medium, Priority::Low][(i / 3) % 3],
            assignees: vec![users[(i / 3) % 3].email.clone()],
            due_date: (i % 4 == 0).then(|| NaiveDate::from_ymd_opt(2025, 3, 10 + i as u32).expect("valid date")),
            trashed: false,
        })
        .collect();
    Fixture { users, tasks }
}

fn seed_service(store: Arc<Store>) -> Service {
    let clock = Arc::new(ManualClock::stepping(Timestamp::from_millis(SEED_EPOCH_MS), SEED_STEP_MS));
    let entropy = Arc::new(Entropy::seeded(SEED_RNG));
    Service::new(store, clock, entropy, ServiceConfig { hash_params: HashParams::default(), ..ServiceConfig::default() })
}

pub fn seed_fixture(store: Arc<Store>, fixture: &Fixture) -> Result<SeedSummary, SeedError> {
    if store.events().last_seq() > 0
        || !store.scan::<UserAccount>()?.is_empty()
        || !store.scan::<crate::domain::Task>()?.is_empty()
    {
        return Err(SeedError::NotEmpty);
    }
    let svc = seed_service(store.clone());
    let actor = Id::system();
    let mut accounts = Vec::new();
    for u in &fixture.users {
        accounts.push(svc.create_user(&actor, &u.name, &u.email, &u.password, u.role)?.value);
    }
    for t in &fixture.tasks {
        let mut assignees = BTreeSet::new();
        for email in &t.assignees {
            let email_norm = email.trim().to_lowercase();
            let u = accounts
                .iter()
                .find(|a| a.email == email_norm)
                .ok_or_else(|| SeedError::UnknownAssignee { task: t.title.clone(), email: email.clone() })?;
            assignees.insert(u.id.clone());
        }
        // The first admin acts as the author of fixture tasks when present.
        let author = accounts.iter().find(|a| a.role == Role::Admin).map(|a| a.id.clone()).unwrap_or_else(Id::system);
        let input = NewTask {
            title: t.title.clone(),
            description: t.description.clone(),
            priority: t.priority,
            assignee_ids: assignees,
            due_date: t.due_date,
        };
        let task = svc.create_task(&author, input)?.value;
        if let Some(status) = t.status.filter(|s| *s != task.status) {
            let patch = TaskPatch { status: Some(status), ..TaskPatch::default() };
            svc.update_task(&author, &task.id, Some(task.revision), &patch)?;
        }
        if t.trashed {
            svc.trash_task(&author, &task.id, None)?;
        }
    }
    Ok(SeedSummary {
        users: fixture.users.len(),
        tasks: fixture.tasks.len(),
        last_event_seq: store.events().last_seq(),
    })
}

pub fn seed_demo(store: Arc<Store>) -> Result<SeedSummary, SeedError> {
    seed_fixture(store, &demo_fixture())
}
