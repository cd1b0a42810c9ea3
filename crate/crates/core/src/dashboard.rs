//! Dashboard aggregations over a task snapshot.
//!
//! All counts skip trashed tasks. "Active" work is the `in_progress` column.
//! A task with several assignees counts once for each of them in the workload
//! table, so workload totals can add up to more than the number of tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ActivityEntry, Priority, Task, TaskStatus, UserAccount};
use crate::id::Id;

pub const MAX_RECENT: usize = 100;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("activity count must be between 1 and {MAX_RECENT}")]
pub struct BadCount;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DashboardSummary {
    pub total_tasks: u64,
    pub todo_count: u64,
    pub in_progress_count: u64,
    pub done_count: u64,
    /// `done / total`, 0 for an empty project.
    pub completion_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadRow {
    /// `None` for the row that collects unassigned tasks.
    pub assignee_id: Option<Id>,
    pub assignee_name: String,
    pub todo_count: u64,
    pub in_progress_count: u64,
    pub done_count: u64,
    pub total: u64,
}

pub const UNASSIGNED: &str = "unassigned";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorityBreakdown {
    pub high_count: u64,
    pub medium_count: u64,
    pub low_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecentActivity {
    pub task_id: Id,
    pub task_title: String,
    /// Position of the entry in the task's activity list.
    pub index: usize,
    #[serde(flatten)]
    pub entry: ActivityEntry,
}

fn live(tasks: &[Task]) -> impl Iterator<Item = &Task> {
    tasks.iter().filter(|t| !t.trashed)
}

pub fn summary(tasks: &[Task]) -> DashboardSummary {
    let mut s = DashboardSummary::default();
    for t in live(tasks) {
        s.total_tasks += 1;
        match t.status {
            TaskStatus::Todo => s.todo_count += 1,
            TaskStatus::InProgress => s.in_progress_count += 1,
            TaskStatus::Done => s.done_count += 1,
        }
    }
    if s.total_tasks > 0 {
        s.completion_ratio = s.done_count as f64 / s.total_tasks as f64;
    }
    s
}

impl WorkloadRow {
    fn empty(assignee_id: Option<Id>, assignee_name: String) -> Self {
        WorkloadRow { assignee_id, assignee_name, todo_count: 0, in_progress_count: 0, done_count: 0, total: 0 }
    }

    fn count(&mut self, status: TaskStatus) {
        match status {
            TaskStatus::Todo => self.todo_count += 1,
            TaskStatus::InProgress => self.in_progress_count += 1,
            TaskStatus::Done => self.done_count += 1,
        }
        self.total += 1;
    }
}

/// One row per active account (even with no tasks), one per other assignee
/// that still holds live tasks, plus an `unassigned` row when any live task
/// has no assignee. Ordered by total descending, then name, then id.
pub fn workload_by_assignee(tasks: &[Task], accounts: &[UserAccount]) -> Vec<WorkloadRow> {
    let names: BTreeMap<&Id, &UserAccount> = accounts.iter().map(|a| (&a.id, a)).collect();
    let mut rows: BTreeMap<Option<Id>, WorkloadRow> = accounts
        .iter()
        .filter(|a| a.active)
        .map(|a| (Some(a.id.clone()), WorkloadRow::empty(Some(a.id.clone()), a.name.clone())))
        .collect();
    for t in live(tasks) {
        if t.assignee_ids.is_empty() {
            rows.entry(None)
                .or_insert_with(|| WorkloadRow::empty(None, UNASSIGNED.to_string()))
                .count(t.status);
        }
        for id in &t.assignee_ids {
            rows.entry(Some(id.clone()))
                .or_insert_with(|| {
                    let name = names.get(id).map_or_else(|| id.to_string(), |a| a.name.clone());
                    WorkloadRow::empty(Some(id.clone()), name)
                })
                .count(t.status);
        }
    }
    let mut out: Vec<WorkloadRow> = rows.into_values().collect();
    out.sort_by(|a, b| {
        b.total
            .cmp(&a.total)
            .then_with(|| a.assignee_name.cmp(&b.assignee_name))
            .then_with(|| a.assignee_id.cmp(&b.assignee_id))
    });
    out
}

pub fn priority_breakdown(tasks: &[Task]) -> PriorityBreakdown {
    let mut p = PriorityBreakdown::default();
    for t in live(tasks) {
        match t.priority {
            Priority::High => p.high_count += 1,
            Priority::Medium => p.medium_count += 1,
            Priority::Low => p.low_count += 1,
        }
    }
    p
}

/// The `n` most recent activity entries across live tasks, newest first.
/// Ties on timestamp go to the lower task id, then the later entry.
pub fn recent_activity(tasks: &[Task], n: usize) -> Result<Vec<RecentActivity>, BadCount> {
    if !(1..=MAX_RECENT).contains(&n) {
        return Err(BadCount);
    }
    let mut all: Vec<(&Task, usize, &ActivityEntry)> = live(tasks)
        .flat_map(|t| t.activity.iter().enumerate().map(move |(i, e)| (t, i, e)))
        .collect();
    all.sort_by(|a, b| {
        b.2.at
            .cmp(&a.2.at)
            .then_with(|| a.0.id.cmp(&b.0.id))
            .then_with(|| b.1.cmp(&a.1))
    });
    Ok(all
        .into_iter()
        .take(n)
        .map(|(t, index, e)| RecentActivity {
            task_id: t.id.clone(),
            task_title: t.title.clone(),
            index,
            entry: e.clone(),
        })
        .collect())
}
