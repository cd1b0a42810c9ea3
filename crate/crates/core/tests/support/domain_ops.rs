//! Random operation sequences over the pure task rules, with the invariants
//! checked after every step.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wms_core::clock::Timestamp;
use wms_core::domain::{AssetRef, NewTask, Priority, Task, TaskPatch, TaskStatus};
use wms_core::id::Id;

const LIMIT: u64 = 1024;
const STATUS_TOKENS: [&str; 3] = ["todo", "in_progress", "done"];

#[derive(Debug, Clone)]
pub enum Op {
    Transition(TaskStatus),
    Priority(Priority),
    Assign(BTreeSet<Id>),
    Patch(TaskPatch),
    Trash,
    Restore,
    Attach(u64),
    TrashRoundtrip,
}

fn people() -> Vec<Id> {
    (1..=4).map(|i| Id::from_parts(1_000, i)).collect()
}

fn random_text<R: Rng>(rng: &mut R, max: usize) -> String {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| *b"abc xyz".get(rng.random_range(0..7)).unwrap() as char).collect()
}

pub fn random_op<R: Rng>(rng: &mut R) -> Op {
    let ids = people();
    let pick_set = |rng: &mut R| ids.iter().filter(|_| rng.random_bool(0.4)).cloned().collect::<BTreeSet<_>>();
    match rng.random_range(0..8) {
        0 => Op::Transition(TaskStatus::ALL[rng.random_range(0..3)]),
        1 => Op::Priority(Priority::ALL[rng.random_range(0..3)]),
        2 => Op::Assign(pick_set(rng)),
        3 => {
            let mut p = TaskPatch::default();
            if rng.random_bool(0.5) {
                // Occasionally blank or oversized to exercise rejection.
                p.title = Some(match rng.random_range(0..10) {
                    0 => "   ".into(),
                    1 => "x".repeat(201),
                    _ => format!("t{}", random_text(rng, 6)),
                });
            }
            if rng.random_bool(0.3) {
                p.description = Some(random_text(rng, 12));
            }
            if rng.random_bool(0.3) {
                p.status = Some(TaskStatus::ALL[rng.random_range(0..3)]);
            }
            if rng.random_bool(0.3) {
                p.priority = Some(Priority::ALL[rng.random_range(0..3)]);
            }
            if rng.random_bool(0.2) {
                p.assignee_ids = Some(pick_set(rng));
            }
            if rng.random_bool(0.2) {
                p.due_date = Some(rng.random_bool(0.5).then(|| chrono::NaiveDate::from_ymd_opt(2025, 1, 1 + rng.random_range(0..28)).unwrap()));
            }
            Op::Patch(p)
        }
        4 => Op::Trash,
        5 => Op::Restore,
        6 => Op::Attach(rng.random_range(0..=LIMIT + 1)),
        _ => Op::TrashRoundtrip,
    }
}

fn asset(size: u64, n: u128, at: Timestamp, by: &Id) -> AssetRef {
    AssetRef {
        id: Id::from_parts(2_000, n),
        content_hash: format!("{n:064x}"),
        filename: format!("f{n}.bin"),
        media_type: "application/octet-stream".into(),
        size_bytes: size,
        uploaded_at: at,
        uploaded_by: by.clone(),
    }
}

fn apply(t: &Task, op: &Op, actor: &Id, now: Timestamp, n: u128) -> Result<Task, wms_core::domain::DomainError> {
    match op {
        Op::Transition(s) => t.transition_status(*s, actor, now),
        Op::Priority(p) => t.set_priority(*p, actor, now),
        Op::Assign(ids) => t.assign(ids.clone(), actor, now),
        Op::Patch(p) => t.apply_patch(p, actor, now),
        Op::Trash => t.soft_delete(actor, now),
        Op::Restore => t.restore(actor, now),
        Op::Attach(size) => t.attach_asset(asset(*size, n, now, actor), LIMIT, actor, now),
        Op::TrashRoundtrip => t.soft_delete(actor, now).and_then(|x| x.restore(actor, now)),
    }
}

/// Everything except the bookkeeping a trash roundtrip is allowed to touch.
fn content(t: &Task) -> Task {
    Task { activity: Vec::new(), revision: 0, updated_at: t.created_at, ..t.clone() }
}

fn check_step(before: &Task, op: &Op, result: &Result<Task, wms_core::domain::DomainError>) -> Result<(), String> {
    let after = match result {
        Err(_) => return Ok(()),
        Ok(a) => a,
    };
    let status = serde_json::to_value(after.status).map_err(|e| e.to_string())?;
    if !STATUS_TOKENS.iter().any(|s| status == *s) {
        return Err(format!("status serialized as {status}"));
    }
    if after.id != before.id || after.created_at != before.created_at || after.created_by != before.created_by {
        return Err("identity fields changed".into());
    }
    let grown = after.activity.len() - before.activity.len().min(after.activity.len());
    if after.activity.len() < before.activity.len() || after.activity[..before.activity.len()] != before.activity[..] {
        return Err(format!("activity not append-only after {op:?}"));
    }
    let expected_bumps = match op {
        Op::TrashRoundtrip => 2,
        _ if after == before => 0,
        _ => 1,
    };
    if after.revision != before.revision + expected_bumps {
        return Err(format!("revision {} -> {} after {op:?}", before.revision, after.revision));
    }
    if expected_bumps == 0 && grown != 0 {
        return Err("no-op grew the activity list".into());
    }
    if expected_bumps > 0 && grown == 0 {
        return Err("accepted mutation left no activity entry".into());
    }
    if after.activity.windows(2).any(|w| w[0].at > w[1].at) || after.updated_at < after.created_at {
        return Err("timestamps went backwards".into());
    }
    if let Op::TrashRoundtrip = op {
        if content(after) != content(before) {
            return Err("trash roundtrip changed task fields".into());
        }
    }
    Ok(())
}

/// Runs one sequence of `len` operations from `seed`. The clock wanders,
/// including backwards jumps. Returns the number of accepted mutations.
pub fn run_sequence(seed: u64, len: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actor = Id::from_parts(1_000, 1);
    let mut now = 1_700_000_000_000i64;
    let mut task = Task::create(
        Id::from_parts(3_000, seed as u128),
        NewTask { title: "seq".into(), ..Default::default() },
        &actor,
        Timestamp::from_millis(now),
    )
    .map_err(|e| e.to_string())?;
    let mut accepted = 0;
    for step in 0..len {
        now += rng.random_range(-5_000..60_000);
        let at = Timestamp::from_millis(now);
        let op = random_op(&mut rng);
        let result = apply(&task, &op, &actor, at, step as u128);
        // Same inputs, same output.
        if apply(&task, &op, &actor, at, step as u128) != result {
            return Err(format!("seed {seed} step {step}: {op:?} is not deterministic"));
        }
        check_step(&task, &op, &result).map_err(|e| format!("seed {seed} step {step}: {e}"))?;
        if let Ok(next) = result {
            if next.revision != task.revision {
                accepted += 1;
            }
            task = next;
        }
    }
    Ok(accepted)
}
