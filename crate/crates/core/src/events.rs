//! Append-only, sequence-numbered mutation log.
//!
//! `events.jsonl` holds one JSON event per line. Sequence numbers start at 1
//! and increase by exactly one; they are assigned under a single lock so the
//! file is always a gap-free total order. Every event carries the full
//! post-mutation document, which makes replay a plain fold and lets clients
//! apply events idempotently (deduplicating by `seq`).
//!
//! Live subscribers are fed through a bounded broadcast channel. A subscriber
//! that falls too far behind is dropped and must resume with
//! [`EventLog::read_since`] from the last sequence number it saw.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::broadcast;

use crate::clock::Timestamp;
use crate::id::Id;
use crate::store::Manifest;

pub const EVENTS_FILE: &str = "events.jsonl";
const SUBSCRIBER_BUFFER: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Task,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Upsert,
    HardDelete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationEvent {
    pub seq: u64,
    pub at: Timestamp,
    pub actor_id: Id,
    pub entity_kind: EntityKind,
    pub entity_id: Id,
    pub op_kind: OpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Value>,
}

/// An event before the log has assigned it a sequence number.
#[derive(Debug, Clone, PartialEq)]
pub struct EventDraft {
    pub at: Timestamp,
    pub actor_id: Id,
    pub entity_kind: EntityKind,
    pub entity_id: Id,
    pub op_kind: OpKind,
    pub snapshot: Option<Value>,
}

impl EventDraft {
    fn with_seq(self, seq: u64) -> MutationEvent {
        MutationEvent {
            seq,
            at: self.at,
            actor_id: self.actor_id,
            entity_kind: self.entity_kind,
            entity_id: self.entity_id,
            op_kind: self.op_kind,
            snapshot: self.snapshot,
        }
    }
}

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("event log write failed: {0}")]
    LogWriteFailed(io::Error),
    #[error("event log is corrupt at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("manifest says last_event_seq={manifest} but the log ends at {log}")]
    SeqMismatch { manifest: u64, log: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplayError {
    #[error("expected seq {expected}, found {found}")]
    GapDetected { expected: u64, found: u64 },
    #[error("seq {found} arrived after {previous}")]
    OutOfOrder { previous: u64, found: u64 },
}

/// Reconstructed entity state, keyed by kind and id.
pub type EntityMap = BTreeMap<(EntityKind, Id), Value>;

/// Folds an ordered, gap-free event list (starting at seq 1) into entity state.
pub fn replay<'a, I>(events: I) -> Result<EntityMap, ReplayError>
where
    I: IntoIterator<Item = &'a MutationEvent>,
{
    let mut map = EntityMap::new();
    for (expected, e) in (1u64..).zip(events) {
        if e.seq < expected {
            return Err(ReplayError::OutOfOrder { previous: expected - 1, found: e.seq });
        }
        if e.seq > expected {
            return Err(ReplayError::GapDetected { expected, found: e.seq });
        }
        apply(&mut map, e);
    }
    Ok(map)
}

/// Applies one event to an entity map. Idempotent for a given event.
pub fn apply(map: &mut EntityMap, e: &MutationEvent) {
    let key = (e.entity_kind, e.entity_id.clone());
    match (e.op_kind, &e.snapshot) {
        (OpKind::Upsert, Some(doc)) => {
            map.insert(key, doc.clone());
        }
        (OpKind::Upsert, None) => {}
        (OpKind::HardDelete, _) => {
            map.remove(&key);
        }
    }
}

struct Inner {
    file: File,
    /// Byte offset of the line holding seq `i + 1`.
    offsets: Vec<u64>,
    end: u64,
}

impl Inner {
    fn last_seq(&self) -> u64 {
        self.offsets.len() as u64
    }
}

pub struct EventLog {
    path: PathBuf,
    manifest_path: PathBuf,
    durable: bool,
    inner: Mutex<Inner>,
    tx: broadcast::Sender<Arc<MutationEvent>>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog").field("path", &self.path).field("last_seq", &self.last_seq()).finish()
    }
}

impl EventLog {
    /// Opens (creating if needed) the log under `root` and checks it against
    /// the manifest. Returns the log together with every event it holds.
    ///
    /// A trailing line without a newline was never acknowledged and is cut
    /// off. If the manifest lags the log (crash between the log flush and the
    /// manifest update) the manifest is brought forward; if it is ahead of
    /// the log, events were lost and opening fails.
    pub(crate) fn open(
        root: &Path,
        manifest_path: &Path,
        manifest: &Manifest,
        durable: bool,
    ) -> Result<(EventLog, Vec<MutationEvent>), EventLogError> {
        let path = root.join(EVENTS_FILE);
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete < bytes.len() {
            tracing::warn!(dropped = bytes.len() - complete, "truncating torn tail of event log");
            file.set_len(complete as u64)?;
            bytes.truncate(complete);
        }

        let mut events = Vec::new();
        let mut offsets = Vec::new();
        let mut pos = 0u64;
        for (i, line) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
            let e: MutationEvent = serde_json::from_slice(line)
                .map_err(|err| EventLogError::Corrupt { line: i + 1, reason: err.to_string() })?;
            if e.seq != i as u64 + 1 {
                return Err(EventLogError::Corrupt {
                    line: i + 1,
                    reason: format!("expected seq {}, found {}", i + 1, e.seq),
                });
            }
            offsets.push(pos);
            pos += line.len() as u64;
            events.push(e);
        }

        let log_last = events.len() as u64;
        if manifest.last_event_seq > log_last {
            return Err(EventLogError::SeqMismatch { manifest: manifest.last_event_seq, log: log_last });
        }
        if manifest.last_event_seq < log_last {
            tracing::warn!(manifest = manifest.last_event_seq, log = log_last, "advancing manifest to log tail");
            Manifest::with_seq(log_last).write(manifest_path, durable)?;
        }

        let (tx, _) = broadcast::channel(SUBSCRIBER_BUFFER);
        let log = EventLog {
            path,
            manifest_path: manifest_path.to_path_buf(),
            durable,
            inner: Mutex::new(Inner { file, offsets, end: pos }),
            tx,
        };
        Ok((log, events))
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.lock().last_seq()
    }

    /// Assigns the next sequence number, persists the event and fans it out
    /// to live subscribers.
    pub fn append(&self, draft: EventDraft) -> Result<MutationEvent, EventLogError> {
        let mut inner = self.inner.lock();
        let event = draft.with_seq(inner.last_seq() + 1);
        let mut line = serde_json::to_vec(&event).expect("events serialize");
        line.push(b'\n');
        let written = inner
            .file
            .write_all(&line)
            .and_then(|_| inner.file.flush())
            .and_then(|_| if self.durable { inner.file.sync_data() } else { Ok(()) });
        if let Err(e) = written {
            let end = inner.end;
            let _ = inner.file.set_len(end);
            return Err(EventLogError::LogWriteFailed(e));
        }
        let start = inner.end;
        inner.offsets.push(start);
        inner.end += line.len() as u64;
        Manifest::with_seq(event.seq)
            .write(&self.manifest_path, self.durable)
            .map_err(EventLogError::LogWriteFailed)?;
        drop(inner);
        let _ = self.tx.send(Arc::new(event.clone()));
        Ok(event)
    }

    /// Events with `seq > after_seq`, ascending, at most `limit` of them.
    pub fn read_since(&self, after_seq: u64, limit: usize) -> Result<Vec<MutationEvent>, EventLogError> {
        let (start, end) = {
            let inner = self.inner.lock();
            if after_seq >= inner.last_seq() || limit == 0 {
                return Ok(Vec::new());
            }
            (inner.offsets[after_seq as usize], inner.end)
        };
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(start))?;
        let reader = BufReader::new(f.take(end - start));
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            if out.len() >= limit {
                break;
            }
            let line = line?;
            let e: MutationEvent = serde_json::from_str(&line).map_err(|err| EventLogError::Corrupt {
                line: after_seq as usize + i + 1,
                reason: err.to_string(),
            })?;
            out.push(e);
        }
        Ok(out)
    }

    pub fn read_all(&self) -> Result<Vec<MutationEvent>, EventLogError> {
        self.read_since(0, usize::MAX)
    }

    /// Live feed of events appended from now on. Pair with
    /// [`EventLog::read_since`] to resume without gaps.
    pub fn subscribe(&self) -> broadcast::Receiver<Arc<MutationEvent>> {
        self.tx.subscribe()
    }

    /// Runs `f` while no event can be appended.
    pub(crate) fn quiesced<R>(&self, f: impl FnOnce() -> R) -> R {
        let _guard = self.inner.lock();
        f()
    }
}
