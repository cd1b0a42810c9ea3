//! File-backed JSON document store.
//!
//! Layout under the data directory:
//!
//! ```text
//! manifest.json              {"format_version":1,"last_event_seq":N}
//! tasks/<id>.json            one document per task
//! users/<id>.json            one document per account
//! blobs/<hh>/<sha256-hex>    content-addressed attachment bytes
//! events.jsonl               mutation log, see crate::events
//! ```
//!
//! Writes go to `<file>.tmp` first and are renamed into place, so a crash
//! leaves either the previous or the next version of a document. Writers
//! declare the revision they read; a write against any other revision fails
//! with [`StoreError::StaleRevision`]. Writes to one document are serialized
//! by a per-id lock; there is no cross-document transaction.
//!
//! Blob digests are SHA-256, hex encoded.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::domain::{Priority, Task, TaskStatus, UserAccount, DEFAULT_ASSET_LIMIT};
use crate::events::{self, EntityKind, EntityMap, EventDraft, EventLog, EventLogError, MutationEvent, OpKind};
use crate::fsutil;
use crate::id::Id;

pub const FORMAT_VERSION: u32 = 1;
pub const MAX_PAGE: usize = 500;
const MANIFEST_FILE: &str = "manifest.json";
const BLOBS_DIR: &str = "blobs";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("manifest says last_event_seq={manifest} but the event log ends at {log}")]
    SeqMismatch { manifest: u64, log: u64 },
    #[error("stale revision, current is {current}")]
    StaleRevision { current: u64 },
    #[error("document already exists")]
    AlreadyExists,
    #[error("document not found")]
    NotFound,
    #[error("document revision {got} does not follow expected revision {expected:?}")]
    BadRevision { expected: Option<u64>, got: u64 },
    #[error("corrupt document {path}: {reason}")]
    CorruptDocument { path: PathBuf, reason: String },
    #[error("page limit must be between 1 and {MAX_PAGE}")]
    BadPage,
    #[error("blob is {size} bytes, limit is {limit}")]
    BlobTooLarge { size: u64, limit: u64 },
    #[error("blob is empty")]
    EmptyBlob,
    #[error("blob not found")]
    BlobNotFound,
    #[error("blob {expected} re-hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("import target already holds data")]
    NotEmpty,
    #[error("bad snapshot archive: {0}")]
    BadArchive(String),
    #[error("corrupt event log: {0}")]
    CorruptLog(String),
    #[error(transparent)]
    Log(EventLogError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<EventLogError> for StoreError {
    fn from(e: EventLogError) -> Self {
        match e {
            EventLogError::SeqMismatch { manifest, log } => StoreError::SeqMismatch { manifest, log },
            EventLogError::Corrupt { line, reason } => StoreError::CorruptLog(format!("line {line}: {reason}")),
            other => StoreError::Log(other),
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Collection {
    Tasks,
    Users,
}

impl Collection {
    pub const ALL: [Collection; 2] = [Collection::Tasks, Collection::Users];

    pub fn dir_name(self) -> &'static str {
        match self {
            Collection::Tasks => "tasks",
            Collection::Users => "users",
        }
    }

    pub fn entity_kind(self) -> EntityKind {
        match self {
            Collection::Tasks => EntityKind::Task,
            Collection::Users => EntityKind::User,
        }
    }
}

/// An entity the store knows how to persist.
pub trait Document: Serialize + DeserializeOwned + Clone + Send + Sync + 'static {
    const COLLECTION: Collection;
    fn id(&self) -> &Id;
    fn revision(&self) -> u64;
    fn created_at(&self) -> Timestamp;
}

impl Document for Task {
    const COLLECTION: Collection = Collection::Tasks;
    fn id(&self) -> &Id {
        &self.id
    }
    fn revision(&self) -> u64 {
        self.revision
    }
    fn created_at(&self) -> Timestamp {
        self.created_at
    }
}

impl Document for UserAccount {
    const COLLECTION: Collection = Collection::Users;
    fn id(&self) -> &Id {
        &self.id
    }
    fn revision(&self) -> u64 {
        self.revision
    }
    fn created_at(&self) -> Timestamp {
        self.created_at
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub last_event_seq: u64,
}

impl Manifest {
    pub fn with_seq(last_event_seq: u64) -> Self {
        Manifest { format_version: FORMAT_VERSION, last_event_seq }
    }

    pub(crate) fn read(path: &Path) -> Result<Manifest> {
        let bytes = fs::read(path)?;
        let m: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptManifest(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(StoreError::CorruptManifest(format!("unknown format_version {}", m.format_version)));
        }
        Ok(m)
    }

    pub(crate) fn write(&self, path: &Path, durable: bool) -> io::Result<()> {
        let mut bytes = serde_json::to_vec(self).expect("manifest serializes");
        bytes.push(b'\n');
        fsutil::atomic_write(path, &bytes, durable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Page {
    pub offset: usize,
    pub limit: usize,
}

impl Page {
    pub fn new(offset: usize, limit: usize) -> Result<Page> {
        if !(1..=MAX_PAGE).contains(&limit) {
            return Err(StoreError::BadPage);
        }
        Ok(Page { offset, limit })
    }

    pub fn first(limit: usize) -> Result<Page> {
        Page::new(0, limit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Listing<T> {
    pub items: Vec<T>,
    pub total_count: usize,
}

/// Conjunction of optional task predicates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskFilter {
    pub status: Option<TaskStatus>,
    pub priority: Option<Priority>,
    pub assignee: Option<Id>,
    pub trashed: Option<bool>,
}

impl TaskFilter {
    pub fn matches(&self, t: &Task) -> bool {
        self.status.is_none_or(|s| t.status == s)
            && self.priority.is_none_or(|p| t.priority == p)
            && self.assignee.as_ref().is_none_or(|a| t.assignee_ids.contains(a))
            && self.trashed.is_none_or(|x| t.trashed == x)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub content_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn is_hex_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    pub blob_limit: u64,
    /// fsync every write. Turn off only for throwaway stores.
    pub durable: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions { blob_limit: DEFAULT_ASSET_LIMIT, durable: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpenReport {
    pub removed_tmp_files: usize,
    pub reconciled_events: usize,
    pub restored_documents: usize,
}

pub struct Store {
    root: PathBuf,
    opts: StoreOptions,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    log: EventLog,
    pending_faults: AtomicU32,
    report: OpenReport,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.root).field("log", &self.log).finish()
    }
}

impl Store {
    pub fn open(data_dir: impl AsRef<Path>) -> Result<Store> {
        Store::open_with(data_dir, StoreOptions::default())
    }

    /// Opens the store, creating the layout if absent, sweeping leftover
    /// `*.tmp` files and reconciling documents with the event log.
    pub fn open_with(data_dir: impl AsRef<Path>, opts: StoreOptions) -> Result<Store> {
        let root = data_dir.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        for c in Collection::ALL {
            fs::create_dir_all(root.join(c.dir_name()))?;
        }
        fs::create_dir_all(root.join(BLOBS_DIR))?;
        let removed_tmp_files = fsutil::remove_tmp_files(&root)?;
        if removed_tmp_files > 0 {
            tracing::info!(removed_tmp_files, "removed leftovers of interrupted writes");
        }

        let manifest_path = root.join(MANIFEST_FILE);
        let manifest = if manifest_path.exists() {
            Manifest::read(&manifest_path)?
        } else {
            let m = Manifest::with_seq(0);
            m.write(&manifest_path, opts.durable)?;
            m
        };
        let (log, events) = EventLog::open(&root, &manifest_path, &manifest, opts.durable)?;
        let mut store = Store {
            root,
            opts,
            locks: Mutex::new(HashMap::new()),
            log,
            pending_faults: AtomicU32::new(0),
            report: OpenReport { removed_tmp_files, ..Default::default() },
        };
        store.reconcile(&events)?;
        Ok(store)
    }

    /// Brings the log and the documents back in line after a crash between
    /// a document commit and its log append. A document newer than the log
    /// gets a reconciliation event; a log snapshot newer than the document
    /// (document file lost) is written back.
    fn reconcile(&mut self, events: &[MutationEvent]) -> Result<()> {
        let replayed = events::replay(events).map_err(|e| StoreError::CorruptLog(e.to_string()))?;
        let current = self.state_map()?;
        let now = Timestamp::from(chrono::Utc::now());
        let mut appended = 0;
        let mut restored = 0;
        for ((kind, id), doc) in &current {
            let logged = replayed.get(&(*kind, id.clone()));
            if logged == Some(doc) {
                continue;
            }
            let rev = |v: &Value| v.get("revision").and_then(Value::as_u64).unwrap_or(0);
            if let Some(snap) = logged.filter(|s| rev(s) > rev(doc)) {
                self.write_raw(kind_collection(*kind), id, snap)?;
                restored += 1;
            } else {
                self.log.append(EventDraft {
                    at: now,
                    actor_id: Id::system(),
                    entity_kind: *kind,
                    entity_id: id.clone(),
                    op_kind: OpKind::Upsert,
                    snapshot: Some(doc.clone()),
                })?;
                appended += 1;
            }
        }
        for (kind, id) in replayed.keys() {
            if !current.contains_key(&(*kind, id.clone())) {
                self.log.append(EventDraft {
                    at: now,
                    actor_id: Id::system(),
                    entity_kind: *kind,
                    entity_id: id.clone(),
                    op_kind: OpKind::HardDelete,
                    snapshot: None,
                })?;
                appended += 1;
            }
        }
        if appended + restored > 0 {
            tracing::warn!(appended, restored, "reconciled store with event log");
        }
        self.report.reconciled_events = appended;
        self.report.restored_documents = restored;
        Ok(())
    }

    pub fn open_report(&self) -> OpenReport {
        self.report
    }

    pub fn data_dir(&self) -> &Path {
        &self.root
    }

    pub fn blob_limit(&self) -> u64 {
        self.opts.blob_limit
    }

    pub fn events(&self) -> &EventLog {
        &self.log
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Manifest::read(&self.root.join(MANIFEST_FILE))
    }

    /// Makes the next `n` document writes fail after the temporary file has
    /// been (partially) written and before it is renamed into place, the way
    /// a crash at that point would. For crash-recovery tests.
    #[doc(hidden)]
    pub fn inject_write_failures(&self, n: u32) {
        self.pending_faults.store(n, Ordering::SeqCst);
    }

    fn doc_path(&self, c: Collection, id: &Id) -> PathBuf {
        self.root.join(c.dir_name()).join(format!("{id}.json"))
    }

    fn lock_for(&self, key: String) -> Arc<Mutex<()>> {
        self.locks.lock().entry(key).or_default().clone()
    }

    fn doc_lock(&self, c: Collection, id: &Id) -> Arc<Mutex<()>> {
        self.lock_for(format!("{}/{id}", c.dir_name()))
    }

    fn write_doc_bytes(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let fault = self
            .pending_faults
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if fault {
            let torn = &bytes[..bytes.len() / 2];
            fsutil::write_tmp(&fsutil::tmp_path(path), torn, false)?;
            return Err(StoreError::Io(io::Error::other("injected write failure")));
        }
        fsutil::atomic_write(path, bytes, self.opts.durable)?;
        Ok(())
    }

    fn write_raw(&self, c: Collection, id: &Id, doc: &Value) -> Result<()> {
        let mut bytes = serde_json::to_vec(doc).expect("values serialize");
        bytes.push(b'\n');
        self.write_doc_bytes(&self.doc_path(c, id), &bytes)
    }

    fn read_doc<T: Document>(&self, path: &Path) -> Result<Option<T>> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| StoreError::CorruptDocument { path: path.to_path_buf(), reason: e.to_string() }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn cas_locked<T: Document>(&self, doc: &T, expected: Option<u64>) -> Result<u64> {
        let path = self.doc_path(T::COLLECTION, doc.id());
        let current: Option<T> = self.read_doc(&path)?;
        match (expected, current) {
            (None, Some(_)) => return Err(StoreError::AlreadyExists),
            (None, None) if doc.revision() != 1 => {
                return Err(StoreError::BadRevision { expected: None, got: doc.revision() })
            }
            (Some(_), None) => return Err(StoreError::NotFound),
            (Some(e), Some(cur)) if cur.revision() != e => {
                return Err(StoreError::StaleRevision { current: cur.revision() })
            }
            (Some(e), Some(_)) if doc.revision() != e + 1 => {
                return Err(StoreError::BadRevision { expected: Some(e), got: doc.revision() })
            }
            _ => {}
        }
        let mut bytes = serde_json::to_vec(doc).expect("documents serialize");
        bytes.push(b'\n');
        self.write_doc_bytes(&path, &bytes)?;
        Ok(doc.revision())
    }

    /// Optimistic write. With `expected_revision == None` the document must
    /// not exist yet and must carry revision 1; otherwise the stored revision
    /// must equal `expected_revision` and `doc` must carry the next one.
    /// Returns the new stored revision. Does not touch the event log.
    pub fn compare_and_put<T: Document>(&self, doc: &T, expected_revision: Option<u64>) -> Result<u64> {
        let lock = self.doc_lock(T::COLLECTION, doc.id());
        let _g = lock.lock();
        self.cas_locked(doc, expected_revision)
    }

    /// [`Store::compare_and_put`] followed by the matching log append, both
    /// under the document's lock so that per-document revisions appear in
    /// the log in order.
    pub fn commit<T: Document>(
        &self,
        doc: &T,
        expected_revision: Option<u64>,
        actor: &Id,
        at: Timestamp,
    ) -> Result<MutationEvent> {
        let lock = self.doc_lock(T::COLLECTION, doc.id());
        let _g = lock.lock();
        self.cas_locked(doc, expected_revision)?;
        let snapshot = serde_json::to_value(doc).expect("documents serialize");
        Ok(self.log.append(EventDraft {
            at,
            actor_id: actor.clone(),
            entity_kind: T::COLLECTION.entity_kind(),
            entity_id: doc.id().clone(),
            op_kind: OpKind::Upsert,
            snapshot: Some(snapshot),
        })?)
    }

    pub fn get<T: Document>(&self, id: &Id) -> Result<T> {
        self.read_doc(&self.doc_path(T::COLLECTION, id))?.ok_or(StoreError::NotFound)
    }

    pub fn hard_delete<T: Document>(&self, id: &Id) -> Result<()> {
        let lock = self.doc_lock(T::COLLECTION, id);
        let _g = lock.lock();
        self.remove_locked(T::COLLECTION, id)
    }

    fn remove_locked(&self, c: Collection, id: &Id) -> Result<()> {
        match fs::remove_file(self.doc_path(c, id)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound),
            Err(e) => Err(e.into()),
        }
    }

    /// Hard delete plus the matching `hard_delete` event.
    pub fn purge<T: Document>(&self, id: &Id, actor: &Id, at: Timestamp) -> Result<MutationEvent> {
        let lock = self.doc_lock(T::COLLECTION, id);
        let _g = lock.lock();
        self.remove_locked(T::COLLECTION, id)?;
        Ok(self.log.append(EventDraft {
            at,
            actor_id: actor.clone(),
            entity_kind: T::COLLECTION.entity_kind(),
            entity_id: id.clone(),
            op_kind: OpKind::HardDelete,
            snapshot: None,
        })?)
    }

    /// Every document of the collection, ordered by `(created_at, id)`.
    pub fn scan<T: Document>(&self) -> Result<Vec<T>> {
        let dir = self.root.join(T::COLLECTION.dir_name());
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let Some(doc) = self.read_doc::<T>(&path)? else { continue };
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if stem != doc.id().as_str() {
                return Err(StoreError::CorruptDocument {
                    path,
                    reason: format!("file name does not match id {}", doc.id()),
                });
            }
            out.push(doc);
        }
        out.sort_by(|a, b| (a.created_at(), a.id()).cmp(&(b.created_at(), b.id())));
        Ok(out)
    }

    pub fn list<T: Document>(&self, filter: impl Fn(&T) -> bool, page: Page) -> Result<Listing<T>> {
        let matching: Vec<T> = self.scan::<T>()?.into_iter().filter(|d| filter(d)).collect();
        let total_count = matching.len();
        let items = matching.into_iter().skip(page.offset).take(page.limit).collect();
        Ok(Listing { items, total_count })
    }

    pub fn list_tasks(&self, filter: &TaskFilter, page: Page) -> Result<Listing<Task>> {
        self.list::<Task>(|t| filter.matches(t), page)
    }

    /// Current state of every document as JSON, keyed like a replayed log.
    pub fn state_map(&self) -> Result<EntityMap> {
        let mut map = EntityMap::new();
        for t in self.scan::<Task>()? {
            map.insert((EntityKind::Task, t.id.clone()), serde_json::to_value(&t).expect("serialize"));
        }
        for u in self.scan::<UserAccount>()? {
            map.insert((EntityKind::User, u.id.clone()), serde_json::to_value(&u).expect("serialize"));
        }
        Ok(map)
    }

    fn blob_path(&self, hash: &str) -> PathBuf {
        self.root.join(BLOBS_DIR).join(&hash[..2]).join(hash)
    }

    pub fn put_blob(&self, bytes: &[u8]) -> Result<BlobRef> {
        if bytes.is_empty() {
            return Err(StoreError::EmptyBlob);
        }
        let size = bytes.len() as u64;
        if size > self.opts.blob_limit {
            return Err(StoreError::BlobTooLarge { size, limit: self.opts.blob_limit });
        }
        let hash = sha256_hex(bytes);
        let path = self.blob_path(&hash);
        let lock = self.lock_for(format!("blob/{hash}"));
        let _g = lock.lock();
        if !path.exists() {
            fs::create_dir_all(path.parent().expect("blob path has parent"))?;
            fsutil::atomic_write(&path, bytes, self.opts.durable)?;
        }
        Ok(BlobRef { content_hash: hash })
    }

    pub fn get_blob(&self, content_hash: &str) -> Result<Vec<u8>> {
        if !is_hex_digest(content_hash) {
            return Err(StoreError::BlobNotFound);
        }
        let bytes = match fs::read(self.blob_path(content_hash)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::BlobNotFound),
            Err(e) => return Err(e.into()),
        };
        let actual = sha256_hex(&bytes);
        if actual != content_hash {
            return Err(StoreError::HashMismatch { expected: content_hash.to_string(), actual });
        }
        Ok(bytes)
    }

    /// Re-hashes every stored blob. Returns how many were checked.
    pub fn verify_blobs(&self) -> Result<usize> {
        let mut n = 0;
        for (rel, _) in walk_files(&self.root.join(BLOBS_DIR))? {
            let name = rel.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            self.get_blob(&name)?;
            n += 1;
        }
        Ok(n)
    }

    /// Writes a gzip'd tar of the whole data directory to `out`. Appends are
    /// held off while the archive is written. The archive bytes depend only
    /// on the file contents: entries are sorted and all metadata is zeroed.
    pub fn export_snapshot_to<W: Write>(&self, out: W) -> Result<W> {
        self.log.quiesced(|| {
            let gz = GzEncoder::new(out, Compression::default());
            let mut tar = tar::Builder::new(gz);
            for (rel, is_dir) in walk_entries(&self.root)? {
                // Only store paths; anything else an operator left in the
                // directory stays out of the archive.
                if !allowed_archive_path(&rel) {
                    continue;
                }
                let name = rel_to_string(&rel);
                let mut header = tar::Header::new_ustar();
                header.set_mtime(0);
                header.set_uid(0);
                header.set_gid(0);
                if is_dir {
                    header.set_entry_type(tar::EntryType::Directory);
                    header.set_mode(0o755);
                    header.set_size(0);
                    tar.append_data(&mut header, format!("{name}/"), io::empty())?;
                } else {
                    let bytes = fs::read(self.root.join(&rel))?;
                    header.set_entry_type(tar::EntryType::Regular);
                    header.set_mode(0o644);
                    header.set_size(bytes.len() as u64);
                    tar.append_data(&mut header, &name, bytes.as_slice())?;
                }
            }
            let gz = tar.into_inner()?;
            Ok(gz.finish()?)
        })
    }

    pub fn export_snapshot(&self, out: impl AsRef<Path>) -> Result<()> {
        let out = out.as_ref();
        let buf = self.export_snapshot_to(Vec::new())?;
        fsutil::atomic_write(out, &buf, self.opts.durable)?;
        Ok(())
    }
}

fn kind_collection(kind: EntityKind) -> Collection {
    match kind {
        EntityKind::Task => Collection::Tasks,
        EntityKind::User => Collection::Users,
    }
}

fn rel_to_string(rel: &Path) -> String {
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Sorted (relative path, is_dir) pairs under `root`, excluding `*.tmp`.
fn walk_entries(root: &Path) -> io::Result<Vec<(PathBuf, bool)>> {
    fn go(root: &Path, rel: &Path, out: &mut Vec<(PathBuf, bool)>) -> io::Result<()> {
        let mut entries: Vec<_> = fs::read_dir(root.join(rel))?.collect::<io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let r = rel.join(e.file_name());
            if e.file_type()?.is_dir() {
                out.push((r.clone(), true));
                go(root, &r, out)?;
            } else if r.extension().is_none_or(|x| x != "tmp") {
                out.push((r, false));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    go(root, Path::new(""), &mut out)?;
    Ok(out)
}

fn walk_files(root: &Path) -> io::Result<Vec<(PathBuf, bool)>> {
    Ok(walk_entries(root)?.into_iter().filter(|(_, d)| !d).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ImportSummary {
    pub tasks: usize,
    pub users: usize,
    pub blobs: usize,
    pub events: u64,
}

fn holds_data(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    for (rel, is_dir) in walk_entries(dir)? {
        if is_dir {
            continue;
        }
        let name = rel_to_string(&rel);
        let empty_manifest = name == MANIFEST_FILE
            && Manifest::read(&dir.join(&rel)).is_ok_and(|m| m.last_event_seq == 0);
        let empty_log = name == events::EVENTS_FILE && fs::metadata(dir.join(&rel))?.len() == 0;
        if !(empty_manifest || empty_log) {
            return Ok(true);
        }
    }
    Ok(false)
}

fn allowed_archive_path(p: &Path) -> bool {
    let parts: Vec<&str> = match p
        .components()
        .map(|c| match c {
            Component::Normal(s) => s.to_str(),
            _ => None,
        })
        .collect::<Option<Vec<_>>>()
    {
        Some(v) if !v.is_empty() => v,
        _ => return false,
    };
    match parts.as_slice() {
        [MANIFEST_FILE] | [events::EVENTS_FILE] | ["tasks"] | ["users"] | [BLOBS_DIR] => true,
        ["tasks" | "users", f] => f.ends_with(".json"),
        [BLOBS_DIR, hh] => hh.len() == 2,
        [BLOBS_DIR, hh, h] => is_hex_digest(h) && h.starts_with(hh),
        _ => false,
    }
}

/// Unpacks an archive written by [`Store::export_snapshot`] into an empty
/// data directory and opens it to validate the result.
pub fn import_snapshot_from<R: Read>(data_dir: impl AsRef<Path>, archive: R, opts: StoreOptions) -> Result<ImportSummary> {
    let root = data_dir.as_ref();
    if holds_data(root)? {
        return Err(StoreError::NotEmpty);
    }
    let bad = |e: io::Error| StoreError::BadArchive(e.to_string());
    let mut tar = tar::Archive::new(GzDecoder::new(archive));
    let mut files = Vec::new();
    for entry in tar.entries().map_err(bad)? {
        let mut entry = entry.map_err(bad)?;
        let path = entry.path().map_err(bad)?.into_owned();
        if !allowed_archive_path(&path) {
            return Err(StoreError::BadArchive(format!("unexpected entry {}", path.display())));
        }
        match entry.header().entry_type() {
            tar::EntryType::Directory => {}
            tar::EntryType::Regular => {
                let mut bytes = Vec::new();
                entry.read_to_end(&mut bytes).map_err(bad)?;
                files.push((path, bytes));
            }
            other => return Err(StoreError::BadArchive(format!("unsupported entry type {other:?}"))),
        }
    }
    if !files.iter().any(|(p, _)| p == Path::new(MANIFEST_FILE)) {
        return Err(StoreError::BadArchive("missing manifest.json".into()));
    }
    for (rel, bytes) in &files {
        let path = root.join(rel);
        fs::create_dir_all(path.parent().expect("archive paths are relative"))?;
        fsutil::atomic_write(&path, bytes, opts.durable)?;
    }
    let store = Store::open_with(root, opts).map_err(|e| match e {
        StoreError::Io(io) => StoreError::Io(io),
        other => StoreError::BadArchive(other.to_string()),
    })?;
    let summary = ImportSummary {
        tasks: store.scan::<Task>()?.len(),
        users: store.scan::<UserAccount>()?.len(),
        blobs: store.verify_blobs().map_err(|e| StoreError::BadArchive(e.to_string()))?,
        events: store.events().last_seq(),
    };
    Ok(summary)
}

pub fn import_snapshot(data_dir: impl AsRef<Path>, archive: impl AsRef<Path>, opts: StoreOptions) -> Result<ImportSummary> {
    let f = fs::File::open(archive.as_ref())?;
    import_snapshot_from(data_dir, io::BufReader::new(f), opts)
}
