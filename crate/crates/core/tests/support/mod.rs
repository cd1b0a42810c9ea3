//! Shared harness: an in-process router driven through `tower::oneshot`,
//! an event-stream frame parser and the replay check.
#![allow(dead_code)]

pub mod domain_ops;
pub mod scenarios;

use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::http::{header, HeaderMap, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

use wms_core::api::{self, ApiConfig, AppState};
use wms_core::auth::{HashParams, TokenKey};
use wms_core::clock::{Clock, SystemClock};
use wms_core::domain::Role;
use wms_core::events::{self, EntityKind, EntityMap};
use wms_core::id::{Entropy, Id};
use wms_core::service::{Service, ServiceConfig};
use wms_core::store::{Store, StoreOptions};

pub const KEY: &[u8; 32] = b"test-signing-key-0123456789abcde";
pub const PASSWORD: &str = "password-123";

pub struct Account {
    pub id: String,
    pub email: String,
    pub token: String,
}

#[derive(Debug)]
pub struct Resp {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Bytes,
}

impl Resp {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("not json ({e}): {:?}", String::from_utf8_lossy(&self.body)))
    }

    pub fn code(&self) -> String {
        self.json()["error"]["code"].as_str().unwrap_or_default().to_string()
    }

    pub fn etag(&self) -> Option<String> {
        self.headers.get(header::ETAG).map(|v| v.to_str().unwrap().to_string())
    }
}

pub struct Harness {
    pub rt: tokio::runtime::Runtime,
    pub dir: TempDir,
    pub store: Arc<Store>,
    pub service: Arc<Service>,
    pub state: AppState,
    pub router: Router,
    pub admin: Account,
    pub user: Account,
}

pub struct Options {
    pub blob_limit: u64,
    pub heartbeat: Duration,
    pub clock: Arc<dyn Clock>,
}

impl Default for Options {
    fn default() -> Self {
        Options { blob_limit: 64 * 1024, heartbeat: Duration::from_secs(15), clock: Arc::new(SystemClock) }
    }
}

impl Harness {
    pub fn new() -> Self {
        Self::with(Options::default())
    }

    pub fn with(opts: Options) -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let store =
            Arc::new(Store::open_with(dir.path(), StoreOptions { blob_limit: opts.blob_limit, durable: false }).unwrap());
        let service = Arc::new(Service::new(
            store.clone(),
            opts.clock,
            Arc::new(Entropy::from_os()),
            ServiceConfig { hash_params: HashParams::insecure_fast(), ..ServiceConfig::default() },
        ));
        let state = AppState::new(service.clone(), TokenKey::new(*KEY).unwrap(), opts.heartbeat);
        let router = api::router(state.clone(), &ApiConfig { heartbeat: opts.heartbeat, ..ApiConfig::default() });
        let mut h = Harness {
            rt,
            dir,
            store,
            service,
            state,
            router,
            admin: Account { id: String::new(), email: String::new(), token: String::new() },
            user: Account { id: String::new(), email: String::new(), token: String::new() },
        };
        h.admin = h.account("Admin", "admin@example.com", Role::Admin);
        h.user = h.account("Uma User", "uma@example.com", Role::User);
        h
    }

    /// Creates an account directly and logs it in over HTTP.
    pub fn account(&self, name: &str, email: &str, role: Role) -> Account {
        let m = self.service.create_user(&Id::system(), name, email, PASSWORD, role).unwrap();
        let token = self.login(email, PASSWORD);
        Account { id: m.value.id.to_string(), email: email.to_string(), token }
    }

    pub fn login(&self, email: &str, password: &str) -> String {
        let r = self.json(Method::POST, "/api/auth/login", None, json!({ "email": email, "password": password }));
        assert_eq!(r.status, StatusCode::OK, "{:?}", r);
        r.json()["token"].as_str().unwrap().to_string()
    }

    pub fn send(&self, req: Request<Body>) -> Resp {
        let router = self.router.clone();
        self.rt.block_on(async move {
            let resp = router.oneshot(req).await.unwrap();
            let status = resp.status();
            let headers = resp.headers().clone();
            let body = resp.into_body().collect().await.unwrap().to_bytes();
            let text = String::from_utf8_lossy(&body);
            assert!(!text.contains("password_hash") && !text.contains("$argon2"), "credential leaked: {text}");
            Resp { status, headers, body }
        })
    }

    pub fn request(
        &self,
        method: Method,
        path: &str,
        token: Option<&str>,
        if_match: Option<u64>,
        body: Option<Value>,
    ) -> Resp {
        let mut b = Request::builder().method(method).uri(path);
        if let Some(t) = token {
            b = b.header(header::AUTHORIZATION, format!("Bearer {t}"));
        }
        if let Some(r) = if_match {
            b = b.header(header::IF_MATCH, r.to_string());
        }
        let req = match body {
            Some(v) => b.header(header::CONTENT_TYPE, "application/json").body(Body::from(v.to_string())).unwrap(),
            None => b.body(Body::empty()).unwrap(),
        };
        self.send(req)
    }

    pub fn get(&self, path: &str, token: &str) -> Resp {
        self.request(Method::GET, path, Some(token), None, None)
    }

    pub fn json(&self, method: Method, path: &str, token: Option<&str>, body: Value) -> Resp {
        self.request(method, path, token, None, Some(body))
    }

    pub fn patch(&self, path: &str, token: &str, if_match: u64, body: Value) -> Resp {
        self.request(Method::PATCH, path, Some(token), Some(if_match), Some(body))
    }

    pub fn delete(&self, path: &str, token: &str) -> Resp {
        self.request(Method::DELETE, path, Some(token), None, None)
    }

    pub fn post(&self, path: &str, token: &str) -> Resp {
        self.request(Method::POST, path, Some(token), None, None)
    }

    pub fn upload(&self, task_id: &str, token: &str, filename: &str, media_type: &str, bytes: &[u8]) -> Resp {
        self.send(multipart_request(&format!("/api/tasks/{task_id}/assets"), token, "file", filename, media_type, bytes))
    }

    /// Creates a task over HTTP and returns its JSON.
    pub fn create_task(&self, token: &str, body: Value) -> Value {
        let r = self.json(Method::POST, "/api/tasks", Some(token), body);
        assert_eq!(r.status, StatusCode::CREATED, "{:?}", r);
        r.json()
    }

    pub fn task(&self, token: &str, title: &str) -> Value {
        self.create_task(token, json!({ "title": title }))
    }

    pub fn last_seq(&self) -> u64 {
        self.store.events().last_seq()
    }

    /// Folding the whole log must reproduce the stored documents exactly.
    pub fn assert_replay(&self) {
        assert_replay_matches(&self.store);
    }
}

pub fn assert_replay_matches(store: &Store) {
    let log = store.events().read_all().unwrap();
    let replayed = events::replay(&log).unwrap();
    let state = store.state_map().unwrap();
    assert_eq!(replayed.len(), state.len(), "entity counts differ");
    for (k, v) in &state {
        assert_eq!(replayed.get(k), Some(v), "entity {k:?} differs");
    }
}

/// Server state as a client sees it: account snapshots without hashes.
pub fn redacted_state(store: &Store) -> EntityMap {
    let mut map = store.state_map().unwrap();
    for ((kind, _), v) in map.iter_mut() {
        if *kind == EntityKind::User {
            v.as_object_mut().unwrap().remove("password_hash");
        }
    }
    map
}

pub fn multipart_request(path: &str, token: &str, part: &str, filename: &str, media_type: &str, bytes: &[u8]) -> Request<Body> {
    let boundary = "XBOUNDARYx7MA4YWxkTrZu0gW";
    let mut body = Vec::new();
    body.extend_from_slice(
        format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"{part}\"; filename=\"{filename}\"\r\nContent-Type: {media_type}\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    Request::builder()
        .method(Method::POST)
        .uri(path)
        .header(header::AUTHORIZATION, format!("Bearer {token}"))
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SseFrame {
    pub event: Option<String>,
    pub id: Option<String>,
    pub data: String,
    pub comment: bool,
}

/// Incremental `text/event-stream` parser.
#[derive(Default)]
pub struct SseParser {
    buf: String,
}

impl SseParser {
    pub fn push(&mut self, chunk: &[u8]) -> Vec<SseFrame> {
        self.buf.push_str(&String::from_utf8_lossy(chunk));
        let mut out = Vec::new();
        while let Some(end) = self.buf.find("\n\n") {
            let block: String = self.buf.drain(..end + 2).collect();
            let mut f = SseFrame::default();
            let mut data = Vec::new();
            for line in block.lines() {
                if let Some(rest) = line.strip_prefix(':') {
                    let _ = rest;
                    f.comment = true;
                } else if let Some((k, v)) = line.split_once(':') {
                    let v = v.strip_prefix(' ').unwrap_or(v);
                    match k {
                        "event" => f.event = Some(v.to_string()),
                        "id" => f.id = Some(v.to_string()),
                        "data" => data.push(v.to_string()),
                        _ => {}
                    }
                }
            }
            f.data = data.join("\n");
            out.push(f);
        }
        out
    }
}

/// An open event stream.
pub struct EventStream {
    body: Body,
    parser: SseParser,
    pending: std::collections::VecDeque<SseFrame>,
    /// The server closed the stream.
    pub ended: bool,
}

impl EventStream {
    pub async fn open(router: &Router, token: &str, after_seq: u64) -> Result<EventStream, Resp> {
        let req = Request::builder()
            .uri(format!("/api/events?after_seq={after_seq}"))
            .header(header::AUTHORIZATION, format!("Bearer {token}"))
            .body(Body::empty())
            .unwrap();
        let resp = router.clone().oneshot(req).await.unwrap();
        if resp.status() != StatusCode::OK {
            let status = resp.status();
            let headers = resp.headers().clone();
            let body = resp.into_body().collect().await.unwrap().to_bytes();
            return Err(Resp { status, headers, body });
        }
        assert_eq!(resp.headers()[header::CONTENT_TYPE], "text/event-stream");
        Ok(EventStream { body: resp.into_body(), parser: SseParser::default(), pending: Default::default(), ended: false })
    }

    /// Next frame of any kind, or `None` on timeout or end of stream.
    pub async fn next_frame(&mut self, timeout: Duration) -> Option<SseFrame> {
        loop {
            if let Some(f) = self.pending.pop_front() {
                return Some(f);
            }
            match tokio::time::timeout(timeout, self.body.frame()).await {
                Ok(Some(Ok(frame))) => {
                    if let Some(data) = frame.data_ref() {
                        self.pending.extend(self.parser.push(data));
                    }
                }
                Ok(_) => {
                    self.ended = true;
                    return None;
                }
                Err(_) => return None,
            }
        }
    }

    /// Next mutation event, skipping heartbeats.
    pub async fn next_event(&mut self, timeout: Duration) -> Option<Value> {
        loop {
            let f = self.next_frame(timeout).await?;
            if f.event.as_deref() == Some("mutation") {
                let v: Value = serde_json::from_str(&f.data).unwrap();
                assert_eq!(f.id.as_deref(), Some(v["seq"].to_string().as_str()));
                return Some(v);
            }
        }
    }
}

/// Client-side mirror fed by the event stream, deduplicating by seq.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Mirror {
    pub last_seq: u64,
    pub map: EntityMap,
}

impl Mirror {
    pub fn apply(&mut self, e: &Value) {
        let seq = e["seq"].as_u64().unwrap();
        if seq <= self.last_seq {
            return;
        }
        assert_eq!(seq, self.last_seq + 1, "gap in delivered events");
        let ev: wms_core::events::MutationEvent = serde_json::from_value(e.clone()).unwrap();
        events::apply(&mut self.map, &ev);
        self.last_seq = seq;
    }
}

/// The `wms` binary with a clean `WMS_*` environment.
pub fn wms() -> std::process::Command {
    let mut c = std::process::Command::new(env!("CARGO_BIN_EXE_wms"));
    for (k, _) in std::env::vars() {
        if k.starts_with("WMS_") {
            c.env_remove(k);
        }
    }
    c.env("WMS_LOG", "warn");
    c
}

/// Every file under `root` with its bytes, by relative path.
pub fn dir_contents(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn go(root: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let e = e.unwrap();
            let p = e.path();
            if p.is_dir() {
                go(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = Default::default();
    go(root, root, &mut out);
    out
}
