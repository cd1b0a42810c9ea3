//! Scripted API scenarios. Each runs on a fresh harness; callers check the
//! replay oracle afterwards.

use std::collections::BTreeSet;

use axum::http::{header, Method, StatusCode};
use base64::Engine;
use serde_json::{json, Value};

use super::{multipart_request, Harness, PASSWORD};
use wms_core::dashboard;
use wms_core::domain::{Role, Task, UserAccount};

pub type Scenario = fn(&Harness);

pub const ALL: &[(&str, Scenario)] = &[
    ("login_and_me", login_and_me),
    ("unauthenticated_requests", unauthenticated_requests),
    ("create_and_get_task", create_and_get_task),
    ("create_validation", create_validation),
    ("patch_status", patch_status),
    ("patch_stale_revision", patch_stale_revision),
    ("patch_requires_if_match", patch_requires_if_match),
    ("patch_noop", patch_noop),
    ("patch_many_fields", patch_many_fields),
    ("all_status_transitions", all_status_transitions),
    ("trash_and_restore", trash_and_restore),
    ("trashed_task_is_frozen", trashed_task_is_frozen),
    ("purge", purge),
    ("asset_roundtrip", asset_roundtrip),
    ("asset_errors", asset_errors),
    ("listing_filters_and_pages", listing_filters_and_pages),
    ("dashboard_endpoints", dashboard_endpoints),
    ("team_administration", team_administration),
    ("deactivation_revokes_access", deactivation_revokes_access),
    ("idempotent_reads", idempotent_reads),
    ("error_shapes", error_shapes),
    ("export_endpoint", export_endpoint),
    ("event_stream_backlog_and_live", event_stream_backlog_and_live),
    ("concurrent_edits_one_winner", concurrent_edits_one_winner),
];

fn id_of(v: &Value) -> String {
    v["id"].as_str().unwrap().to_string()
}

fn rev_of(v: &Value) -> u64 {
    v["revision"].as_u64().unwrap()
}

fn error_body_ok(v: &Value) {
    let e = v["error"].as_object().expect("error envelope");
    assert!(e["code"].is_string() && e["message"].is_string());
    assert!(e.keys().all(|k| ["code", "message", "details"].contains(&k.as_str())), "{v}");
    assert_eq!(v.as_object().unwrap().len(), 1);
}

fn login_and_me(h: &Harness) {
    let r = h.json(Method::POST, "/api/auth/login", None, json!({ "email": "ADMIN@example.com", "password": PASSWORD }));
    assert_eq!(r.status, StatusCode::OK);
    let body = r.json();
    let token = body["token"].as_str().unwrap();
    let payload = token.split('.').nth(1).unwrap();
    let claims: Value =
        serde_json::from_slice(&base64::engine::general_purpose::URL_SAFE_NO_PAD.decode(payload).unwrap()).unwrap();
    assert_eq!(claims["sub"], h.admin.id.as_str());
    assert_eq!(claims["role"], "admin");
    assert_eq!(claims["exp"].as_i64().unwrap() - claims["iat"].as_i64().unwrap(), 8 * 3600);
    assert_eq!(body["account"]["id"], h.admin.id.as_str());

    let me = h.get("/api/me", token).json();
    assert_eq!(me["email"], "admin@example.com");
    assert!(me.get("password_hash").is_none());

    let wrong = h.json(Method::POST, "/api/auth/login", None, json!({ "email": "admin@example.com", "password": "nope-nope-nope" }));
    let unknown = h.json(Method::POST, "/api/auth/login", None, json!({ "email": "ghost@example.com", "password": PASSWORD }));
    assert_eq!(wrong.status, StatusCode::UNAUTHORIZED);
    assert_eq!(unknown.status, StatusCode::UNAUTHORIZED);
    assert_eq!(wrong.body, unknown.body);
    error_body_ok(&wrong.json());
}

fn unauthenticated_requests(h: &Harness) {
    let seq = h.last_seq();
    for (m, p) in [
        (Method::GET, "/api/me"),
        (Method::GET, "/api/tasks"),
        (Method::POST, "/api/tasks"),
        (Method::GET, "/api/trash"),
        (Method::GET, "/api/dashboard/summary"),
        (Method::GET, "/api/team"),
        (Method::GET, "/api/events"),
    ] {
        let r = h.request(m.clone(), p, None, None, None);
        assert_eq!(r.status, StatusCode::UNAUTHORIZED, "{m} {p}");
        assert_eq!(r.code(), "unauthorized");
        let r = h.request(m.clone(), p, Some("not.a.token"), None, None);
        assert_eq!(r.status, StatusCode::UNAUTHORIZED, "{m} {p}");
    }
    // alg=none with a valid-looking payload
    let b64 = |s: &str| base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(s);
    let forged = format!(
        "{}.{}.",
        b64(r#"{"alg":"none","typ":"JWT"}"#),
        b64(&format!(r#"{{"sub":"{}","role":"admin","iat":0,"exp":99999999999,"jti":"x"}}"#, h.user.id))
    );
    assert_eq!(h.get("/api/me", &forged).status, StatusCode::UNAUTHORIZED);
    let health = h.request(Method::GET, "/api/health", None, None, None);
    assert_eq!(health.status, StatusCode::OK);
    assert_eq!(health.json(), json!({ "status": "ok", "last_event_seq": seq }));
    assert_eq!(h.last_seq(), seq);
}

fn create_and_get_task(h: &Harness) {
    let seq = h.last_seq();
    let r = h.json(
        Method::POST,
        "/api/tasks",
        Some(&h.user.token),
        json!({ "title": "  Fix login bug ", "priority": "high", "assignee_ids": [h.user.id], "due_date": "2025-04-01" }),
    );
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(r.etag().as_deref(), Some("\"1\""));
    let t = r.json();
    assert_eq!(t["title"], "Fix login bug");
    assert_eq!(t["status"], "todo");
    assert_eq!(t["priority"], "high");
    assert_eq!(t["revision"], 1);
    assert_eq!(t["trashed"], false);
    assert_eq!(t["created_by"], h.user.id.as_str());
    assert_eq!(t["due_date"], "2025-04-01");
    assert_eq!(t["created_at"], t["updated_at"]);
    assert_eq!(t["activity"].as_array().unwrap().len(), 1);
    assert_eq!(t["activity"][0]["kind"], "created");
    assert_eq!(id_of(&t).len(), 26);
    assert_eq!(h.last_seq(), seq + 1);

    let got = h.get(&format!("/api/tasks/{}", id_of(&t)), &h.admin.token);
    assert_eq!(got.status, StatusCode::OK);
    assert_eq!(got.json(), t);
    let act = h.get(&format!("/api/tasks/{}/activity", id_of(&t)), &h.admin.token).json();
    assert_eq!(act, t["activity"]);
    let ev = h.store.events().read_since(seq, 10).unwrap();
    assert_eq!(ev[0].snapshot.as_ref().unwrap(), &t);
}

fn create_validation(h: &Harness) {
    let seq = h.last_seq();
    let r = h.json(Method::POST, "/api/tasks", Some(&h.user.token), json!({ "title": "   " }));
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.code(), "validation");
    assert!(r.json()["error"]["details"]["title"].is_string());
    let r = h.json(Method::POST, "/api/tasks", Some(&h.user.token), json!({ "title": "x".repeat(201) }));
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = h.json(Method::POST, "/api/tasks", Some(&h.user.token), json!({ "title": "t", "description": "d".repeat(10_001) }));
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = h.json(Method::POST, "/api/tasks", Some(&h.user.token), json!({ "title": "t", "priority": "urgent" }));
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = h.json(Method::POST, "/api/tasks", Some(&h.user.token), json!({ "title": "t", "assignee_ids": ["01ARZ3NDEKTSV4RRFFQ69G5FAV"] }));
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(r.json()["error"]["details"]["assignee_ids"].is_string());
    let raw = axum::http::Request::builder()
        .method(Method::POST)
        .uri("/api/tasks")
        .header(header::AUTHORIZATION, format!("Bearer {}", h.user.token))
        .header(header::CONTENT_TYPE, "text/plain")
        .body(axum::body::Body::from(r#"{"title":"t"}"#))
        .unwrap();
    let r = h.send(raw);
    assert_eq!(r.status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    assert_eq!(h.last_seq(), seq, "failed requests append nothing");
    h.task(&h.user.token, &"x".repeat(200));
    assert_eq!(h.last_seq(), seq + 1);
}

fn patch_status(h: &Harness) {
    let t = h.task(&h.user.token, "move me");
    let seq = h.last_seq();
    let r = h.patch(&format!("/api/tasks/{}", id_of(&t)), &h.user.token, 1, json!({ "status": "in_progress" }));
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.etag().as_deref(), Some("\"2\""));
    let v = r.json();
    assert_eq!(v["status"], "in_progress");
    assert_eq!(v["revision"], 2);
    let last = v["activity"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(last["kind"], "status_changed");
    assert_eq!(last["detail"], "todo→in_progress");
    assert_eq!(last["actor_id"], h.user.id.as_str());
    assert_eq!(h.last_seq(), seq + 1);
    // quoted If-Match also accepted
    let r = h.send(
        axum::http::Request::builder()
            .method(Method::PATCH)
            .uri(format!("/api/tasks/{}", id_of(&t)))
            .header(header::AUTHORIZATION, format!("Bearer {}", h.user.token))
            .header(header::IF_MATCH, "\"2\"")
            .header(header::CONTENT_TYPE, "application/json")
            .body(axum::body::Body::from(r#"{"status":"done"}"#))
            .unwrap(),
    );
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["revision"], 3);
}

fn patch_stale_revision(h: &Harness) {
    let t = h.task(&h.user.token, "contested");
    let path = format!("/api/tasks/{}", id_of(&t));
    assert_eq!(h.patch(&path, &h.admin.token, 1, json!({ "priority": "high" })).status, StatusCode::OK);
    let seq = h.last_seq();
    let r = h.patch(&path, &h.user.token, 1, json!({ "priority": "low" }));
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.code(), "stale_revision");
    assert_eq!(r.json()["error"]["details"]["current_revision"], 2);
    assert_eq!(h.last_seq(), seq);
    assert_eq!(h.get(&path, &h.user.token).json()["priority"], "high");
    let r = h.patch(&path, &h.user.token, 9, json!({ "priority": "low" }));
    assert_eq!(r.status, StatusCode::CONFLICT);
}

fn patch_requires_if_match(h: &Harness) {
    let t = h.task(&h.user.token, "guarded");
    let seq = h.last_seq();
    let path = format!("/api/tasks/{}", id_of(&t));
    let r = h.request(Method::PATCH, &path, Some(&h.user.token), None, Some(json!({ "status": "done" })));
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(r.json()["error"]["details"]["If-Match"].is_string());
    let r = h.patch(&path, &h.user.token, 1, json!({ "colour": "red" }));
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.last_seq(), seq);
}

fn patch_noop(h: &Harness) {
    let t = h.task(&h.user.token, "idle");
    let seq = h.last_seq();
    let path = format!("/api/tasks/{}", id_of(&t));
    let r = h.patch(&path, &h.user.token, 1, json!({ "status": "todo", "title": "idle", "assignee_ids": [] }));
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json(), t);
    let r = h.patch(&path, &h.user.token, 1, json!({}));
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(h.last_seq(), seq);
}

fn patch_many_fields(h: &Harness) {
    let t = h.task(&h.user.token, "bundle");
    let path = format!("/api/tasks/{}", id_of(&t));
    let r = h.patch(
        &path,
        &h.user.token,
        1,
        json!({ "title": "bundle v2", "priority": "low", "assignee_ids": [h.user.id, h.admin.id], "due_date": "2025-05-05" }),
    );
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["revision"], 2);
    let kinds: Vec<&str> = v["activity"].as_array().unwrap().iter().map(|a| a["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["created", "edited", "priority_changed", "assigned"]);
    let r = h.patch(&path, &h.user.token, 2, json!({ "assignee_ids": [], "due_date": null }));
    let v = r.json();
    assert_eq!(v["assignee_ids"], json!([]));
    assert!(v["due_date"].is_null());
    let detail = v["activity"].as_array().unwrap().last().unwrap()["detail"].as_str().unwrap().to_string();
    assert!(detail.contains(&h.user.id) && detail.contains(&h.admin.id), "{detail}");
}

fn all_status_transitions(h: &Harness) {
    let states = ["todo", "in_progress", "done"];
    for from in states {
        for to in states {
            let t = h.task(&h.user.token, &format!("{from}->{to}"));
            let path = format!("/api/tasks/{}", id_of(&t));
            let mut rev = 1;
            if from != "todo" {
                rev = rev_of(&h.patch(&path, &h.user.token, 1, json!({ "status": from })).json());
            }
            let seq = h.last_seq();
            let r = h.patch(&path, &h.user.token, rev, json!({ "status": to }));
            assert_eq!(r.status, StatusCode::OK, "{from}->{to}");
            let v = r.json();
            assert_eq!(v["status"], to);
            let bumped = u64::from(from != to);
            assert_eq!(rev_of(&v), rev + bumped);
            assert_eq!(h.last_seq(), seq + bumped);
        }
    }
}

fn trash_and_restore(h: &Harness) {
    let t = h.task(&h.user.token, "oops");
    let id = id_of(&t);
    let path = format!("/api/tasks/{id}");
    h.patch(&path, &h.user.token, 1, json!({ "status": "in_progress", "priority": "high", "assignee_ids": [h.user.id] }));
    let before = h.get(&path, &h.user.token).json();

    let r = h.delete(&path, &h.user.token);
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["trashed"], true);
    let board = h.get("/api/tasks", &h.user.token).json();
    assert!(board["items"].as_array().unwrap().iter().all(|x| x["id"] != id.as_str()));
    let trash = h.get("/api/trash", &h.user.token).json();
    assert_eq!(trash["total_count"], 1);
    assert_eq!(trash["items"][0]["id"], id.as_str());

    let r = h.delete(&path, &h.user.token);
    assert_eq!((r.status, r.code().as_str()), (StatusCode::CONFLICT, "invalid_state"));

    let r = h.post(&format!("/api/trash/{id}/restore"), &h.user.token);
    assert_eq!(r.status, StatusCode::OK);
    let after = r.json();
    for f in ["status", "priority", "assignee_ids", "title", "description", "asset_refs", "due_date", "trashed"] {
        assert_eq!(after[f], before[f], "{f}");
    }
    assert_eq!(rev_of(&after), rev_of(&before) + 2);
    let r = h.post(&format!("/api/trash/{id}/restore"), &h.user.token);
    assert_eq!((r.status, r.code().as_str()), (StatusCode::CONFLICT, "invalid_state"));
    // If-Match is honoured when given
    let r = h.request(Method::DELETE, &path, Some(&h.user.token), Some(1), None);
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.code(), "stale_revision");
}

fn trashed_task_is_frozen(h: &Harness) {
    let t = h.task(&h.user.token, "frozen");
    let path = format!("/api/tasks/{}", id_of(&t));
    h.delete(&path, &h.user.token);
    let seq = h.last_seq();
    let r = h.patch(&path, &h.user.token, 2, json!({ "status": "done" }));
    assert_eq!((r.status, r.code().as_str()), (StatusCode::CONFLICT, "invalid_state"));
    let r = h.upload(&id_of(&t), &h.user.token, "a.txt", "text/plain", b"hi");
    assert_eq!((r.status, r.code().as_str()), (StatusCode::CONFLICT, "invalid_state"));
    assert_eq!(h.last_seq(), seq);
}

fn purge(h: &Harness) {
    let t = h.task(&h.user.token, "doomed");
    let id = id_of(&t);
    let seq = h.last_seq();
    assert_eq!(h.delete(&format!("/api/trash/{id}"), &h.admin.token).status, StatusCode::CONFLICT);
    h.delete(&format!("/api/tasks/{id}"), &h.user.token);
    let r = h.delete(&format!("/api/trash/{id}"), &h.user.token);
    assert_eq!((r.status, r.code().as_str()), (StatusCode::FORBIDDEN, "forbidden"));
    assert_eq!(h.last_seq(), seq + 1);
    let r = h.delete(&format!("/api/trash/{id}"), &h.admin.token);
    assert_eq!(r.status, StatusCode::NO_CONTENT);
    assert_eq!(h.last_seq(), seq + 2);
    let ev = h.store.events().read_since(seq + 1, 1).unwrap().remove(0);
    assert_eq!(ev.op_kind, wms_core::events::OpKind::HardDelete);
    assert!(ev.snapshot.is_none());
    assert_eq!(h.get(&format!("/api/tasks/{id}"), &h.admin.token).status, StatusCode::NOT_FOUND);
    assert_eq!(h.delete(&format!("/api/trash/{id}"), &h.admin.token).status, StatusCode::NOT_FOUND);
}

fn png_bytes(len: usize) -> Vec<u8> {
    let mut b = vec![0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
    b.extend((0..len - 8).map(|i| (i * 31 % 251) as u8));
    b
}

fn asset_roundtrip(h: &Harness) {
    let t = h.task(&h.user.token, "with files");
    let id = id_of(&t);
    let bytes = png_bytes(1024);
    let seq = h.last_seq();
    let r = h.upload(&id, &h.user.token, "../../shot \"1\".png", "image/png", &bytes);
    assert_eq!(r.status, StatusCode::CREATED, "{:?}", r);
    let a = r.json();
    assert_eq!(a["size_bytes"], 1024);
    assert_eq!(a["media_type"], "image/png");
    assert_eq!(a["task_revision"], 2);
    assert_eq!(a["content_hash"].as_str().unwrap().len(), 64);
    let fname = a["filename"].as_str().unwrap();
    assert!(!fname.contains('/') && !fname.contains(".."), "{fname}");
    assert_eq!(h.last_seq(), seq + 1);
    let dl = h.get(a["download_path"].as_str().unwrap(), &h.admin.token);
    assert_eq!(dl.status, StatusCode::OK);
    assert_eq!(dl.body.as_ref(), bytes.as_slice());
    assert_eq!(dl.headers[header::CONTENT_TYPE], "image/png");

    let b = h.upload(&id, &h.user.token, "again.png", "image/png", &bytes).json();
    assert_eq!(b["content_hash"], a["content_hash"]);
    assert_ne!(b["id"], a["id"]);
    let task = h.get(&format!("/api/tasks/{id}"), &h.user.token).json();
    assert_eq!(task["asset_refs"].as_array().unwrap().len(), 2);
    assert_eq!(task["activity"].as_array().unwrap().last().unwrap()["kind"], "asset_added");
    assert_eq!(h.store.verify_blobs().unwrap(), 1);
}

fn asset_errors(h: &Harness) {
    let t = h.task(&h.user.token, "limits");
    let id = id_of(&t);
    let limit = h.store.blob_limit() as usize;
    let seq = h.last_seq();
    let r = h.upload(&id, &h.user.token, "big.bin", "application/octet-stream", &vec![7u8; limit + 1]);
    assert_eq!((r.status, r.code().as_str()), (StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large"));
    let r = h.upload(&id, &h.user.token, "huge.bin", "application/octet-stream", &vec![7u8; limit + 200 * 1024]);
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(h.get(&format!("/api/tasks/{id}"), &h.user.token).json(), t);
    let r = h.send(multipart_request(&format!("/api/tasks/{id}/assets"), &h.user.token, "other", "a.txt", "text/plain", b"x"));
    assert_eq!((r.status, r.code().as_str()), (StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_media_type"));
    let r = h.request(Method::POST, &format!("/api/tasks/{id}/assets"), Some(&h.user.token), None, Some(json!({})));
    assert_eq!(r.status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    let r = h.upload("01ARZ3NDEKTSV4RRFFQ69G5FAV", &h.user.token, "a.txt", "text/plain", b"x");
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = h.upload(&id, &h.user.token, "empty.txt", "text/plain", b"");
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.last_seq(), seq);
    let r = h.upload(&id, &h.user.token, "exact.bin", "application/octet-stream", &vec![1u8; limit]);
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(h.get("/api/assets/01ARZ3NDEKTSV4RRFFQ69G5FAV", &h.user.token).status, StatusCode::NOT_FOUND);
}

fn listing_filters_and_pages(h: &Harness) {
    let statuses = ["todo", "in_progress", "done"];
    let prios = ["high", "medium", "low"];
    let mut made = Vec::new();
    for i in 0..10 {
        let assignees = if i % 2 == 0 { json!([h.user.id]) } else { json!([]) };
        let t = h.create_task(&h.user.token, json!({ "title": format!("t{i}"), "priority": prios[i % 3], "assignee_ids": assignees }));
        let t = if i % 3 != 0 {
            h.patch(&format!("/api/tasks/{}", id_of(&t)), &h.user.token, 1, json!({ "status": statuses[i % 3] })).json()
        } else {
            t
        };
        made.push(t);
    }
    for i in [1, 4, 7] {
        h.delete(&format!("/api/tasks/{}", id_of(&made[i])), &h.user.token);
    }
    let live: Vec<&Value> = made.iter().enumerate().filter(|(i, _)| ![1, 4, 7].contains(i)).map(|(_, t)| t).collect();
    assert_eq!(live.len(), 7);

    let page = h.get("/api/tasks?offset=0&limit=5", &h.user.token).json();
    assert_eq!(page["total_count"], 7);
    assert_eq!(page["items"].as_array().unwrap().len(), 5);
    assert_eq!((page["offset"].as_u64(), page["limit"].as_u64()), (Some(0), Some(5)));
    let rest = h.get("/api/tasks?offset=5&limit=5", &h.user.token).json();
    let mut ids: Vec<String> = page["items"].as_array().unwrap().iter().chain(rest["items"].as_array().unwrap()).map(id_of).collect();
    let expected: Vec<String> = live.iter().map(|t| id_of(t)).collect();
    assert_eq!(ids, expected, "ordered by creation");
    ids.sort();
    assert_eq!(h.get("/api/tasks?offset=50", &h.user.token).json()["items"], json!([]));

    for s in statuses {
        let got = h.get(&format!("/api/tasks?status={s}"), &h.user.token).json();
        let want = live.iter().filter(|t| h.get(&format!("/api/tasks/{}", id_of(t)), &h.user.token).json()["status"] == s).count();
        assert_eq!(got["total_count"], want, "{s}");
    }
    let got = h.get(&format!("/api/tasks?priority=high&assignee={}", h.user.id), &h.user.token).json();
    let want = live
        .iter()
        .filter(|t| t["priority"] == "high" && t["assignee_ids"].as_array().unwrap().iter().any(|a| a == h.user.id.as_str()))
        .count();
    assert_eq!(got["total_count"], want);
    for bad in ["limit=0", "limit=501", "status=blocked", "offset=-1", "assignee=nope"] {
        let r = h.get(&format!("/api/tasks?{bad}"), &h.user.token);
        assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
    }
    assert_eq!(h.get("/api/tasks?limit=500", &h.user.token).status, StatusCode::OK);
    assert_eq!(h.get("/api/trash", &h.user.token).json()["total_count"], 3);
}

fn dashboard_endpoints(h: &Harness) {
    let extra = h.account("Zed", "zed@example.com", Role::User);
    for (i, (status, prio)) in [("done", "high"), ("done", "low"), ("in_progress", "medium"), ("todo", "high"), ("todo", "low")]
        .into_iter()
        .enumerate()
    {
        let assignees = match i {
            0 => json!([h.user.id, extra.id]),
            1 | 2 => json!([h.user.id]),
            _ => json!([]),
        };
        let t = h.create_task(&h.admin.token, json!({ "title": format!("d{i}"), "priority": prio, "assignee_ids": assignees }));
        if status != "todo" {
            h.patch(&format!("/api/tasks/{}", id_of(&t)), &h.admin.token, 1, json!({ "status": status }));
        }
    }
    let t = h.task(&h.admin.token, "binned");
    h.delete(&format!("/api/tasks/{}", id_of(&t)), &h.admin.token);

    let tasks: Vec<Task> = h.store.scan().unwrap();
    let users: Vec<UserAccount> = h.store.scan().unwrap();
    let summary = h.get("/api/dashboard/summary", &h.user.token).json();
    assert_eq!(summary, serde_json::to_value(dashboard::summary(&tasks)).unwrap());
    assert_eq!(summary["total_tasks"], 5);
    assert_eq!(summary["done_count"], 2);
    assert_eq!(summary["completion_ratio"], 0.4);
    let workload = h.get("/api/dashboard/workload", &h.user.token).json();
    assert_eq!(workload, serde_json::to_value(dashboard::workload_by_assignee(&tasks, &users)).unwrap());
    assert_eq!(workload[0]["assignee_id"], h.user.id.as_str());
    assert_eq!(workload[0]["total"], 3);
    let unassigned = workload.as_array().unwrap().iter().find(|r| r["assignee_id"].is_null()).unwrap();
    assert_eq!(unassigned["total"], 2);
    let prio = h.get("/api/dashboard/priority", &h.user.token).json();
    assert_eq!(prio, json!({ "high_count": 2, "medium_count": 1, "low_count": 2 }));
    let act = h.get("/api/dashboard/activity?n=4", &h.user.token).json();
    assert_eq!(act, serde_json::to_value(dashboard::recent_activity(&tasks, 4).unwrap()).unwrap());
    assert_eq!(act.as_array().unwrap().len(), 4);
    assert!(act.as_array().unwrap().iter().all(|a| a["task_title"] != "binned"));
    assert_eq!(h.get("/api/dashboard/activity?n=0", &h.user.token).status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.get("/api/dashboard/activity?n=101", &h.user.token).status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.get("/api/dashboard/activity", &h.user.token).status, StatusCode::OK);
}

fn team_administration(h: &Harness) {
    let seq = h.last_seq();
    let body = json!({ "name": "Newt", "email": "Newt@Example.com", "password": "long-enough", "role": "user" });
    let r = h.json(Method::POST, "/api/team", Some(&h.user.token), body.clone());
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = h.json(Method::POST, "/api/team", Some(&h.admin.token), body.clone());
    assert_eq!(r.status, StatusCode::CREATED);
    let newt = r.json();
    assert_eq!(newt["email"], "newt@example.com");
    assert_eq!(newt["active"], true);
    let r = h.json(Method::POST, "/api/team", Some(&h.admin.token), json!({ "name": "Dup", "email": "NEWT@example.com", "password": "long-enough" }));
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(r.json()["error"]["details"]["email"].is_string());
    let r = h.json(Method::POST, "/api/team", Some(&h.admin.token), json!({ "name": "Short", "email": "s@example.com", "password": "short" }));
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = h.json(Method::POST, "/api/team", Some(&h.admin.token), json!({ "name": "Bad", "email": "not-an-email", "password": "long-enough" }));
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.last_seq(), seq + 1);

    let team = h.get("/api/team", &h.user.token).json();
    assert_eq!(team.as_array().unwrap().len(), 3);

    let path = format!("/api/team/{}", id_of(&newt));
    let r = h.request(Method::PATCH, &path, Some(&h.user.token), None, Some(json!({ "role": "admin" })));
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = h.request(Method::PATCH, &path, Some(&h.admin.token), Some(1), Some(json!({ "role": "admin" })));
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["role"], "admin");
    assert_eq!(r.json()["revision"], 2);
    let r = h.request(Method::PATCH, &path, Some(&h.admin.token), Some(1), Some(json!({ "active": false })));
    assert_eq!(r.code(), "stale_revision");

    // demote both admins: the second demotion is refused
    let r = h.request(Method::PATCH, &path, Some(&h.admin.token), None, Some(json!({ "role": "user" })));
    assert_eq!(r.status, StatusCode::OK);
    let r = h.request(Method::PATCH, &format!("/api/team/{}", h.admin.id), Some(&h.admin.token), None, Some(json!({ "role": "user" })));
    assert_eq!((r.status, r.code().as_str()), (StatusCode::CONFLICT, "invalid_state"));
    let r = h.request(Method::PATCH, &format!("/api/team/{}", h.admin.id), Some(&h.admin.token), None, Some(json!({ "active": false })));
    assert_eq!(r.status, StatusCode::CONFLICT);
}

fn deactivation_revokes_access(h: &Harness) {
    let path = format!("/api/team/{}", h.user.id);
    let old_token = h.user.token.clone();
    assert_eq!(h.get("/api/me", &old_token).status, StatusCode::OK);
    let r = h.request(Method::PATCH, &path, Some(&h.admin.token), None, Some(json!({ "active": false })));
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(h.get("/api/me", &old_token).status, StatusCode::UNAUTHORIZED);
    let r = h.json(Method::POST, "/api/auth/login", None, json!({ "email": h.user.email, "password": PASSWORD }));
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    // an inactive account cannot be newly assigned
    let r = h.json(Method::POST, "/api/tasks", Some(&h.admin.token), json!({ "title": "t", "assignee_ids": [h.user.id] }));
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = h.request(Method::PATCH, &path, Some(&h.admin.token), None, Some(json!({ "active": true })));
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(h.get("/api/me", &old_token).status, StatusCode::OK);
    // a role change takes effect on the next request, not at next login
    h.request(Method::PATCH, &path, Some(&h.admin.token), None, Some(json!({ "role": "admin" })));
    assert_eq!(h.get("/api/admin/export", &old_token).status, StatusCode::OK);
}

fn idempotent_reads(h: &Harness) {
    let t = h.task(&h.user.token, "stable");
    h.upload(&id_of(&t), &h.user.token, "f.txt", "text/plain", b"content");
    for p in [
        "/api/tasks".to_string(),
        format!("/api/tasks/{}", id_of(&t)),
        format!("/api/tasks/{}/activity", id_of(&t)),
        "/api/trash".into(),
        "/api/dashboard/summary".into(),
        "/api/dashboard/workload".into(),
        "/api/dashboard/priority".into(),
        "/api/dashboard/activity?n=50".into(),
        "/api/team".into(),
        "/api/me".into(),
    ] {
        let a = h.get(&p, &h.user.token);
        let b = h.get(&p, &h.user.token);
        assert_eq!(a.status, StatusCode::OK, "{p}");
        assert_eq!(a.body, b.body, "{p}");
    }
}

fn error_shapes(h: &Harness) {
    for r in [
        h.get("/api/nowhere", &h.user.token),
        h.get("/api/tasks/not-an-id", &h.user.token),
        h.get("/api/tasks/01ARZ3NDEKTSV4RRFFQ69G5FAV", &h.user.token),
        h.request(Method::PUT, "/api/tasks", Some(&h.user.token), None, None),
        h.request(Method::POST, "/api/tasks", Some(&h.user.token), None, None),
        h.request(Method::POST, "/api/auth/login", None, None, Some(json!({ "email": 1 }))),
    ] {
        assert!(r.status.is_client_error(), "{:?}", r);
        error_body_ok(&r.json());
        let code = r.code();
        assert_eq!(wms_core::api::error_codes()[code.as_str()], r.status.as_u16(), "{code}");
    }
    assert_eq!(h.get("/api/tasks/not-an-id", &h.user.token).status, StatusCode::NOT_FOUND);
    assert_eq!(h.request(Method::PUT, "/api/tasks", Some(&h.user.token), None, None).status, StatusCode::METHOD_NOT_ALLOWED);
}

fn export_endpoint(h: &Harness) {
    h.task(&h.user.token, "archived");
    assert_eq!(h.get("/api/admin/export", &h.user.token).status, StatusCode::FORBIDDEN);
    let r = h.get("/api/admin/export", &h.admin.token);
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers[header::CONTENT_TYPE], "application/gzip");
    let dir = tempfile::tempdir().unwrap();
    let sum = wms_core::store::import_snapshot_from(dir.path(), r.body.as_ref(), Default::default()).unwrap();
    assert_eq!((sum.tasks, sum.users, sum.events), (1, 2, h.last_seq()));
    let copy = wms_core::store::Store::open(dir.path()).unwrap();
    assert_eq!(copy.state_map().unwrap(), h.store.state_map().unwrap());
}

fn event_stream_backlog_and_live(h: &Harness) {
    use std::time::Duration;
    use super::EventStream;
    for i in 0..3 {
        h.task(&h.user.token, &format!("e{i}"));
    }
    let n = h.last_seq();
    assert_eq!(n, 5, "two accounts and three tasks");
    let router = h.router.clone();
    let token = h.user.token.clone();
    let mut s = h.rt.block_on(EventStream::open(&router, &token, 0)).unwrap();
    let backlog: Vec<Value> = (0..n).map(|_| h.rt.block_on(s.next_event(Duration::from_secs(2))).unwrap()).collect();
    assert_eq!(backlog.iter().map(|e| e["seq"].as_u64().unwrap()).collect::<Vec<_>>(), (1..=n).collect::<Vec<_>>());
    assert!(backlog.iter().filter(|e| e["entity_kind"] == "user").all(|e| e["snapshot"].get("password_hash").is_none()));
    assert!(h.rt.block_on(s.next_event(Duration::from_millis(200))).is_none(), "silence after backlog");

    let t = h.task(&h.admin.token, "live");
    let live = h.rt.block_on(s.next_event(Duration::from_secs(2))).unwrap();
    assert_eq!(live["seq"], n + 1);
    assert_eq!(live["snapshot"], t);
    assert_eq!(live["actor_id"], h.admin.id.as_str());
    drop(s);

    h.task(&h.admin.token, "while away");
    let mut s = h.rt.block_on(EventStream::open(&router, &token, n + 1)).unwrap();
    let e = h.rt.block_on(s.next_event(Duration::from_secs(2))).unwrap();
    assert_eq!(e["seq"], n + 2);
    assert!(h.rt.block_on(s.next_event(Duration::from_millis(200))).is_none());

    // Last-Event-ID from a reconnecting browser wins over a lower after_seq
    let req = axum::http::Request::builder()
        .uri(format!("/api/events?access_token={token}"))
        .header("last-event-id", (n + 1).to_string())
        .body(axum::body::Body::empty())
        .unwrap();
    let resp = h.rt.block_on(tower::ServiceExt::oneshot(router.clone(), req)).unwrap();
    assert_eq!(resp.status(), StatusCode::OK);

    let r = h.rt.block_on(EventStream::open(&router, "bogus", 0)).err().unwrap();
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    let user_ids: BTreeSet<String> = backlog.iter().filter(|e| e["entity_kind"] == "user").map(|e| e["entity_id"].as_str().unwrap().into()).collect();
    assert_eq!(user_ids, BTreeSet::from([h.admin.id.clone(), h.user.id.clone()]));
}

fn concurrent_edits_one_winner(h: &Harness) {
    let t = h.task(&h.user.token, "race");
    let path = format!("/api/tasks/{}", id_of(&t));
    for round in 0..10u64 {
        let rev = 1 + round;
        let seq = h.last_seq();
        let mk = |token: &str, status: &str| {
            axum::http::Request::builder()
                .method(Method::PATCH)
                .uri(&path)
                .header(header::AUTHORIZATION, format!("Bearer {token}"))
                .header(header::IF_MATCH, rev.to_string())
                .header(header::CONTENT_TYPE, "application/json")
                .body(axum::body::Body::from(json!({ "title": format!("race {round} {status}") }).to_string()))
                .unwrap()
        };
        let (a, b) = (mk(&h.user.token, "a"), mk(&h.admin.token, "b"));
        let (ra, rb) = h.rt.block_on(async {
            let (ra, rb) = tokio::join!(
                tower::ServiceExt::oneshot(h.router.clone(), a),
                tower::ServiceExt::oneshot(h.router.clone(), b)
            );
            (ra.unwrap(), rb.unwrap())
        });
        let mut statuses = [ra.status(), rb.status()];
        statuses.sort();
        assert_eq!(statuses, [StatusCode::OK, StatusCode::CONFLICT], "round {round}");
        let loser = if ra.status() == StatusCode::CONFLICT { ra } else { rb };
        let body = h.rt.block_on(http_body_util::BodyExt::collect(loser.into_body())).unwrap().to_bytes();
        let v: Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(v["error"]["code"], "stale_revision");
        assert_eq!(v["error"]["details"]["current_revision"], rev + 1);
        assert_eq!(h.last_seq(), seq + 1, "exactly one event");
    }
}

/// Sends one request per (role, action) pair and compares the outcome with
/// the documented matrix. Returns `(role, action, allowed_by_matrix, status)`.
pub fn probe_policy(h: &Harness) -> Vec<(Role, wms_core::auth::Action, bool, StatusCode)> {
    use wms_core::auth::{authorize, Action, Decision};
    let spare_a = h.account("Spare A", "spare-a@example.com", Role::User);
    let spare_b = h.account("Spare B", "spare-b@example.com", Role::User);
    let mut out = Vec::new();
    for (role, token) in [(Role::Admin, h.admin.token.clone()), (Role::User, h.user.token.clone())] {
        for (i, &action) in Action::ALL.iter().enumerate() {
            let t = h.task(&h.admin.token, &format!("probe {i}"));
            let id = id_of(&t);
            let trashed = || {
                h.delete(&format!("/api/tasks/{id}"), &h.admin.token);
            };
            let r = match action {
                Action::TaskRead => h.get(&format!("/api/tasks/{id}"), &token),
                Action::TaskCreate => h.json(Method::POST, "/api/tasks", Some(&token), json!({ "title": "p" })),
                Action::TaskEdit => h.patch(&format!("/api/tasks/{id}"), &token, 1, json!({ "status": "done" })),
                Action::TaskTrash => h.delete(&format!("/api/tasks/{id}"), &token),
                Action::TaskRestore => {
                    trashed();
                    h.post(&format!("/api/trash/{id}/restore"), &token)
                }
                Action::TrashPurge => {
                    trashed();
                    h.delete(&format!("/api/trash/{id}"), &token)
                }
                Action::AssetUpload => h.upload(&id, &token, "p.txt", "text/plain", b"probe"),
                Action::DashboardRead => h.get("/api/dashboard/summary", &token),
                Action::UserList => h.get("/api/team", &token),
                Action::UserCreate => h.json(
                    Method::POST,
                    "/api/team",
                    Some(&token),
                    json!({ "name": "P", "email": format!("p-{role}@example.com"), "password": "long-enough" }),
                ),
                Action::UserEditRole => h.request(
                    Method::PATCH,
                    &format!("/api/team/{}", spare_a.id),
                    Some(&token),
                    None,
                    Some(json!({ "role": if role == Role::Admin { "admin" } else { "user" } })),
                ),
                Action::UserDeactivate => h.request(
                    Method::PATCH,
                    &format!("/api/team/{}", spare_b.id),
                    Some(&token),
                    None,
                    Some(json!({ "active": role != Role::Admin })),
                ),
                Action::ExportImport => h.get("/api/admin/export", &token),
            };
            out.push((role, action, authorize(role, action) == Decision::Allow, r.status));
        }
    }
    out
}

/// A probe matches when allowed pairs succeed and denied pairs get 403.
pub fn probe_matches(allowed: bool, status: StatusCode) -> bool {
    if allowed {
        status.is_success()
    } else {
        status == StatusCode::FORBIDDEN
    }
}
