//! Read-only HTTP/JSON view of the message store.
//!
//! | route | body |
//! |---|---|
//! | `GET /health` | `{"status":"ok","uptime_s":N}` |
//! | `GET /api/topics` | summaries sorted by topic |
//! | `GET /api/topics/{topic}/latest` | the raw latest payload |
//! | `GET /api/topics/{topic}/history?limit=N` | last N records, oldest first |
//!
//! Topics are percent-encoded in paths (`sensors%2Fnode1%2Fdata`). Errors
//! are `{"error": "..."}`.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine;
use serde_json::{json, Map, Value};

use crate::persistence::{LogRecord, MessageStore};

pub const DEFAULT_HISTORY_LIMIT: usize = 100;
pub const MAX_HISTORY_LIMIT: usize = 10_000;

#[derive(Clone)]
struct AppState {
    store: Arc<MessageStore>,
    started: Instant,
}

pub fn router(store: Arc<MessageStore>) -> Router {
    router_with_start(store, Instant::now())
}

pub fn router_with_start(store: Arc<MessageStore>, started: Instant) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/api/topics", get(topics))
        .route("/api/topics/{topic}/latest", get(latest))
        .route("/api/topics/{topic}/history", get(history))
        .fallback(not_found)
        .with_state(AppState { store, started })
}

fn error(status: StatusCode, msg: &str) -> Response {
    (status, Json(json!({ "error": msg }))).into_response()
}

async fn not_found() -> Response {
    error(StatusCode::NOT_FOUND, "not found")
}

async fn health(State(st): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "uptime_s": st.started.elapsed().as_secs() }))
}

/// Puts `payload` under `key` when it is JSON, else base64 under
/// `<key>_b64`.
fn embed(obj: &mut Map<String, Value>, key: &str, payload: &[u8]) {
    match serde_json::from_slice::<Value>(payload) {
        Ok(v) => {
            obj.insert(key.to_owned(), v);
        }
        Err(_) => {
            let b64 = base64::engine::general_purpose::STANDARD.encode(payload);
            obj.insert(format!("{key}_b64"), Value::String(b64));
        }
    }
}

async fn topics(State(st): State<AppState>) -> Json<Value> {
    let list = st
        .store
        .topic_summaries()
        .into_iter()
        .map(|s| {
            let mut obj = Map::new();
            obj.insert("topic".into(), s.topic.into());
            obj.insert("message_count".into(), s.message_count.into());
            obj.insert("last_timestamp_ms".into(), s.last_timestamp_ms.into());
            embed(&mut obj, "latest_payload", &s.latest_payload);
            Value::Object(obj)
        })
        .collect();
    Json(Value::Array(list))
}

async fn latest(State(st): State<AppState>, Path(topic): Path<String>) -> Response {
    match st.store.latest(&topic) {
        Some(payload) => ([(header::CONTENT_TYPE, "application/json")], payload).into_response(),
        None => error(StatusCode::NOT_FOUND, "unknown topic"),
    }
}

/// One history entry as served by `/history`.
pub fn history_entry(record: &LogRecord) -> Value {
    let mut obj = Map::new();
    obj.insert("timestamp_ms".into(), record.timestamp_ms.into());
    embed(&mut obj, "payload", &record.payload);
    Value::Object(obj)
}

async fn history(
    State(st): State<AppState>,
    Path(topic): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> Response {
    let limit = match params.get("limit") {
        None => DEFAULT_HISTORY_LIMIT,
        Some(raw) => match raw.parse::<usize>() {
            Ok(n) if (1..=MAX_HISTORY_LIMIT).contains(&n) => n,
            _ => return error(StatusCode::BAD_REQUEST, "limit must be an integer in 1..=10000"),
        },
    };
    if st.store.message_count(&topic) == 0 {
        return error(StatusCode::NOT_FOUND, "unknown topic");
    }
    match st.store.history(&topic, limit) {
        Ok(records) => Json(Value::Array(records.iter().map(history_entry).collect())).into_response(),
        Err(e) => {
            log::error!("history for {topic}: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "log read failed")
        }
    }
}
