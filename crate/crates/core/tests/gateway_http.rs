use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wsn_core::broker::{Broker, BrokerConfig};
use wsn_core::codec::{ConnectOptions, Packet, PublishMessage};
use wsn_core::gateway::{history_entry, router, router_with_start};
use wsn_core::persistence::MessageStore;
use wsn_core::topic::TopicName;

const SAMPLE_LINE: &str = r#"{"temperature":26.200001,"humidity":67,"pressure":100031.59}"#;
const SAMPLE_LINE_2: &str = r#"{"temperature":26.200001,"humidity":67.300003,"pressure":100032.41}"#;

async fn serve(app: axum::Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

fn enc(topic: &str) -> String {
    topic.replace('/', "%2F")
}

async fn get(url: &str) -> (u16, Option<String>, Bytes) {
    let resp = reqwest::get(url).await.unwrap();
    let status = resp.status().as_u16();
    let ct = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_owned());
    (status, ct, resp.bytes().await.unwrap())
}

async fn get_json(url: &str) -> (u16, Value) {
    let (status, _, body) = get(url).await;
    (status, serde_json::from_slice(&body).unwrap())
}

fn append(store: &MessageStore, topic: &str, payload: &str, ts: u64) {
    store
        .append(&TopicName::new(topic).unwrap(), Bytes::copy_from_slice(payload.as_bytes()), ts)
        .unwrap();
}

#[tokio::test]
async fn health_and_unknown_paths() {
    let started = Instant::now().checked_sub(Duration::from_secs(2)).unwrap();
    let base = serve(router_with_start(Arc::new(MessageStore::in_memory()), started)).await;
    let (status, body) = get_json(&format!("{base}/health")).await;
    assert_eq!(status, 200);
    assert_eq!(body["status"], "ok");
    let up = body["uptime_s"].as_u64().unwrap();
    assert!((1..=4).contains(&up), "{up}");
    let (status, body) = get_json(&format!("{base}/healthz")).await;
    assert_eq!(status, 404);
    assert!(body["error"].is_string());
}

#[tokio::test]
async fn latest_is_byte_identical() {
    let store = Arc::new(MessageStore::in_memory());
    let base = serve(router(store.clone())).await;
    let topic = "sensors/node1/data";
    let url = format!("{base}/api/topics/{}/latest", enc(topic));

    let (status, _, body) = get(&url).await;
    assert_eq!(status, 404);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), json!({"error": "unknown topic"}));

    append(&store, topic, SAMPLE_LINE, 1);
    let (status, ct, body) = get(&url).await;
    assert_eq!(status, 200);
    assert_eq!(ct.as_deref(), Some("application/json"));
    assert_eq!(&body[..], SAMPLE_LINE.as_bytes());

    append(&store, topic, SAMPLE_LINE_2, 2);
    assert_eq!(&get(&url).await.2[..], SAMPLE_LINE_2.as_bytes());
}

#[tokio::test]
async fn topics_listing() {
    let store = Arc::new(MessageStore::in_memory());
    let base = serve(router(store.clone())).await;
    assert_eq!(get_json(&format!("{base}/api/topics")).await.1, json!([]));
    append(&store, "sensors/b/data", SAMPLE_LINE, 5);
    append(&store, "sensors/a/status", "online", 6);
    append(&store, "sensors/b/data", SAMPLE_LINE_2, 7);
    let (_, list) = get_json(&format!("{base}/api/topics")).await;
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), 2);
    assert_eq!(list[0]["topic"], "sensors/a/status");
    assert_eq!(list[0]["latest_payload_b64"], "b25saW5l");
    assert_eq!(list[1]["topic"], "sensors/b/data");
    assert_eq!(list[1]["message_count"], 2);
    assert_eq!(list[1]["last_timestamp_ms"], 7);
    assert_eq!(list[1]["latest_payload"]["humidity"], json!(67.300003));
    for entry in list {
        let topic = entry["topic"].as_str().unwrap();
        let count = store.history(topic, usize::MAX).unwrap().len() as u64;
        assert_eq!(entry["message_count"].as_u64().unwrap(), count);
    }
}

#[tokio::test]
async fn history_limits_and_errors() {
    let store = Arc::new(MessageStore::in_memory());
    let base = serve(router(store.clone())).await;
    let topic = "sensors/n/data";
    for i in 0..5 {
        append(&store, topic, &format!("{{\"i\":{i}}}"), 100 + i);
    }
    let url = format!("{base}/api/topics/{}/history", enc(topic));
    let (status, body) = get_json(&format!("{url}?limit=3")).await;
    assert_eq!(status, 200);
    let entries = body.as_array().unwrap();
    assert_eq!(entries.len(), 3);
    let ts: Vec<u64> = entries.iter().map(|e| e["timestamp_ms"].as_u64().unwrap()).collect();
    assert_eq!(ts, [102, 103, 104]);
    assert_eq!(entries[2]["payload"], json!({"i": 4}));

    assert_eq!(get_json(&url).await.1.as_array().unwrap().len(), 5);
    for bad in ["0", "10001", "-1", "abc", ""] {
        assert_eq!(get(&format!("{url}?limit={bad}")).await.0, 400, "limit={bad}");
    }
    assert_eq!(get(&format!("{url}?limit=10000")).await.0, 200);
    let (status, body) = get_json(&format!("{base}/api/topics/nope/history")).await;
    assert_eq!(status, 404);
    assert_eq!(body, json!({"error": "unknown topic"}));
}

/// After random publish scripts routed through the broker, /latest is the
/// last payload and /history is the log projection for every topic.
#[tokio::test]
async fn rest_views_match_the_log() {
    let store = Arc::new(MessageStore::in_memory());
    let base = serve(router(store.clone())).await;
    let mut broker = Broker::new(BrokerConfig::default(), store.clone());
    let conn = broker.accept(0);
    broker.handle_packet(conn, Packet::Connect(ConnectOptions::new("script")), 0);

    let topics = ["sensors/a/data", "sensors/b/data", "sensors/a/status", "x"];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut last = std::collections::HashMap::new();
    for step in 1..=300u64 {
        let topic = topics[rng.random_range(0..topics.len())];
        let payload: Bytes = if rng.random_bool(0.7) {
            format!("{{\"step\":{step},\"v\":{:.3}}}", rng.random_range(0.0..100.0)).into()
        } else {
            (0..rng.random_range(0..12)).map(|_| rng.random::<u8>()).collect::<Vec<u8>>().into()
        };
        let fx = broker.handle_packet(conn, Packet::Publish(PublishMessage::at_most_once(topic, payload.clone())), step);
        assert!(fx.closes.is_empty());
        last.insert(topic, payload);

        if step % 50 != 0 {
            continue;
        }
        let fingerprint = store.fingerprint();
        for (topic, payload) in &last {
            let (status, _, body) = get(&format!("{base}/api/topics/{}/latest", enc(topic))).await;
            assert_eq!(status, 200);
            assert_eq!(&body, payload, "latest of {topic}");

            let (_, hist) = get_json(&format!("{base}/api/topics/{}/history?limit=10000", enc(topic))).await;
            let projection: Vec<Value> = store
                .replay(0)
                .unwrap()
                .iter()
                .filter(|r| r.topic.as_str() == *topic)
                .map(history_entry)
                .collect();
            assert_eq!(hist, Value::Array(projection.clone()), "history of {topic}");
            assert_eq!(hist.as_array().unwrap().last(), projection.last());
        }
        assert_eq!(store.fingerprint(), fingerprint, "reads changed the store");
    }
}

#[tokio::test]
async fn request_storm_leaves_store_untouched() {
    let store = Arc::new(MessageStore::in_memory());
    append(&store, "sensors/a/data", SAMPLE_LINE, 1);
    append(&store, "sensors/a/data", SAMPLE_LINE_2, 2);
    let before = store.fingerprint();
    let base = serve(router(store.clone())).await;
    let client = reqwest::Client::new();
    let mut tasks = tokio::task::JoinSet::new();
    for i in 0..200 {
        let client = client.clone();
        let url = match i % 4 {
            0 => format!("{base}/api/topics"),
            1 => format!("{base}/api/topics/sensors%2Fa%2Fdata/latest"),
            2 => format!("{base}/api/topics/sensors%2Fa%2Fdata/history?limit=1"),
            _ => format!("{base}/health"),
        };
        tasks.spawn(async move { client.get(url).send().await.unwrap().status().as_u16() });
    }
    while let Some(status) = tasks.join_next().await {
        assert_eq!(status.unwrap(), 200);
    }
    assert_eq!(store.fingerprint(), before);
}
