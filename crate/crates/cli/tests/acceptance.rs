//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fail.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::future::IntoFuture;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use base64::Engine;
use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wsn_core::broker::{Broker, BrokerConfig};
use wsn_core::codec::{
    decode_packet, encode_packet, ConnectOptions, ConnectReturnCode, Packet, PublishMessage, QoS, SubscribeReturnCode,
    WillMessage,
};
use wsn_core::fleet::{run_in_memory, FaultRule, FleetConfig};
use wsn_core::gateway;
use wsn_core::node::{build_payload, estimate_lifetime, SensorReading};
use wsn_core::persistence::{replay_dir, LogConfig, MessageStore};
use wsn_core::topic::{topic_matches, SubscriptionTrie, TopicFilter, TopicName};

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() -> ExitCode {
    let checks: [Check; 10] = [
        ("payload fidelity", payload_fidelity),
        ("two-byte minimal packets", minimal_packets),
        ("codec round trip and fuzz", codec_round_trip),
        ("1000-node fleet", thousand_nodes),
        ("qos0 no retransmit", no_retransmit),
        ("last will on killed nodes", last_will),
        ("battery lifetime", battery_lifetime),
        ("topic matcher oracle", matcher_oracle),
        ("rest consistency and recovery", rest_consistency),
        ("poller output", poller_output),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} ({secs:.2}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} ({secs:.2}s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn reading(t: f32, h: f32, p: f64) -> SensorReading {
    SensorReading {
        temperature_c: t,
        humidity_pct: h,
        pressure_pa: p,
        timestamp_ms: 0,
    }
}

fn payload_fidelity() -> Outcome {
    let cases = [
        (reading(26.2, 67.0, 100031.59), r#"{"temperature":26.200001,"humidity":67,"pressure":100031.59}"#),
        (reading(26.2, 67.3, 100032.41), r#"{"temperature":26.200001,"humidity":67.300003,"pressure":100032.41}"#),
    ];
    for (r, want) in &cases {
        let got = build_payload(r);
        ensure!(got.as_bytes() == want.as_bytes(), "got {got}, want {want}");
    }
    Ok("both lines byte-identical".into())
}

fn minimal_packets() -> Outcome {
    let cases = [
        (Packet::PingReq, [0xC0, 0x00]),
        (Packet::PingResp, [0xD0, 0x00]),
        (Packet::Disconnect, [0xE0, 0x00]),
    ];
    for (p, want) in &cases {
        let bytes = encode_packet(p).map_err(|e| e.to_string())?;
        ensure!(bytes[..] == want[..], "{p:?} encoded to {bytes:02x?}");
    }
    Ok("PINGREQ, PINGRESP, DISCONNECT are 2 bytes each".into())
}

const CHARS: [char; 12] = ['a', 'z', '0', '9', '_', '-', ' ', 'é', '€', '$', '/', '😀'];

fn text(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| CHARS[rng.random_range(0..CHARS.len())]).collect()
}

fn topic(rng: &mut ChaCha8Rng) -> String {
    let levels = rng.random_range(1..=4);
    let parts: Vec<String> = (0..levels).map(|_| text(rng, 6).replace('/', "")).collect();
    let t = parts.join("/");
    if t.is_empty() {
        "t".into()
    } else {
        t
    }
}

fn filter(rng: &mut ChaCha8Rng) -> String {
    let levels = rng.random_range(1..=4);
    let mut parts: Vec<&str> = (0..levels).map(|_| ["a", "sensors", "+", "data", ""][rng.random_range(0..5)]).collect();
    if rng.random_bool(0.3) {
        parts.push("#");
    }
    let f = parts.join("/");
    if f.is_empty() {
        "a".into()
    } else {
        f
    }
}

fn blob(rng: &mut ChaCha8Rng, max: usize) -> Bytes {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| rng.random::<u8>()).collect::<Vec<u8>>().into()
}

fn qos(rng: &mut ChaCha8Rng) -> QoS {
    [QoS::AtMostOnce, QoS::AtLeastOnce, QoS::ExactlyOnce][rng.random_range(0..3)]
}

fn pid(rng: &mut ChaCha8Rng) -> u16 {
    rng.random_range(1..=u16::MAX)
}

fn random_packet(rng: &mut ChaCha8Rng) -> Packet {
    match rng.random_range(0..14) {
        0 => {
            let username = rng.random_bool(0.5).then(|| text(rng, 10));
            let password = if username.is_some() && rng.random_bool(0.5) { Some(blob(rng, 16)) } else { None };
            let will = rng.random_bool(0.5).then(|| WillMessage {
                topic: topic(rng),
                payload: blob(rng, 32),
                qos: qos(rng),
                retain: rng.random(),
            });
            Packet::Connect(ConnectOptions {
                protocol_level: 4,
                client_id: text(rng, 23),
                keep_alive_s: rng.random(),
                clean_session: rng.random(),
                will,
                username,
                password,
            })
        }
        1 => {
            let return_code = ConnectReturnCode::from_u8(rng.random_range(0..=5)).unwrap();
            Packet::ConnAck {
                session_present: return_code == ConnectReturnCode::Accepted && rng.random(),
                return_code,
            }
        }
        2 => {
            let q = qos(rng);
            Packet::Publish(PublishMessage {
                topic: topic(rng),
                payload: blob(rng, 200),
                qos: q,
                retain: rng.random(),
                dup: q != QoS::AtMostOnce && rng.random(),
                packet_id: (q != QoS::AtMostOnce).then(|| pid(rng)),
            })
        }
        3 => Packet::PubAck { packet_id: pid(rng) },
        4 => Packet::PubRec { packet_id: pid(rng) },
        5 => Packet::PubRel { packet_id: pid(rng) },
        6 => Packet::PubComp { packet_id: pid(rng) },
        7 => Packet::Subscribe {
            packet_id: pid(rng),
            filters: (0..rng.random_range(1..4)).map(|_| (filter(rng), qos(rng))).collect(),
        },
        8 => Packet::SubAck {
            packet_id: pid(rng),
            return_codes: (0..rng.random_range(1..4))
                .map(|_| if rng.random_bool(0.2) { SubscribeReturnCode::Failure } else { SubscribeReturnCode::Granted(qos(rng)) })
                .collect(),
        },
        9 => Packet::Unsubscribe {
            packet_id: pid(rng),
            filters: (0..rng.random_range(1..4)).map(|_| filter(rng)).collect(),
        },
        10 => Packet::UnsubAck { packet_id: pid(rng) },
        11 => Packet::PingReq,
        12 => Packet::PingResp,
        _ => Packet::Disconnect,
    }
}

fn codec_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DEC);
    let cases = 20_000;
    for i in 0..cases {
        let p = random_packet(&mut rng);
        let bytes = encode_packet(&p).map_err(|e| format!("case {i}: encode {p:?}: {e}"))?;
        let (back, used) = decode_packet(&bytes).map_err(|e| format!("case {i}: decode {p:?}: {e}"))?;
        ensure!(used == bytes.len() && back == p, "case {i}: {p:?} came back as {back:?}");
    }
    let fuzz = 1_000_000;
    let mut buf = Vec::with_capacity(64);
    let mut decoded = 0u64;
    for _ in 0..fuzz {
        buf.clear();
        let n = rng.random_range(0..48);
        buf.extend((0..n).map(|_| rng.random::<u8>()));
        if decode_packet(&buf).is_ok() {
            decoded += 1;
        }
    }
    Ok(format!("{cases} packets round-tripped, {fuzz} random inputs decoded without panic ({decoded} parsed)"))
}

fn thousand_nodes() -> Outcome {
    let cfg = FleetConfig {
        nodes: 1000,
        interval_s: 10.0,
        duration_s: 30.0,
        seed: 1,
        ..Default::default()
    };
    let started = Instant::now();
    let out = run_in_memory(&cfg, Arc::new(MessageStore::in_memory())).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let r = &out.report;
    ensure!(r.published > 0, "nothing published");
    ensure!(r.delivered == r.published, "published {} delivered {}", r.published, r.delivered);
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("published {} delivered {} in {secs:.2}s", r.published, r.delivered))
}

fn no_retransmit() -> Outcome {
    let cfg = FleetConfig {
        nodes: 1,
        interval_s: 1.0,
        duration_s: 30.0,
        stagger_start: false,
        faults: vec![FaultRule {
            drop_every: Some(3),
            ..Default::default()
        }],
        ..Default::default()
    };
    let out = run_in_memory(&cfg, Arc::new(MessageStore::in_memory())).map_err(|e| e.to_string())?;
    let n = &out.nodes[0];
    ensure!(n.samples == 30, "{} samples", n.samples);
    ensure!(n.frames_sent == 30 - 10, "{} frames sent", n.frames_sent);
    ensure!(out.report.delivered == 20, "{} delivered", out.report.delivered);
    Ok(format!("30 samples, {} PUBLISH frames, {} delivered", n.frames_sent, out.report.delivered))
}

fn last_will() -> Outcome {
    let cfg = FleetConfig {
        nodes: 100,
        kill_fraction: 0.1,
        seed: 2024,
        ..Default::default()
    };
    let store = Arc::new(MessageStore::in_memory());
    let out = run_in_memory(&cfg, store.clone()).map_err(|e| e.to_string())?;
    let killed: BTreeSet<String> =
        out.nodes.iter().filter(|n| n.killed).map(|n| format!("sensors/{}/status", n.client_id)).collect();
    let offline: BTreeSet<String> = out.retained_offline.iter().cloned().collect();
    ensure!(out.retained_offline.len() == 10, "{} retained offline", out.retained_offline.len());
    ensure!(offline == killed, "offline {offline:?} vs killed {killed:?}");
    let mut clean = 0;
    for n in out.nodes.iter().filter(|n| !n.killed) {
        let status = store.latest(&format!("sensors/{}/status", n.client_id));
        ensure!(status.as_deref() != Some(&b"offline"[..]), "{} is offline", n.client_id);
        clean += 1;
    }
    Ok(format!("10 offline retained for killed nodes, 0 for {clean} others"))
}

fn battery_lifetime() -> Outcome {
    let h = estimate_lifetime(9.62, 3.7, 0.080).map_err(|e| e.to_string())?;
    ensure!((h - 32.5).abs() <= 0.1, "{h} h");
    Ok(format!("{h:.3} h"))
}

fn oracle_rec(f: &[&str], t: &[&str]) -> bool {
    match (f.split_first(), t.split_first()) {
        (None, None) => true,
        (Some((&"#", _)), _) => true,
        (Some((&"+", fr)), Some((_, tr))) => oracle_rec(fr, tr),
        (Some((a, fr)), Some((b, tr))) => a == b && oracle_rec(fr, tr),
        _ => false,
    }
}

fn matcher_oracle() -> Outcome {
    let alphabet = ["a", "b", "+", "#", "$x"];
    let mut all: Vec<Vec<&str>> = Vec::new();
    let mut frontier: Vec<Vec<&str>> = vec![vec![]];
    for _ in 0..4 {
        frontier = frontier
            .iter()
            .flat_map(|p| alphabet.iter().map(move |s| [p.clone(), vec![*s]].concat()))
            .collect();
        all.extend(frontier.iter().cloned());
    }
    let filters: Vec<(Vec<&str>, TopicFilter)> = all
        .iter()
        .filter(|l| l.iter().enumerate().all(|(i, s)| *s != "#" || i + 1 == l.len()))
        .map(|l| (l.clone(), TopicFilter::new(l.join("/")).unwrap()))
        .collect();
    let topics: Vec<(Vec<&str>, TopicName)> = all
        .iter()
        .filter(|l| l.iter().all(|s| *s != "+" && *s != "#"))
        .map(|l| (l.clone(), TopicName::new(l.join("/")).unwrap()))
        .collect();
    let mut trie = SubscriptionTrie::new();
    for (i, (_, f)) in filters.iter().enumerate() {
        trie.insert(f, i);
    }
    let mut pairs = 0u64;
    let mut mismatches = 0u64;
    for (tl, t) in &topics {
        let mut want_set = BTreeSet::new();
        for (i, (fl, f)) in filters.iter().enumerate() {
            let hidden = tl[0].starts_with('$') && (fl[0] == "+" || fl[0] == "#");
            let want = !hidden && oracle_rec(fl, tl);
            if want {
                want_set.insert(i);
            }
            if topic_matches(f, t) != want {
                mismatches += 1;
            }
            pairs += 1;
        }
        if trie.matches(t).into_iter().collect::<BTreeSet<_>>() != want_set {
            mismatches += 1;
        }
    }
    ensure!(mismatches == 0, "{mismatches} mismatches over {pairs} pairs");
    Ok(format!("{pairs} pairs, 0 mismatches"))
}

fn expected_entry(ts: u64, payload: &[u8]) -> Value {
    match serde_json::from_slice::<Value>(payload) {
        Ok(v) => json!({"timestamp_ms": ts, "payload": v}),
        Err(_) => json!({"timestamp_ms": ts, "payload_b64": base64::engine::general_purpose::STANDARD.encode(payload)}),
    }
}

fn rest_consistency() -> Outcome {
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let http = rt.block_on(rest_over_http())?;
    let cuts = truncation_sweep()?;
    Ok(format!("{http}; {cuts}"))
}

async fn rest_over_http() -> Outcome {
    let store = Arc::new(MessageStore::in_memory());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(axum::serve(listener, gateway::router(store.clone())).into_future());

    let mut broker = Broker::new(BrokerConfig::default(), store.clone());
    let conn = broker.accept(0);
    broker.handle_packet(conn, Packet::Connect(ConnectOptions::new("script")), 0);
    let topics = ["sensors/node1/data", "sensors/node2/data", "sensors/node1/status", "misc"];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut sent: HashMap<&str, Vec<(u64, Bytes)>> = HashMap::new();
    for ts in 1..=400u64 {
        let t = topics[rng.random_range(0..topics.len())];
        let payload: Bytes = if rng.random_bool(0.75) {
            build_payload(&reading(rng.random_range(-10.0..40.0), rng.random_range(0.0..100.0), rng.random_range(9e4..1.1e5)))
                .into()
        } else {
            blob(&mut rng, 16)
        };
        broker.handle_packet(conn, Packet::Publish(PublishMessage::at_most_once(t, payload.clone())), ts);
        sent.entry(t).or_default().push((ts, payload));
    }

    let client = reqwest::Client::new();
    for (t, msgs) in &sent {
        let enc = t.replace('/', "%2F");
        let latest = client
            .get(format!("{base}/api/topics/{enc}/latest"))
            .send()
            .await
            .map_err(|e| e.to_string())?
            .bytes()
            .await
            .map_err(|e| e.to_string())?;
        ensure!(latest == msgs.last().unwrap().1, "latest of {t} differs");
        let body = client
            .get(format!("{base}/api/topics/{enc}/history?limit=10000"))
            .send()
            .await
            .map_err(|e| e.to_string())?
            .bytes()
            .await
            .map_err(|e| e.to_string())?;
        let hist: Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        let want: Vec<Value> = msgs.iter().map(|(ts, p)| expected_entry(*ts, p)).collect();
        ensure!(hist == Value::Array(want), "history of {t} differs from the published sequence");
    }
    Ok(format!("400 publishes over {} topics match /latest and /history", sent.len()))
}

fn only_segment(dir: &Path) -> PathBuf {
    let mut segs: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    segs.sort();
    segs.pop().unwrap()
}

fn truncation_sweep() -> Outcome {
    let src = tempfile::tempdir().map_err(|e| e.to_string())?;
    let payloads = [
        ("sensors/node1/data", r#"{"temperature":26.200001,"humidity":67,"pressure":100031.59}"#),
        ("sensors/node1/status", "online"),
        ("sensors/node1/data", r#"{"temperature":26.200001,"humidity":67.300003,"pressure":100032.41}"#),
    ];
    let mut sizes = Vec::new();
    {
        let store = MessageStore::open(src.path(), LogConfig::default()).map_err(|e| e.to_string())?;
        for (i, (t, p)) in payloads.iter().enumerate() {
            store.append(&TopicName::new(*t).unwrap(), Bytes::from_static(p.as_bytes()), i as u64).unwrap();
            store.flush().unwrap();
            sizes.push(fs::metadata(only_segment(src.path())).unwrap().len() as usize);
        }
    }
    let seg = only_segment(src.path());
    let bytes = fs::read(&seg).unwrap();
    let full = replay_dir(src.path(), 0).map_err(|e| e.to_string())?;
    ensure!(full.len() == payloads.len(), "wrote {} records", full.len());
    let last_start = sizes[sizes.len() - 2];
    let mut cuts = 0;
    for cut in last_start..=bytes.len() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(seg.file_name().unwrap()), &bytes[..cut]).unwrap();
        let got = replay_dir(dir.path(), 0).map_err(|e| format!("cut {cut}: {e}"))?;
        let want = if cut == bytes.len() { &full[..] } else { &full[..payloads.len() - 1] };
        ensure!(got == want, "cut {cut}: replayed {} records", got.len());
        let reopened = MessageStore::open(dir.path(), LogConfig::default()).map_err(|e| format!("cut {cut}: {e}"))?;
        ensure!(reopened.replay(0).unwrap() == want, "cut {cut}: reopened store differs");
        cuts += 1;
    }
    Ok(format!("{cuts} truncation points replay a clean prefix"))
}

fn poller_output() -> Outcome {
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let store = Arc::new(MessageStore::in_memory());
    let topic = "sensors/node1/data";
    store
        .append(
            &TopicName::new(topic).unwrap(),
            Bytes::from_static(br#"{"temperature":27,"humidity":72.099998,"pressure":100203.86}"#),
            1,
        )
        .unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).map_err(|e| e.to_string())?;
    let base = format!("http://{}", listener.local_addr().unwrap());
    rt.spawn(axum::serve(listener, gateway::router(store)).into_future());

    let out = Command::new(env!("CARGO_BIN_EXE_wsn"))
        .args(["poll", "--url", &base, "--topic", topic, "--count", "1", "--interval", "0"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    let want = "inner humidity: 72.099998%\ninner pressure: 100203.86 Pa\ninner temperature: 27°C\n";
    ensure!(out.stdout == want.as_bytes(), "stdout was {:?}", String::from_utf8_lossy(&out.stdout));
    Ok("three-line block matches byte for byte".into())
}
