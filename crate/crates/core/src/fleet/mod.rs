//! Fleet runs: many simulated nodes against one broker.
//!
//! [`run_in_memory`] is a discrete-event simulation on a virtual clock. Every
//! packet is encoded, carried as bytes with a fixed link latency and decoded
//! again on the other side, so the broker sees exactly what a socket would
//! deliver. With the same config and seed, two runs produce the same report
//! and the same log bytes.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::sync::Arc;

use bytes::Bytes;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{Broker, BrokerConfig, BrokerStats, ConnId, Effects, MAX_FRAME};
use crate::codec::{encode_packet, ConnectOptions, ConnectReturnCode, FrameDecoder, Packet, QoS};
use crate::node::{ConfigError, Node, NodeAction, NodeConfig, NodeEvent, Phase, SensorProfile, STATUS_OFFLINE};
use crate::persistence::MessageStore;

mod live;
pub use live::run_tcp;

pub const MONITOR_CLIENT_ID: &str = "fleet-monitor";
pub const DATA_FILTER: &str = "sensors/+/data";
pub const STATUS_FILTER: &str = "sensors/+/status";

/// Faults injected into one node (or every node when `node` is unset).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultRule {
    pub node: Option<String>,
    /// 1-based sample numbers whose publish fails at the transport.
    pub drop_publish_steps: Vec<u64>,
    /// Fail every k-th publish.
    pub drop_every: Option<u64>,
    /// Seconds into the run at which the transport is cut (the node then
    /// reconnects after its backoff).
    pub cut_transport_at_s: Vec<f64>,
}

impl FaultRule {
    pub(crate) fn applies_to(&self, client_id: &str) -> bool {
        self.node.as_deref().is_none_or(|n| n == client_id)
    }

    pub(crate) fn drops(&self, sample_no: u64) -> bool {
        self.drop_publish_steps.contains(&sample_no) || self.drop_every.is_some_and(|k| k > 0 && sample_no.is_multiple_of(k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetConfig {
    pub nodes: usize,
    pub id_prefix: String,
    pub seed: u64,
    pub profile: String,
    pub interval_s: f64,
    pub duration_s: f64,
    pub keep_alive_s: u16,
    pub connect_retry_backoff_s: f64,
    /// Fraction of nodes that lose power abruptly halfway through the run.
    pub kill_fraction: f64,
    /// Spread power-on times uniformly over the first interval.
    pub stagger_start: bool,
    pub link_latency_ms: u64,
    /// Time from power-on (or a retry) until the WiFi link is up.
    pub link_setup_ms: u64,
    pub broker_tick_ms: u64,
    /// Keep each node's serial-console trace.
    pub trace: bool,
    pub faults: Vec<FaultRule>,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig {
            nodes: 1,
            id_prefix: "node".into(),
            seed: 0,
            profile: "DHT22".into(),
            interval_s: 10.0,
            duration_s: 30.0,
            keep_alive_s: 15,
            connect_retry_backoff_s: 2.0,
            kill_fraction: 0.0,
            stagger_start: true,
            link_latency_ms: 1,
            link_setup_ms: 100,
            broker_tick_ms: 1000,
            trace: false,
            faults: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("fleet needs at least one node")]
    NoNodes,
    #[error("duration must be positive")]
    BadDuration,
    #[error("kill fraction must lie in [0, 1]")]
    BadKillFraction,
    #[error("unknown sensor profile {0:?}")]
    UnknownProfile(String),
    #[error("node {id}: {source}")]
    Node { id: String, source: ConfigError },
    #[error("invalid fleet config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Transport(String),
}

impl FleetConfig {
    pub fn from_toml(text: &str) -> Result<Self, FleetError> {
        Ok(toml::from_str(text)?)
    }

    pub fn client_id(&self, index: usize) -> String {
        format!("{}{index:04}", self.id_prefix)
    }

    /// Number of nodes the kill schedule removes: round(p·N).
    pub fn kill_count(&self) -> usize {
        (self.kill_fraction * self.nodes as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), FleetError> {
        if self.nodes == 0 {
            return Err(FleetError::NoNodes);
        }
        if self.duration_s.is_nan() || self.duration_s <= 0.0 {
            return Err(FleetError::BadDuration);
        }
        if !(0.0..=1.0).contains(&self.kill_fraction) {
            return Err(FleetError::BadKillFraction);
        }
        self.sensor_profile()?;
        Ok(())
    }

    fn sensor_profile(&self) -> Result<SensorProfile, FleetError> {
        SensorProfile::by_name(&self.profile).ok_or_else(|| FleetError::UnknownProfile(self.profile.clone()))
    }

    pub fn node_config(&self, index: usize) -> Result<NodeConfig, FleetError> {
        let id = self.client_id(index);
        let seed = self.seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut cfg = NodeConfig::new(id.clone(), seed);
        cfg.sample_interval_s = self.interval_s;
        cfg.keep_alive_s = self.keep_alive_s;
        cfg.connect_retry_backoff_s = self.connect_retry_backoff_s;
        cfg.profile = self.sensor_profile()?;
        cfg.validate().map_err(|source| FleetError::Node { id, source })?;
        Ok(cfg)
    }

    /// Indices of the nodes the kill schedule removes, chosen by a seeded
    /// shuffle.
    pub fn kill_set(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x04B1_15E7);
        let mut idx: Vec<usize> = (0..self.nodes).collect();
        idx.shuffle(&mut rng);
        idx.truncate(self.kill_count());
        idx.sort_unstable();
        idx
    }

    pub(crate) fn power_on_offsets_ms(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x057A_66E2);
        let span = (self.interval_s * 1000.0) as u64;
        (0..self.nodes)
            .map(|_| if self.stagger_start && span > 0 { rng.random_range(0..span) } else { 0 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetRunReport {
    pub nodes: u64,
    pub duration_s: f64,
    /// Telemetry frames the nodes put on the wire.
    pub published: u64,
    /// Telemetry messages the monitoring subscriber received.
    pub delivered: u64,
    /// Publishes lost to injected transport faults, never retransmitted.
    pub dropped_by_policy: u64,
    /// "offline" status messages the broker published for lost nodes.
    pub wills_fired: u64,
}

impl fmt::Display for FleetRunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: [(&str, String); 6] = [
            ("nodes", self.nodes.to_string()),
            ("duration_s", crate::node::format_trimmed(self.duration_s)),
            ("published", self.published.to_string()),
            ("delivered", self.delivered.to_string()),
            ("dropped_by_policy", self.dropped_by_policy.to_string()),
            ("wills_fired", self.wills_fired.to_string()),
        ];
        for (k, v) in rows {
            writeln!(f, "{k:<18} {v:>10}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSummary {
    pub client_id: String,
    pub samples: u64,
    pub dropped: u64,
    /// Telemetry PUBLISH frames written to the transport.
    pub frames_sent: u64,
    pub killed: bool,
    pub final_phase: Phase,
}

#[derive(Debug)]
pub struct FleetOutcome {
    pub report: FleetRunReport,
    /// Only known when the broker runs in-process.
    pub broker_stats: Option<BrokerStats>,
    pub nodes: Vec<NodeSummary>,
    /// Status topics whose retained message is "offline" at the end.
    pub retained_offline: Vec<String>,
    pub traces: BTreeMap<String, Vec<String>>,
    pub broker_console: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Timer {
    Sample,
    KeepAlive,
}

#[derive(Debug)]
enum Event {
    PowerOn(usize),
    LinkAttempt(usize),
    Timer { node: usize, epoch: u64, timer: Timer },
    Cut(usize),
    ToBroker { conn: ConnId, bytes: Bytes },
    BrokerLost(ConnId),
    ToClient { conn: ConnId, bytes: Bytes },
    ClientLost(ConnId),
    Tick,
    Kill,
    Stop,
}

struct Scheduled {
    at_ms: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at_ms, self.seq) == (other.at_ms, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at_ms, self.seq).cmp(&(other.at_ms, other.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Owner {
    Node(usize),
    Monitor,
}

struct SimNode {
    node: Node,
    conn: Option<ConnId>,
    decoder: FrameDecoder,
    faults: Vec<FaultRule>,
    frames_sent: u64,
    killed: bool,
    trace: Vec<String>,
}

#[derive(Default)]
struct Monitor {
    delivered: u64,
    offline: u64,
}

struct Sim {
    cfg: FleetConfig,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    broker: Broker,
    broker_decoders: HashMap<ConnId, FrameDecoder>,
    owners: HashMap<ConnId, Owner>,
    nodes: Vec<SimNode>,
    monitor_decoder: FrameDecoder,
    monitor: Monitor,
    stopped: bool,
    console: Vec<String>,
}

impl Sim {
    fn schedule(&mut self, at_ms: u64, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            at_ms,
            seq: self.seq,
            event,
        }));
    }

    fn after(&mut self, delay_ms: u64, event: Event) {
        self.schedule(self.now + delay_ms, event);
    }

    fn latency(&self) -> u64 {
        self.cfg.link_latency_ms
    }

    fn send_to_broker(&mut self, conn: ConnId, packet: &Packet) {
        let bytes = encode_packet(packet).expect("simulated clients only build valid packets");
        self.after(self.latency(), Event::ToBroker { conn, bytes });
    }

    fn route(&mut self, fx: Effects) {
        for (conn, packet) in fx.sends {
            let bytes = encode_packet(&packet).expect("broker only builds valid packets");
            self.after(self.latency(), Event::ToClient { conn, bytes });
        }
        for conn in fx.closes {
            self.broker_decoders.remove(&conn);
            self.after(self.latency(), Event::ClientLost(conn));
        }
        for line in fx.console {
            log::debug!("{line}");
            self.console.push(line);
        }
    }

    fn step_node(&mut self, i: usize, event: NodeEvent) {
        match self.nodes[i].node.step(self.now, event) {
            Ok(actions) => self.apply(i, actions),
            Err(e) => log::trace!("{}: {e}", self.nodes[i].node.client_id()),
        }
    }

    fn apply(&mut self, i: usize, actions: Vec<NodeAction>) {
        for action in actions {
            match action {
                NodeAction::Send(packet) => self.node_send(i, packet),
                NodeAction::CloseTransport => {
                    if let Some(conn) = self.nodes[i].conn.take() {
                        self.owners.remove(&conn);
                        self.after(self.latency(), Event::BrokerLost(conn));
                    }
                }
                NodeAction::RetryLinkAfter(s) => {
                    self.after((s * 1000.0) as u64, Event::LinkAttempt(i));
                }
                NodeAction::ArmSampleTimer(s) => self.arm(i, s, Timer::Sample),
                NodeAction::ArmKeepAlive(s) => self.arm(i, s, Timer::KeepAlive),
                NodeAction::Trace(line) => {
                    if self.cfg.trace {
                        self.nodes[i].trace.push(line);
                    }
                }
            }
        }
    }

    fn arm(&mut self, i: usize, delay_s: f64, timer: Timer) {
        let epoch = self.nodes[i].node.state().epoch;
        self.after((delay_s * 1000.0).round() as u64, Event::Timer { node: i, epoch, timer });
    }

    fn node_send(&mut self, i: usize, packet: Packet) {
        let sim = &mut self.nodes[i];
        let Some(conn) = sim.conn else {
            return;
        };
        let telemetry = matches!(&packet, Packet::Publish(m) if m.topic == sim.node.config().topic);
        if telemetry {
            let sample_no = sim.node.state().published_count;
            let id = sim.node.client_id();
            if sim.faults.iter().any(|f| f.applies_to(id) && f.drops(sample_no)) {
                self.step_node(i, NodeEvent::PublishIoError);
                return;
            }
            sim.frames_sent += 1;
        }
        self.send_to_broker(conn, &packet);
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::PowerOn(i) => {
                self.step_node(i, NodeEvent::PowerOn);
                self.after(self.cfg.link_setup_ms, Event::LinkAttempt(i));
            }
            Event::LinkAttempt(i) => {
                if self.nodes[i].node.phase() != Phase::LinkConnecting || self.stopped {
                    return;
                }
                let conn = self.broker.accept(self.now);
                self.broker_decoders.insert(conn, FrameDecoder::new(MAX_FRAME));
                self.owners.insert(conn, Owner::Node(i));
                self.nodes[i].conn = Some(conn);
                self.nodes[i].decoder = FrameDecoder::new(MAX_FRAME);
                self.step_node(i, NodeEvent::LinkUp);
            }
            Event::Timer { node, epoch, timer } => {
                let n = &self.nodes[node].node;
                if n.phase() != Phase::Connected || n.state().epoch != epoch {
                    return;
                }
                let ev = match timer {
                    Timer::Sample => NodeEvent::SampleTimer,
                    Timer::KeepAlive => NodeEvent::KeepAliveTimer,
                };
                self.step_node(node, ev);
            }
            Event::Cut(i) => {
                if let Some(conn) = self.nodes[i].conn.take() {
                    self.owners.remove(&conn);
                    self.after(self.latency(), Event::BrokerLost(conn));
                    self.step_node(i, NodeEvent::TransportLost);
                }
            }
            Event::ToBroker { conn, bytes } => {
                let Some(decoder) = self.broker_decoders.get_mut(&conn) else {
                    return;
                };
                decoder.extend(&bytes);
                while let Some(decoder) = self.broker_decoders.get_mut(&conn) {
                    match decoder.next_packet() {
                        Ok(Some(packet)) => {
                            let fx = self.broker.handle_packet(conn, packet, self.now);
                            self.route(fx);
                        }
                        Ok(None) => break,
                        Err(_) => {
                            let fx = self.broker.handle_protocol_violation(conn, "malformed frame", self.now);
                            self.route(fx);
                            break;
                        }
                    }
                }
            }
            Event::BrokerLost(conn) => {
                self.broker_decoders.remove(&conn);
                let fx = self.broker.handle_connection_loss(conn, self.now);
                self.route(fx);
            }
            Event::ToClient { conn, bytes } => match self.owners.get(&conn) {
                Some(Owner::Node(i)) => self.node_receive(*i, conn, &bytes),
                Some(Owner::Monitor) => self.monitor_receive(&bytes),
                None => {}
            },
            Event::ClientLost(conn) => {
                if let Some(Owner::Node(i)) = self.owners.remove(&conn) {
                    if self.nodes[i].conn == Some(conn) {
                        self.nodes[i].conn = None;
                        self.step_node(i, NodeEvent::TransportLost);
                    }
                }
            }
            Event::Tick => {
                let fx = self.broker.tick(self.now);
                self.route(fx);
                if !self.stopped {
                    self.after(self.cfg.broker_tick_ms, Event::Tick);
                }
            }
            Event::Kill => {
                for i in self.cfg.kill_set() {
                    let sim = &mut self.nodes[i];
                    sim.killed = true;
                    sim.node.crash(self.now);
                    if let Some(conn) = sim.conn.take() {
                        self.owners.remove(&conn);
                        self.after(self.latency(), Event::BrokerLost(conn));
                    }
                }
            }
            Event::Stop => {
                self.stopped = true;
                for i in 0..self.nodes.len() {
                    if self.nodes[i].node.phase() != Phase::PoweredOff {
                        self.step_node(i, NodeEvent::PowerOff);
                    }
                }
            }
        }
    }

    fn node_receive(&mut self, i: usize, conn: ConnId, bytes: &[u8]) {
        if self.nodes[i].conn != Some(conn) {
            return;
        }
        self.nodes[i].decoder.extend(bytes);
        loop {
            match self.nodes[i].decoder.next_packet() {
                Ok(Some(Packet::ConnAck { return_code, .. })) => {
                    let ev = match return_code {
                        ConnectReturnCode::Accepted => NodeEvent::ConnAckOk,
                        other => NodeEvent::ConnAckErr(other as u8),
                    };
                    self.step_node(i, ev);
                }
                Ok(Some(_)) => {}
                Ok(None) => break,
                Err(e) => {
                    log::warn!("{}: undecodable frame from broker: {e}", self.nodes[i].node.client_id());
                    self.step_node(i, NodeEvent::LinkFail);
                    break;
                }
            }
        }
    }

    fn monitor_receive(&mut self, bytes: &[u8]) {
        self.monitor_decoder.extend(bytes);
        while let Ok(Some(packet)) = self.monitor_decoder.next_packet() {
            let Packet::Publish(msg) = packet else {
                continue;
            };
            if msg.retain {
                continue;
            }
            if msg.topic.ends_with("/data") {
                self.monitor.delivered += 1;
            } else if msg.topic.ends_with("/status") && &msg.payload[..] == STATUS_OFFLINE.as_bytes() {
                self.monitor.offline += 1;
            }
        }
    }
}

/// Runs the fleet on a virtual clock against an in-process broker that
/// writes to `store`.
pub fn run_in_memory(cfg: &FleetConfig, store: Arc<MessageStore>) -> Result<FleetOutcome, FleetError> {
    cfg.validate()?;
    let mut nodes = Vec::with_capacity(cfg.nodes);
    for i in 0..cfg.nodes {
        let node_cfg = cfg.node_config(i)?;
        let id = node_cfg.client_id.clone();
        let node = Node::new(node_cfg).map_err(|source| FleetError::Node { id: id.clone(), source })?;
        nodes.push(SimNode {
            node,
            conn: None,
            decoder: FrameDecoder::new(MAX_FRAME),
            faults: cfg.faults.iter().filter(|f| f.applies_to(&id)).cloned().collect(),
            frames_sent: 0,
            killed: false,
            trace: Vec::new(),
        });
    }

    let mut sim = Sim {
        cfg: cfg.clone(),
        now: 0,
        seq: 0,
        queue: BinaryHeap::new(),
        broker: Broker::new(BrokerConfig::default(), store),
        broker_decoders: HashMap::new(),
        owners: HashMap::new(),
        nodes,
        monitor_decoder: FrameDecoder::new(MAX_FRAME),
        monitor: Monitor::default(),
        stopped: false,
        console: Vec::new(),
    };

    let monitor_conn = sim.broker.accept(0);
    sim.broker_decoders.insert(monitor_conn, FrameDecoder::new(MAX_FRAME));
    sim.owners.insert(monitor_conn, Owner::Monitor);
    let mut opts = ConnectOptions::new(MONITOR_CLIENT_ID);
    opts.keep_alive_s = 0;
    sim.send_to_broker(monitor_conn, &Packet::Connect(opts));
    sim.send_to_broker(
        monitor_conn,
        &Packet::Subscribe {
            packet_id: 1,
            filters: vec![(DATA_FILTER.into(), QoS::AtMostOnce), (STATUS_FILTER.into(), QoS::AtMostOnce)],
        },
    );

    for (i, offset) in cfg.power_on_offsets_ms().into_iter().enumerate() {
        sim.schedule(offset, Event::PowerOn(i));
    }
    for (i, n) in sim.nodes.iter().enumerate().map(|(i, n)| (i, n.faults.clone())).collect::<Vec<_>>() {
        for rule in n {
            for at in rule.cut_transport_at_s {
                sim.schedule((at * 1000.0) as u64, Event::Cut(i));
            }
        }
    }
    let end_ms = (cfg.duration_s * 1000.0).round() as u64;
    sim.schedule(cfg.broker_tick_ms, Event::Tick);
    if cfg.kill_count() > 0 {
        sim.schedule(end_ms / 2, Event::Kill);
    }
    sim.schedule(end_ms, Event::Stop);

    while let Some(Reverse(next)) = sim.queue.pop() {
        sim.now = next.at_ms;
        sim.handle(next.event);
    }

    let published = sim.nodes.iter().map(|n| n.frames_sent).sum();
    let dropped = sim.nodes.iter().map(|n| n.node.state().dropped_count).sum();
    let report = FleetRunReport {
        nodes: cfg.nodes as u64,
        duration_s: cfg.duration_s,
        published,
        delivered: sim.monitor.delivered,
        dropped_by_policy: dropped,
        wills_fired: sim.monitor.offline,
    };
    let retained_offline = sim
        .broker
        .retained()
        .iter()
        .filter(|(t, m)| t.as_str().ends_with("/status") && &m.payload[..] == STATUS_OFFLINE.as_bytes())
        .map(|(t, _)| t.to_string())
        .collect();
    let mut traces = BTreeMap::new();
    let summaries = sim
        .nodes
        .into_iter()
        .map(|n| {
            let id = n.node.client_id().to_owned();
            if cfg.trace {
                traces.insert(id.clone(), n.trace);
            }
            NodeSummary {
                client_id: id,
                samples: n.node.state().published_count,
                dropped: n.node.state().dropped_count,
                frames_sent: n.frames_sent,
                killed: n.killed,
                final_phase: n.node.phase(),
            }
        })
        .collect();
    Ok(FleetOutcome {
        report,
        broker_stats: Some(sim.broker.stats()),
        nodes: summaries,
        retained_offline,
        traces,
        broker_console: sim.console,
    })
}
