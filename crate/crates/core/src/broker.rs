//! MQTT 3.1.1 routing core.
//!
//! The broker is sans-IO: transports feed it decoded packets together with
//! the current time and carry out the returned [`Effects`]. Every call is
//! applied atomically, so a driver that serializes calls per broker gets a
//! total order consistent with each connection's arrival order.
//!
//! All deliveries go out at QoS 0. QoS 1/2 publishes from clients are
//! acknowledged mechanically (PUBACK, or PUBREC/PUBCOMP) and then treated
//! like QoS 0.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use bytes::Bytes;

use crate::codec::{
    ConnectReturnCode, Packet, PublishMessage, QoS, SubscribeReturnCode, WillMessage, PROTOCOL_LEVEL,
};
use crate::persistence::{MessageStore, MAX_PAYLOAD};
use crate::topic::{SubscriptionTrie, TopicFilter, TopicName};

pub type ConnId = u64;

/// Largest frame body a transport should buffer: a maximal payload plus a
/// maximal topic and packet id.
pub const MAX_FRAME: u32 = (MAX_PAYLOAD + 2 + u16::MAX as usize + 2) as u32;

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// Silence longer than `keep_alive_s * keep_alive_grace` is abnormal.
    pub keep_alive_grace: f64,
    pub max_payload: usize,
    pub max_client_id_chars: usize,
    /// Emit a console line for every Nth publish; 0 disables.
    pub log_every: u64,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            keep_alive_grace: 1.5,
            max_payload: MAX_PAYLOAD,
            max_client_id_chars: 23,
            log_every: 0,
        }
    }
}

/// What the transport must do after a broker call, in order.
#[derive(Debug, Default, PartialEq)]
pub struct Effects {
    pub sends: Vec<(ConnId, Packet)>,
    pub closes: Vec<ConnId>,
    pub console: Vec<String>,
}

impl Effects {
    fn send(&mut self, conn: ConnId, packet: Packet) {
        self.sends.push((conn, packet));
    }

    /// Packets addressed to `conn`.
    pub fn sent_to(&self, conn: ConnId) -> Vec<&Packet> {
        self.sends.iter().filter(|(c, _)| *c == conn).map(|(_, p)| p).collect()
    }

    pub fn closes(&self, conn: ConnId) -> bool {
        self.closes.contains(&conn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossReason {
    TransportLost,
    KeepAliveExpired,
    ProtocolViolation(&'static str),
    Takeover,
}

impl LossReason {
    fn describe(&self) -> &'static str {
        match self {
            LossReason::TransportLost => "transport lost",
            LossReason::KeepAliveExpired => "keep-alive expired",
            LossReason::ProtocolViolation(why) => why,
            LossReason::Takeover => "session taken over",
        }
    }
}

#[derive(Debug)]
struct Connection {
    client_id: Option<String>,
    keep_alive_s: u16,
    last_activity_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub client_id: String,
    pub clean_session: bool,
    pub subscriptions: BTreeMap<String, (TopicFilter, QoS)>,
    pub will: Option<WillMessage>,
    pub keep_alive_s: u16,
    pub last_activity_ms: u64,
    pub conn: Option<ConnId>,
}

impl Session {
    pub fn connected(&self) -> bool {
        self.conn.is_some()
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct BrokerStats {
    pub connects_accepted: u64,
    pub publishes_received: u64,
    pub deliveries: u64,
    pub wills_published: u64,
    pub protocol_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetainedMessage {
    pub payload: Bytes,
    pub qos: QoS,
}

/// Last retained publish per topic; an empty payload removes the entry.
#[derive(Debug, Default)]
pub struct RetainedStore {
    entries: BTreeMap<TopicName, RetainedMessage>,
}

impl RetainedStore {
    pub fn apply(&mut self, topic: &TopicName, payload: &Bytes, qos: QoS) {
        if payload.is_empty() {
            self.entries.remove(topic);
        } else {
            self.entries.insert(
                topic.clone(),
                RetainedMessage {
                    payload: payload.clone(),
                    qos,
                },
            );
        }
    }

    pub fn get(&self, topic: &str) -> Option<&RetainedMessage> {
        TopicName::new(topic).ok().and_then(|t| self.entries.get(&t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TopicName, &RetainedMessage)> {
        self.entries.iter()
    }

    pub fn matching<'a>(&'a self, filter: &'a TopicFilter) -> impl Iterator<Item = (&'a TopicName, &'a RetainedMessage)> + 'a {
        self.entries.iter().filter(move |(t, _)| filter.matches(t))
    }
}

pub struct Broker {
    config: BrokerConfig,
    store: Arc<MessageStore>,
    conns: BTreeMap<ConnId, Connection>,
    sessions: BTreeMap<String, Session>,
    trie: SubscriptionTrie<String>,
    retained: RetainedStore,
    stats: BrokerStats,
    next_conn: ConnId,
    next_auto_id: u64,
}

impl Broker {
    pub fn new(config: BrokerConfig, store: Arc<MessageStore>) -> Self {
        Broker {
            config,
            store,
            conns: BTreeMap::new(),
            sessions: BTreeMap::new(),
            trie: SubscriptionTrie::new(),
            retained: RetainedStore::default(),
            stats: BrokerStats::default(),
            next_conn: 1,
            next_auto_id: 0,
        }
    }

    pub fn store(&self) -> &Arc<MessageStore> {
        &self.store
    }

    pub fn stats(&self) -> BrokerStats {
        self.stats
    }

    pub fn retained(&self) -> &RetainedStore {
        &self.retained
    }

    pub fn session(&self, client_id: &str) -> Option<&Session> {
        self.sessions.get(client_id)
    }

    pub fn connection_count(&self) -> usize {
        self.conns.len()
    }

    /// Registers a new transport connection; the first packet on it must be
    /// CONNECT.
    pub fn accept(&mut self, now_ms: u64) -> ConnId {
        let id = self.next_conn;
        self.next_conn += 1;
        self.conns.insert(
            id,
            Connection {
                client_id: None,
                keep_alive_s: 0,
                last_activity_ms: now_ms,
            },
        );
        id
    }

    pub fn handle_packet(&mut self, conn: ConnId, packet: Packet, now_ms: u64) -> Effects {
        let mut fx = Effects::default();
        let Some(c) = self.conns.get_mut(&conn) else {
            return fx;
        };
        c.last_activity_ms = now_ms;
        let client_id = c.client_id.clone();
        if let Some(id) = &client_id {
            if let Some(s) = self.sessions.get_mut(id) {
                s.last_activity_ms = now_ms;
            }
        }

        let Some(client_id) = client_id else {
            match packet {
                Packet::Connect(opts) => self.connect(conn, opts, now_ms, &mut fx),
                _ => {
                    // nothing to clean up: no session exists yet
                    self.conns.remove(&conn);
                    self.stats.protocol_violations += 1;
                    fx.closes.push(conn);
                }
            }
            return fx;
        };

        match packet {
            Packet::Connect(_) => {
                self.lose(conn, LossReason::ProtocolViolation("second CONNECT"), now_ms, &mut fx);
            }
            Packet::Publish(msg) => self.publish_from(conn, msg, now_ms, &mut fx),
            Packet::PubRel { packet_id } => fx.send(conn, Packet::PubComp { packet_id }),
            // acknowledgements for QoS>0 messages the broker never sends
            Packet::PubAck { .. } | Packet::PubRec { .. } | Packet::PubComp { .. } => {}
            Packet::Subscribe { packet_id, filters } => {
                self.subscribe(conn, &client_id, packet_id, filters, &mut fx);
            }
            Packet::Unsubscribe { packet_id, filters } => {
                for raw in filters {
                    if let Ok(filter) = TopicFilter::new(raw.as_str()) {
                        self.trie.remove(&filter, &client_id);
                    }
                    if let Some(s) = self.sessions.get_mut(&client_id) {
                        s.subscriptions.remove(&raw);
                    }
                }
                fx.send(conn, Packet::UnsubAck { packet_id });
            }
            Packet::PingReq => fx.send(conn, Packet::PingResp),
            Packet::Disconnect => self.disconnect(conn, &client_id, &mut fx),
            Packet::ConnAck { .. } | Packet::SubAck { .. } | Packet::UnsubAck { .. } | Packet::PingResp => {
                self.lose(conn, LossReason::ProtocolViolation("server-only packet from client"), now_ms, &mut fx);
            }
        }
        fx
    }

    /// The transport closed without a DISCONNECT.
    pub fn handle_connection_loss(&mut self, conn: ConnId, now_ms: u64) -> Effects {
        let mut fx = Effects::default();
        self.lose(conn, LossReason::TransportLost, now_ms, &mut fx);
        fx
    }

    /// A frame could not be decoded or exceeded the size limit.
    pub fn handle_protocol_violation(&mut self, conn: ConnId, why: &'static str, now_ms: u64) -> Effects {
        let mut fx = Effects::default();
        self.lose(conn, LossReason::ProtocolViolation(why), now_ms, &mut fx);
        fx
    }

    /// Expires connections whose keep-alive deadline has passed.
    pub fn tick(&mut self, now_ms: u64) -> Effects {
        let grace = self.config.keep_alive_grace;
        let expired: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, c)| c.client_id.is_some() && c.keep_alive_s > 0)
            .filter(|(_, c)| {
                let limit_ms = (c.keep_alive_s as f64 * grace * 1000.0) as u64;
                now_ms.saturating_sub(c.last_activity_ms) > limit_ms
            })
            .map(|(id, _)| *id)
            .collect();
        let mut fx = Effects::default();
        for conn in expired {
            self.lose(conn, LossReason::KeepAliveExpired, now_ms, &mut fx);
        }
        fx
    }

    /// Routes a publish to every matching session (once per session), logs
    /// it, refreshes the latest-value cache and applies the retain flag.
    /// Returns the connections that received it.
    pub fn handle_publish(&mut self, topic: &TopicName, msg: &PublishMessage, now_ms: u64, fx: &mut Effects) -> Vec<ConnId> {
        self.stats.publishes_received += 1;
        if let Err(e) = self.store.append(topic, msg.payload.clone(), now_ms) {
            log::error!("dropping publish on {topic} from log: {e}");
        }
        if msg.retain {
            self.retained.apply(topic, &msg.payload, msg.qos);
        }
        if self.config.log_every > 0 && self.stats.publishes_received.is_multiple_of(self.config.log_every) {
            fx.console.push(format!(
                "message #{} topic={} bytes={}",
                self.stats.publishes_received,
                topic,
                msg.payload.len()
            ));
        }

        let mut targets = BTreeSet::new();
        self.trie.for_each_match(topic, |client| {
            targets.insert(client.clone());
        });
        let mut delivered = Vec::with_capacity(targets.len());
        for client in targets {
            let Some(conn) = self.sessions.get(&client).and_then(|s| s.conn) else {
                continue;
            };
            fx.send(
                conn,
                Packet::Publish(PublishMessage::at_most_once(topic.as_str(), msg.payload.clone())),
            );
            delivered.push(conn);
        }
        self.stats.deliveries += delivered.len() as u64;
        delivered
    }

    fn connect(&mut self, conn: ConnId, mut opts: crate::codec::ConnectOptions, now_ms: u64, fx: &mut Effects) {
        let refuse = |broker: &mut Broker, fx: &mut Effects, code: ConnectReturnCode| {
            fx.send(
                conn,
                Packet::ConnAck {
                    session_present: false,
                    return_code: code,
                },
            );
            broker.conns.remove(&conn);
            fx.closes.push(conn);
        };
        if opts.protocol_level != PROTOCOL_LEVEL {
            return refuse(self, fx, ConnectReturnCode::UnacceptableProtocolVersion);
        }
        if opts.client_id.is_empty() {
            if !opts.clean_session {
                return refuse(self, fx, ConnectReturnCode::IdentifierRejected);
            }
            opts.client_id = format!("auto-{}", self.next_auto_id);
            self.next_auto_id += 1;
        }
        if opts.client_id.chars().count() > self.config.max_client_id_chars {
            return refuse(self, fx, ConnectReturnCode::IdentifierRejected);
        }
        if let Some(will) = &opts.will {
            if TopicName::new(will.topic.as_str()).is_err() || will.payload.len() > self.config.max_payload {
                self.conns.remove(&conn);
                self.stats.protocol_violations += 1;
                fx.closes.push(conn);
                return;
            }
        }

        let client_id = opts.client_id.clone();
        if let Some(old) = self.sessions.get(&client_id).and_then(|s| s.conn) {
            self.lose(old, LossReason::Takeover, now_ms, fx);
        }

        let session_present = if opts.clean_session {
            self.drop_session(&client_id);
            false
        } else {
            self.sessions.contains_key(&client_id)
        };
        let session = self.sessions.entry(client_id.clone()).or_insert_with(|| Session {
            client_id: client_id.clone(),
            clean_session: opts.clean_session,
            subscriptions: BTreeMap::new(),
            will: None,
            keep_alive_s: 0,
            last_activity_ms: now_ms,
            conn: None,
        });
        session.clean_session = opts.clean_session;
        session.will = opts.will.clone();
        session.keep_alive_s = opts.keep_alive_s;
        session.last_activity_ms = now_ms;
        session.conn = Some(conn);

        let c = self.conns.get_mut(&conn).expect("connection registered");
        c.client_id = Some(client_id.clone());
        c.keep_alive_s = opts.keep_alive_s;
        c.last_activity_ms = now_ms;

        self.stats.connects_accepted += 1;
        fx.send(
            conn,
            Packet::ConnAck {
                session_present,
                return_code: ConnectReturnCode::Accepted,
            },
        );
        fx.console.push(format!(
            "connect client={client_id} conn={conn} clean_session={} keep_alive={}s will={}",
            opts.clean_session,
            opts.keep_alive_s,
            opts.will.as_ref().map_or("none", |w| w.topic.as_str())
        ));
    }

    fn publish_from(&mut self, conn: ConnId, msg: PublishMessage, now_ms: u64, fx: &mut Effects) {
        let Ok(topic) = TopicName::new(msg.topic.as_str()) else {
            return self.lose(conn, LossReason::ProtocolViolation("invalid publish topic"), now_ms, fx);
        };
        if msg.payload.len() > self.config.max_payload {
            return self.lose(conn, LossReason::ProtocolViolation("payload too large"), now_ms, fx);
        }
        match (msg.qos, msg.packet_id) {
            (QoS::AtLeastOnce, Some(packet_id)) => fx.send(conn, Packet::PubAck { packet_id }),
            (QoS::ExactlyOnce, Some(packet_id)) => fx.send(conn, Packet::PubRec { packet_id }),
            _ => {}
        }
        self.handle_publish(&topic, &msg, now_ms, fx);
    }

    fn subscribe(&mut self, conn: ConnId, client_id: &str, packet_id: u16, filters: Vec<(String, QoS)>, fx: &mut Effects) {
        let mut codes = Vec::with_capacity(filters.len());
        let mut accepted = Vec::new();
        for (raw, _requested) in filters {
            match TopicFilter::new(raw.as_str()) {
                Ok(filter) => {
                    self.trie.insert(&filter, client_id.to_owned());
                    if let Some(s) = self.sessions.get_mut(client_id) {
                        s.subscriptions.insert(raw, (filter.clone(), QoS::AtMostOnce));
                    }
                    codes.push(SubscribeReturnCode::Granted(QoS::AtMostOnce));
                    accepted.push(filter);
                }
                Err(_) => codes.push(SubscribeReturnCode::Failure),
            }
        }
        fx.send(
            conn,
            Packet::SubAck {
                packet_id,
                return_codes: codes,
            },
        );
        let mut seen = BTreeSet::new();
        for filter in &accepted {
            for (topic, msg) in self.retained.matching(filter) {
                if seen.insert(topic.clone()) {
                    let mut p = PublishMessage::at_most_once(topic.as_str(), msg.payload.clone());
                    p.retain = true;
                    fx.send(conn, Packet::Publish(p));
                    self.stats.deliveries += 1;
                }
            }
        }
    }

    fn disconnect(&mut self, conn: ConnId, client_id: &str, fx: &mut Effects) {
        self.conns.remove(&conn);
        fx.closes.push(conn);
        let clean = match self.sessions.get_mut(client_id) {
            Some(s) => {
                s.will = None;
                s.conn = None;
                s.clean_session
            }
            None => false,
        };
        if clean {
            self.drop_session(client_id);
        }
        fx.console.push(format!("disconnect client={client_id} conn={conn} reason=clean"));
    }

    /// Abnormal end of a connection: publish the will (once), then forget
    /// clean sessions. No-op for unknown or already closed connections.
    fn lose(&mut self, conn: ConnId, reason: LossReason, now_ms: u64, fx: &mut Effects) {
        let Some(c) = self.conns.remove(&conn) else {
            return;
        };
        fx.closes.push(conn);
        if matches!(reason, LossReason::ProtocolViolation(_)) {
            self.stats.protocol_violations += 1;
        }
        let Some(client_id) = c.client_id else {
            return;
        };
        fx.console.push(format!(
            "disconnect client={client_id} conn={conn} reason={}",
            reason.describe()
        ));
        let Some(session) = self.sessions.get_mut(&client_id) else {
            return;
        };
        session.conn = None;
        let will = session.will.take();
        let clean = session.clean_session;
        if clean {
            self.drop_session(&client_id);
        }
        if let Some(will) = will {
            let topic = TopicName::new(will.topic.as_str()).expect("validated at connect");
            let mut msg = PublishMessage::at_most_once(will.topic.as_str(), will.payload.clone());
            msg.retain = will.retain;
            msg.qos = will.qos;
            self.stats.wills_published += 1;
            fx.console.push(format!(
                "will client={client_id} topic={topic} bytes={} retain={}",
                will.payload.len(),
                will.retain
            ));
            self.handle_publish(&topic, &msg, now_ms, fx);
        }
    }

    fn drop_session(&mut self, client_id: &str) {
        if let Some(s) = self.sessions.remove(client_id) {
            for (filter, _) in s.subscriptions.values() {
                self.trie.remove(filter, &client_id.to_owned());
            }
        }
    }
}
