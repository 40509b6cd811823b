//! Fleet runs against a real broker over TCP on the wall clock.

use std::time::Duration;

use bytes::BytesMut;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::watch;
use tokio::time::{sleep_until, Instant};

use super::{FaultRule, FleetConfig, FleetError, FleetOutcome, FleetRunReport, NodeSummary, DATA_FILTER, MONITOR_CLIENT_ID, STATUS_FILTER};
use crate::broker::MAX_FRAME;
use crate::client::{ClientError, MqttClient};
use crate::codec::{encode_packet, ConnectOptions, ConnectReturnCode, FrameDecoder, Packet};
use crate::node::{Node, NodeAction, NodeEvent, Phase, STATUS_OFFLINE};

const CONNECT_ATTEMPTS: u32 = 5;
const CONNECT_PAUSE: Duration = Duration::from_millis(250);
const DRAIN: Duration = Duration::from_millis(300);

async fn connect_with_retries(addr: &str, client_id: &str) -> Result<MqttClient, FleetError> {
    let mut last = None;
    for attempt in 0..CONNECT_ATTEMPTS {
        if attempt > 0 {
            tokio::time::sleep(CONNECT_PAUSE).await;
        }
        let mut opts = ConnectOptions::new(client_id);
        opts.keep_alive_s = 0;
        match MqttClient::connect(addr, opts).await {
            Ok(c) => return Ok(c),
            Err(e) => last = Some(e),
        }
    }
    Err(FleetError::Transport(format!(
        "broker {addr} unreachable after {CONNECT_ATTEMPTS} attempts: {}",
        last.map_or_else(String::new, |e| e.to_string())
    )))
}

#[derive(Default)]
struct MonitorCounts {
    delivered: u64,
    offline: u64,
}

async fn monitor(mut client: MqttClient, mut stop: watch::Receiver<bool>) -> MonitorCounts {
    let mut counts = MonitorCounts::default();
    loop {
        tokio::select! {
            _ = stop.changed() => break,
            packet = client.recv() => match packet {
                Ok(Packet::Publish(msg)) if !msg.retain => {
                    if msg.topic.ends_with("/data") {
                        counts.delivered += 1;
                    } else if msg.topic.ends_with("/status") && &msg.payload[..] == STATUS_OFFLINE.as_bytes() {
                        counts.offline += 1;
                    }
                }
                Ok(_) => {}
                Err(e) => {
                    log::warn!("monitor connection ended: {e}");
                    return counts;
                }
            },
        }
    }
    let _ = client.disconnect().await;
    counts
}

/// Status topics currently retained as "offline".
async fn probe_offline(addr: &str) -> Result<Vec<String>, ClientError> {
    let mut opts = ConnectOptions::new("fleet-probe");
    opts.keep_alive_s = 0;
    let mut client = MqttClient::connect(addr, opts).await?;
    client.subscribe(&[STATUS_FILTER]).await?;
    let mut offline = Vec::new();
    loop {
        match client.recv_timeout(DRAIN).await {
            Ok(Packet::Publish(msg)) if msg.retain => {
                if &msg.payload[..] == STATUS_OFFLINE.as_bytes() {
                    offline.push(msg.topic);
                }
            }
            Ok(_) => {}
            Err(ClientError::Timeout) => break,
            Err(e) => return Err(e),
        }
    }
    let _ = client.disconnect().await;
    offline.sort();
    Ok(offline)
}

struct LiveNode {
    node: Node,
    addr: String,
    stream: Option<TcpStream>,
    decoder: FrameDecoder,
    buf: BytesMut,
    faults: Vec<FaultRule>,
    frames_sent: u64,
    outbox: Vec<Packet>,
    close_after_flush: bool,
    retry_at: Option<Instant>,
    sample_at: Option<Instant>,
    keep_alive_at: Option<Instant>,
    cuts: Vec<Instant>,
    trace: Option<Vec<String>>,
    origin: Instant,
}

enum Wake {
    Timer,
    Read(std::io::Result<usize>),
}

impl LiveNode {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    fn step(&mut self, event: NodeEvent) {
        let now = self.now_ms();
        match self.node.step(now, event) {
            Ok(actions) => self.queue_actions(actions),
            Err(e) => log::trace!("{}: {e}", self.node.client_id()),
        }
    }

    fn queue_actions(&mut self, actions: Vec<NodeAction>) {
        for action in actions {
            match action {
                NodeAction::Send(p) => self.outbox.push(p),
                NodeAction::CloseTransport => self.close_after_flush = true,
                NodeAction::RetryLinkAfter(s) => self.retry_at = Some(Instant::now() + Duration::from_secs_f64(s)),
                NodeAction::ArmSampleTimer(s) => self.sample_at = Some(Instant::now() + Duration::from_secs_f64(s)),
                NodeAction::ArmKeepAlive(s) => self.keep_alive_at = Some(Instant::now() + Duration::from_secs_f64(s)),
                NodeAction::Trace(line) => {
                    if let Some(t) = self.trace.as_mut() {
                        t.push(line);
                    }
                }
            }
        }
    }

    /// Writes queued packets in order, then closes the socket if asked.
    async fn flush(&mut self) {
        while !self.outbox.is_empty() {
            let packet = self.outbox.remove(0);
            let telemetry = matches!(&packet, Packet::Publish(m) if m.topic == self.node.config().topic);
            if telemetry {
                let sample_no = self.node.state().published_count;
                let id = self.node.client_id();
                if self.faults.iter().any(|f| f.applies_to(id) && f.drops(sample_no)) {
                    self.step(NodeEvent::PublishIoError);
                    continue;
                }
            }
            let written = match (self.stream.as_mut(), encode_packet(&packet)) {
                (Some(stream), Ok(bytes)) => stream.write_all(&bytes).await.is_ok(),
                _ => false,
            };
            if telemetry {
                if written {
                    self.frames_sent += 1;
                } else {
                    self.step(NodeEvent::PublishIoError);
                }
            }
        }
        if std::mem::take(&mut self.close_after_flush) {
            self.drop_stream(true).await;
        }
    }

    async fn drop_stream(&mut self, graceful: bool) {
        if let Some(mut stream) = self.stream.take() {
            if graceful {
                let _ = stream.shutdown().await;
            }
        }
        self.sample_at = None;
        self.keep_alive_at = None;
    }

    async fn link_attempt(&mut self) {
        self.retry_at = None;
        if self.node.phase() != Phase::LinkConnecting {
            return;
        }
        match tokio::time::timeout(Duration::from_secs(2), TcpStream::connect(&self.addr)).await {
            Ok(Ok(stream)) => {
                let _ = stream.set_nodelay(true);
                self.stream = Some(stream);
                self.decoder = FrameDecoder::new(MAX_FRAME);
                self.step(NodeEvent::LinkUp);
            }
            _ => self.step(NodeEvent::LinkFail),
        }
    }

    fn on_bytes(&mut self, n: usize) {
        self.decoder.extend(&self.buf[..n]);
        self.buf.clear();
        loop {
            match self.decoder.next_packet() {
                Ok(Some(Packet::ConnAck { return_code, .. })) => {
                    let ev = match return_code {
                        ConnectReturnCode::Accepted => NodeEvent::ConnAckOk,
                        other => NodeEvent::ConnAckErr(other as u8),
                    };
                    self.step(ev);
                }
                Ok(Some(_)) => {}
                Ok(None) => break,
                Err(e) => {
                    log::warn!("{}: undecodable frame from broker: {e}", self.node.client_id());
                    self.step(NodeEvent::LinkFail);
                    break;
                }
            }
        }
    }

    fn next_deadline(&self, end: Instant) -> Instant {
        [self.retry_at, self.sample_at, self.keep_alive_at, self.cuts.first().copied()]
            .into_iter()
            .flatten()
            .fold(end, Instant::min)
    }

    /// Runs until `stop_at` (clean power-off) or `kill_at` (abrupt loss).
    async fn run(mut self, power_on_at: Instant, kill_at: Option<Instant>, stop_at: Instant) -> (NodeSummary, Option<Vec<String>>) {
        sleep_until(power_on_at).await;
        let end = kill_at.map_or(stop_at, |k| k.min(stop_at));
        if Instant::now() < end {
            self.step(NodeEvent::PowerOn);
            self.retry_at = Some(Instant::now());
        }
        let mut killed = false;
        while self.node.phase() != Phase::PoweredOff {
            let deadline = self.next_deadline(end);
            let wake = {
                let read = async {
                    match self.stream.as_mut() {
                        Some(s) => s.read_buf(&mut self.buf).await,
                        None => std::future::pending().await,
                    }
                };
                tokio::select! {
                    _ = sleep_until(deadline) => Wake::Timer,
                    r = read => Wake::Read(r),
                }
            };
            let now = Instant::now();
            match wake {
                Wake::Read(Ok(n)) if n > 0 => self.on_bytes(n),
                Wake::Read(_) => {
                    self.drop_stream(false).await;
                    self.step(NodeEvent::TransportLost);
                }
                Wake::Timer if now >= end => {
                    if kill_at.is_some_and(|k| k <= now) {
                        killed = true;
                        self.drop_stream(false).await;
                        self.node.crash(self.now_ms());
                    } else {
                        self.step(NodeEvent::PowerOff);
                    }
                }
                Wake::Timer => {
                    if self.cuts.first().is_some_and(|c| *c <= now) {
                        self.cuts.remove(0);
                        if self.stream.is_some() {
                            self.drop_stream(false).await;
                            self.step(NodeEvent::TransportLost);
                        }
                    } else if self.retry_at.is_some_and(|t| t <= now) {
                        self.link_attempt().await;
                    } else if self.sample_at.is_some_and(|t| t <= now) {
                        self.sample_at = None;
                        self.step(NodeEvent::SampleTimer);
                    } else if self.keep_alive_at.is_some_and(|t| t <= now) {
                        self.keep_alive_at = None;
                        self.step(NodeEvent::KeepAliveTimer);
                    }
                }
            }
            self.flush().await;
        }
        let state = self.node.state();
        let summary = NodeSummary {
            client_id: self.node.client_id().to_owned(),
            samples: state.published_count,
            dropped: state.dropped_count,
            frames_sent: self.frames_sent,
            killed,
            final_phase: self.node.phase(),
        };
        (summary, self.trace)
    }
}

/// Runs the fleet against the broker at `addr` in real time.
pub async fn run_tcp(cfg: &FleetConfig, addr: &str) -> Result<FleetOutcome, FleetError> {
    cfg.validate()?;
    let mut monitor_client = connect_with_retries(addr, MONITOR_CLIENT_ID).await?;
    monitor_client
        .subscribe(&[DATA_FILTER, STATUS_FILTER])
        .await
        .map_err(|e| FleetError::Transport(e.to_string()))?;
    let (stop_tx, stop_rx) = watch::channel(false);
    let monitor_task = tokio::spawn(monitor(monitor_client, stop_rx));

    let origin = Instant::now();
    let stop_at = origin + Duration::from_secs_f64(cfg.duration_s);
    let kill_at = origin + Duration::from_secs_f64(cfg.duration_s / 2.0);
    let kill_set = cfg.kill_set();
    let mut tasks = tokio::task::JoinSet::new();
    for (i, offset_ms) in cfg.power_on_offsets_ms().into_iter().enumerate() {
        let node_cfg = cfg.node_config(i)?;
        let id = node_cfg.client_id.clone();
        let node = Node::new(node_cfg).map_err(|source| FleetError::Node { id: id.clone(), source })?;
        let faults: Vec<FaultRule> = cfg.faults.iter().filter(|f| f.applies_to(&id)).cloned().collect();
        let mut cuts: Vec<Instant> = faults
            .iter()
            .flat_map(|f| f.cut_transport_at_s.iter())
            .map(|s| origin + Duration::from_secs_f64(*s))
            .collect();
        cuts.sort();
        let live = LiveNode {
            node,
            addr: addr.to_owned(),
            stream: None,
            decoder: FrameDecoder::new(MAX_FRAME),
            buf: BytesMut::with_capacity(1024),
            faults,
            frames_sent: 0,
            outbox: Vec::new(),
            close_after_flush: false,
            retry_at: None,
            sample_at: None,
            keep_alive_at: None,
            cuts,
            trace: cfg.trace.then(Vec::new),
            origin,
        };
        let power_on = origin + Duration::from_millis(offset_ms + cfg.link_setup_ms);
        let kill = kill_set.binary_search(&i).is_ok().then_some(kill_at);
        tasks.spawn(async move { (i, live.run(power_on, kill, stop_at).await) });
    }

    let mut results = Vec::with_capacity(cfg.nodes);
    while let Some(joined) = tasks.join_next().await {
        results.push(joined.map_err(|e| FleetError::Transport(format!("node task failed: {e}")))?);
    }
    results.sort_by_key(|(i, _)| *i);
    tokio::time::sleep(DRAIN).await;
    let _ = stop_tx.send(true);
    let counts = monitor_task
        .await
        .map_err(|e| FleetError::Transport(format!("monitor task failed: {e}")))?;
    let retained_offline = probe_offline(addr)
        .await
        .map_err(|e| FleetError::Transport(e.to_string()))?;

    let mut traces = std::collections::BTreeMap::new();
    let mut nodes = Vec::with_capacity(results.len());
    for (_, (summary, trace)) in results {
        if let Some(t) = trace {
            traces.insert(summary.client_id.clone(), t);
        }
        nodes.push(summary);
    }
    let report = FleetRunReport {
        nodes: cfg.nodes as u64,
        duration_s: cfg.duration_s,
        published: nodes.iter().map(|n| n.frames_sent).sum(),
        delivered: counts.delivered,
        dropped_by_policy: nodes.iter().map(|n| n.dropped).sum(),
        wills_fired: counts.offline,
    };
    Ok(FleetOutcome {
        report,
        broker_stats: None,
        nodes,
        retained_offline,
        traces,
        broker_console: Vec::new(),
    })
}
