//! Simulated sensor node: a humidity/temperature sensor plus a barometer
//! behind a WiFi link, publishing JSON telemetry at QoS 0.
//!
//! [`Node`] is a deterministic state machine. A driver (the in-memory fleet
//! simulator or a TCP task) feeds it [`NodeEvent`]s with the current time
//! and executes the returned [`NodeAction`]s. A failed publish is counted and
//! forgotten; the node never retransmits.

pub mod payload;
pub mod sensor;

use bytes::Bytes;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ConnectOptions, Packet, PublishMessage, QoS, WillMessage};
use crate::topic::TopicName;

pub use payload::{build_payload, format_trimmed};
pub use sensor::{
    Conditions, Environment, EnvironmentModel, HumTemp, PressureProfile, Range, Sensor, SensorProfile,
    SensorReading,
};

pub const STATUS_ONLINE: &str = "online";
pub const STATUS_OFFLINE: &str = "offline";

pub fn data_topic(client_id: &str) -> String {
    format!("sensors/{client_id}/data")
}

pub fn status_topic(client_id: &str) -> String {
    format!("sensors/{client_id}/status")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("invalid topic: {0}")]
    Topic(#[from] crate::topic::TopicError),
    #[error(transparent)]
    Profile(#[from] sensor::ProfileError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub client_id: String,
    pub broker_addr: String,
    pub topic: String,
    pub status_topic: String,
    pub sample_interval_s: f64,
    pub keep_alive_s: u16,
    pub battery_wh: f64,
    /// Nominal 18650 cell voltage.
    pub bus_voltage_v: f64,
    pub avg_current_a: f64,
    pub connect_retry_backoff_s: f64,
    pub profile: SensorProfile,
    pub environment: EnvironmentModel,
    pub rng_seed: u64,
}

impl NodeConfig {
    pub fn new(client_id: impl Into<String>, rng_seed: u64) -> Self {
        let client_id = client_id.into();
        NodeConfig {
            topic: data_topic(&client_id),
            status_topic: status_topic(&client_id),
            client_id,
            broker_addr: "127.0.0.1:1883".into(),
            sample_interval_s: 10.0,
            keep_alive_s: 15,
            battery_wh: 9.62,
            bus_voltage_v: 3.7,
            avg_current_a: 0.080,
            connect_retry_backoff_s: 2.0,
            profile: SensorProfile::dht22(),
            environment: EnvironmentModel::default(),
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            (self.battery_wh, "battery_wh"),
            (self.bus_voltage_v, "bus_voltage_v"),
            (self.avg_current_a, "avg_current_a"),
            (self.sample_interval_s, "sample_interval_s"),
        ];
        for (v, name) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(ConfigError::NotPositive(name));
            }
        }
        if self.connect_retry_backoff_s.is_nan() || self.connect_retry_backoff_s < 0.0 {
            return Err(ConfigError::NotPositive("connect_retry_backoff_s"));
        }
        TopicName::new(self.topic.as_str())?;
        TopicName::new(self.status_topic.as_str())?;
        self.profile.validate()?;
        Ok(())
    }

    pub fn estimated_lifetime_h(&self) -> Result<f64, LifetimeError> {
        estimate_lifetime(self.battery_wh, self.bus_voltage_v, self.avg_current_a)
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("battery capacity, voltage and current must all be positive")]
pub struct LifetimeError;

/// Hours of operation: capacity / (voltage × average current).
pub fn estimate_lifetime(battery_wh: f64, bus_voltage_v: f64, avg_current_a: f64) -> Result<f64, LifetimeError> {
    if !(battery_wh > 0.0 && bus_voltage_v > 0.0 && avg_current_a > 0.0) {
        return Err(LifetimeError);
    }
    Ok(battery_wh / (bus_voltage_v * avg_current_a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    PoweredOff,
    LinkConnecting,
    MqttConnecting,
    Connected,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::PoweredOff, Phase::LinkConnecting, Phase::MqttConnecting, Phase::Connected];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeEvent {
    PowerOn,
    LinkUp,
    LinkFail,
    ConnAckOk,
    ConnAckErr(u8),
    SampleTimer,
    KeepAliveTimer,
    PublishIoError,
    TransportLost,
    PowerOff,
}

impl NodeEvent {
    pub const ALL: [NodeEvent; 10] = [
        NodeEvent::PowerOn,
        NodeEvent::LinkUp,
        NodeEvent::LinkFail,
        NodeEvent::ConnAckOk,
        NodeEvent::ConnAckErr(5),
        NodeEvent::SampleTimer,
        NodeEvent::KeepAliveTimer,
        NodeEvent::PublishIoError,
        NodeEvent::TransportLost,
        NodeEvent::PowerOff,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeAction {
    Send(Packet),
    CloseTransport,
    /// Try to bring the link up again after the delay.
    RetryLinkAfter(f64),
    ArmSampleTimer(f64),
    ArmKeepAlive(f64),
    /// A serial-console style trace line.
    Trace(String),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("event {event:?} is not valid in phase {phase:?}")]
pub struct TransitionError {
    pub phase: Phase,
    pub event: NodeEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub phase: Phase,
    pub consecutive_failures: u32,
    pub energy_used_wh: f64,
    /// Telemetry publishes handed to the transport.
    pub published_count: u64,
    /// Of those, the ones the transport failed to send.
    pub dropped_count: u64,
    /// Incremented every time the node reaches `Connected`; drivers tag
    /// timers with it and discard stale ones.
    pub epoch: u64,
    pub battery_depleted: bool,
}

impl NodeState {
    fn new() -> Self {
        NodeState {
            phase: Phase::PoweredOff,
            consecutive_failures: 0,
            energy_used_wh: 0.0,
            published_count: 0,
            dropped_count: 0,
            epoch: 0,
            battery_depleted: false,
        }
    }

    /// Publishes that actually reached the wire.
    pub fn sent_count(&self) -> u64 {
        self.published_count - self.dropped_count
    }
}

pub struct Node {
    config: NodeConfig,
    state: NodeState,
    env: Environment,
    sensor: Sensor,
    rng: ChaCha8Rng,
    /// Offset that makes environment time start at the first power-on.
    energy_clock_ms: u64,
}

impl Node {
    pub fn new(config: NodeConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let sensor = Sensor::new(config.profile.clone(), &mut rng);
        Ok(Self::with_sensor(config, sensor, rng))
    }

    /// Uses the given sensor instead of drawing a bias from the seed.
    pub fn with_sensor(config: NodeConfig, sensor: Sensor, rng: ChaCha8Rng) -> Self {
        let env = Environment::new(config.environment, &config.profile, config.rng_seed ^ 0x5EED_E4F1);
        Node {
            config,
            state: NodeState::new(),
            env,
            sensor,
            rng,
            energy_clock_ms: 0,
        }
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn state(&self) -> &NodeState {
        &self.state
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn client_id(&self) -> &str {
        &self.config.client_id
    }

    fn account_energy(&mut self, now_ms: u64) {
        if self.state.phase == Phase::PoweredOff {
            return;
        }
        let elapsed_ms = now_ms.saturating_sub(self.energy_clock_ms);
        self.energy_clock_ms = self.energy_clock_ms.max(now_ms);
        let hours = elapsed_ms as f64 / 3_600_000.0;
        self.state.energy_used_wh += self.config.bus_voltage_v * self.config.avg_current_a * hours;
        self.state.energy_used_wh = self.state.energy_used_wh.min(self.config.battery_wh);
    }

    fn connect_packet(&self) -> Packet {
        let mut opts = ConnectOptions::new(self.config.client_id.as_str());
        opts.keep_alive_s = self.config.keep_alive_s;
        opts.clean_session = true;
        opts.will = Some(WillMessage {
            topic: self.config.status_topic.clone(),
            payload: Bytes::from_static(STATUS_OFFLINE.as_bytes()),
            qos: QoS::AtMostOnce,
            retain: true,
        });
        Packet::Connect(opts)
    }

    fn retry(&mut self) -> NodeAction {
        self.state.consecutive_failures += 1;
        NodeAction::RetryLinkAfter(self.config.connect_retry_backoff_s)
    }

    /// Abrupt power loss: no DISCONNECT and no trace, the transport simply
    /// goes silent. The node can be powered on again later.
    pub fn crash(&mut self, now_ms: u64) {
        self.account_energy(now_ms);
        self.state.phase = Phase::PoweredOff;
    }

    /// Takes one reading at `now_ms`.
    pub fn sample(&mut self, now_ms: u64) -> SensorReading {
        let t_s = now_ms as f64 / 1000.0;
        let truth = self.env.ground_truth(t_s);
        self.sensor.sample(truth, &mut self.rng, now_ms)
    }

    /// Applies one event. Pairs outside the transition table are rejected
    /// and leave the state untouched.
    pub fn step(&mut self, now_ms: u64, event: NodeEvent) -> Result<Vec<NodeAction>, TransitionError> {
        use NodeEvent as E;
        use Phase as P;

        let phase = self.state.phase;
        let invalid = Err(TransitionError { phase, event });

        self.account_energy(now_ms);
        if phase != P::PoweredOff && self.state.energy_used_wh >= self.config.battery_wh {
            // brown-out: no DISCONNECT, so the broker publishes the will
            self.state.phase = P::PoweredOff;
            self.state.battery_depleted = true;
            return Ok(vec![
                NodeAction::Trace("battery depleted".into()),
                NodeAction::CloseTransport,
            ]);
        }

        let actions = match (phase, event) {
            (P::PoweredOff, E::PowerOn) => {
                if self.state.battery_depleted {
                    return invalid;
                }
                self.state.phase = P::LinkConnecting;
                self.energy_clock_ms = now_ms;
                vec![]
            }
            (P::LinkConnecting, E::LinkUp) => {
                self.state.phase = P::MqttConnecting;
                vec![NodeAction::Send(self.connect_packet())]
            }
            (P::LinkConnecting, E::LinkFail) => vec![self.retry()],
            (P::MqttConnecting, E::ConnAckOk) => {
                self.state.phase = P::Connected;
                self.state.consecutive_failures = 0;
                self.state.epoch += 1;
                let online = PublishMessage::at_most_once(self.config.status_topic.as_str(), STATUS_ONLINE).retained();
                let mut out = vec![
                    NodeAction::Trace("Attempting MQTT connection...connected".into()),
                    NodeAction::Send(Packet::Publish(online)),
                    NodeAction::ArmSampleTimer(0.0),
                ];
                if self.config.keep_alive_s > 0 {
                    out.push(NodeAction::ArmKeepAlive(self.config.keep_alive_s as f64));
                }
                out
            }
            (P::MqttConnecting, E::ConnAckErr(code)) => {
                self.state.phase = P::LinkConnecting;
                vec![
                    NodeAction::Trace(format!(
                        "Attempting MQTT connection...failed, rc={code} try again in {} seconds",
                        format_trimmed(self.config.connect_retry_backoff_s)
                    )),
                    NodeAction::CloseTransport,
                    self.retry(),
                ]
            }
            (P::MqttConnecting | P::Connected, E::TransportLost) => {
                self.state.phase = P::LinkConnecting;
                vec![self.retry()]
            }
            (P::MqttConnecting | P::Connected, E::LinkFail) => {
                self.state.phase = P::LinkConnecting;
                vec![NodeAction::CloseTransport, self.retry()]
            }
            (P::Connected, E::SampleTimer) => {
                let reading = self.sample(now_ms);
                let body = build_payload(&reading);
                self.state.published_count += 1;
                vec![
                    NodeAction::Trace(body.clone()),
                    NodeAction::Send(Packet::Publish(PublishMessage::at_most_once(
                        self.config.topic.as_str(),
                        body,
                    ))),
                    NodeAction::ArmSampleTimer(self.config.sample_interval_s),
                ]
            }
            (P::Connected, E::KeepAliveTimer) => vec![
                NodeAction::Send(Packet::PingReq),
                NodeAction::ArmKeepAlive(self.config.keep_alive_s as f64),
            ],
            (P::Connected, E::PublishIoError) => {
                self.state.dropped_count += 1;
                vec![]
            }
            (P::LinkConnecting | P::MqttConnecting | P::Connected, E::PowerOff) => {
                self.state.phase = P::PoweredOff;
                    match phase {
                    P::Connected => vec![NodeAction::Send(Packet::Disconnect), NodeAction::CloseTransport],
                    P::MqttConnecting => vec![NodeAction::CloseTransport],
                    _ => vec![],
                }
            }
            _ => return invalid,
        };
        Ok(actions)
    }
}
