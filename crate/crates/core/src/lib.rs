//! Software reconstruction of an MQTT-based wireless sensor network: packet
//! codec, broker, message log, simulated sensor nodes and a read-only REST
//! gateway.

pub mod broker;
pub mod client;
pub mod codec;
pub mod fleet;
pub mod gateway;
pub mod node;
pub mod persistence;
pub mod poll;
pub mod server;
pub mod topic;
