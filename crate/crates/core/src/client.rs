//! Minimal async MQTT client over TCP, used by the live fleet driver and the
//! integration tests. QoS 0 only.

use std::io;
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpStream, ToSocketAddrs};

use crate::broker::MAX_FRAME;
use crate::codec::{
    encode_packet, ConnectOptions, ConnectReturnCode, EncodeError, FrameDecoder, FrameError, Packet, PublishMessage, QoS,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("connection refused with return code {0:?}")]
    Refused(ConnectReturnCode),
    #[error("unexpected packet {0:?}")]
    Unexpected(Box<Packet>),
    #[error("connection closed by peer")]
    Closed,
    #[error("timed out")]
    Timeout,
}

pub struct MqttClient {
    stream: TcpStream,
    decoder: FrameDecoder,
    buf: BytesMut,
    next_packet_id: u16,
}

impl MqttClient {
    /// Opens a TCP connection without sending anything.
    pub async fn open(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        Ok(MqttClient {
            stream,
            decoder: FrameDecoder::new(MAX_FRAME),
            buf: BytesMut::with_capacity(4096),
            next_packet_id: 1,
        })
    }

    /// Opens a connection and completes the CONNECT/CONNACK handshake.
    pub async fn connect(addr: impl ToSocketAddrs, opts: ConnectOptions) -> Result<Self, ClientError> {
        let mut client = Self::open(addr).await?;
        client.send(&Packet::Connect(opts)).await?;
        match client.recv_timeout(Duration::from_secs(5)).await? {
            Packet::ConnAck {
                return_code: ConnectReturnCode::Accepted,
                ..
            } => Ok(client),
            Packet::ConnAck { return_code, .. } => Err(ClientError::Refused(return_code)),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    pub async fn send(&mut self, packet: &Packet) -> Result<(), ClientError> {
        let bytes = encode_packet(packet)?;
        self.send_raw(&bytes).await
    }

    pub async fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        self.stream.write_all(bytes).await?;
        Ok(())
    }

    pub async fn publish(&mut self, topic: &str, payload: impl Into<Bytes>, retain: bool) -> Result<(), ClientError> {
        let mut msg = PublishMessage::at_most_once(topic, payload);
        msg.retain = retain;
        self.send(&Packet::Publish(msg)).await
    }

    /// Subscribes and waits for the SUBACK.
    pub async fn subscribe(&mut self, filters: &[&str]) -> Result<Packet, ClientError> {
        let packet_id = self.next_packet_id;
        self.next_packet_id = self.next_packet_id.wrapping_add(1).max(1);
        self.send(&Packet::Subscribe {
            packet_id,
            filters: filters.iter().map(|f| (f.to_string(), QoS::AtMostOnce)).collect(),
        })
        .await?;
        match self.recv_timeout(Duration::from_secs(5)).await? {
            ack @ Packet::SubAck { .. } => Ok(ack),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    pub async fn disconnect(mut self) -> Result<(), ClientError> {
        self.send(&Packet::Disconnect).await?;
        self.stream.shutdown().await?;
        Ok(())
    }

    /// Next packet from the broker; `Closed` on EOF.
    pub async fn recv(&mut self) -> Result<Packet, ClientError> {
        loop {
            if let Some(p) = self.decoder.next_packet()? {
                return Ok(p);
            }
            self.buf.clear();
            if self.stream.read_buf(&mut self.buf).await? == 0 {
                return Err(ClientError::Closed);
            }
            self.decoder.extend(&self.buf);
        }
    }

    pub async fn recv_timeout(&mut self, timeout: Duration) -> Result<Packet, ClientError> {
        tokio::time::timeout(timeout, self.recv())
            .await
            .map_err(|_| ClientError::Timeout)?
    }

    /// Drops the socket without a DISCONNECT.
    pub fn abort(self) {
        drop(self.stream);
    }
}
