//! MQTT 3.1.1 control packet codec.
//!
//! Every packet is `fixed header byte ++ remaining length ++ variable header
//! ++ payload`. The remaining length uses the base-128 continuation scheme
//! (at most four bytes), strings and binary fields carry a two byte
//! big-endian length prefix. The codec is policy free: it enforces the wire
//! grammar only and leaves topic validity and client id limits to the broker.

use bytes::{BufMut, Bytes, BytesMut};
use thiserror::Error;

/// Largest value representable in the four byte remaining-length field.
pub const MAX_REMAINING_LENGTH: u32 = 268_435_455;

/// Protocol level byte for MQTT 3.1.1.
pub const PROTOCOL_LEVEL: u8 = 4;

const PROTOCOL_NAME: &str = "MQTT";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("remaining length {0} exceeds {MAX_REMAINING_LENGTH}")]
    LengthOverflow(u64),
    #[error("invalid packet: {0}")]
    InvalidPacket(&'static str),
    #[error("string is longer than 65535 bytes or contains NUL")]
    BadString,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("remaining length field longer than four bytes")]
    MalformedLength,
    /// More input is required; the value is the minimum number of additional
    /// bytes before decoding can make progress.
    #[error("incomplete packet, need at least {0} more byte(s)")]
    Incomplete(usize),
    #[error("unknown packet type {0}")]
    UnknownType(u8),
    #[error("reserved flags {flags:#06b} invalid for packet type {packet_type}")]
    MalformedFlags { packet_type: u8, flags: u8 },
    #[error("string field is not valid UTF-8 or contains NUL")]
    BadString,
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum QoS {
    #[default]
    AtMostOnce = 0,
    AtLeastOnce = 1,
    ExactlyOnce = 2,
}

impl QoS {
    pub fn from_u8(v: u8) -> Option<QoS> {
        match v {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            2 => Some(QoS::ExactlyOnce),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PacketType {
    Connect = 1,
    ConnAck = 2,
    Publish = 3,
    PubAck = 4,
    PubRec = 5,
    PubRel = 6,
    PubComp = 7,
    Subscribe = 8,
    SubAck = 9,
    Unsubscribe = 10,
    UnsubAck = 11,
    PingReq = 12,
    PingResp = 13,
    Disconnect = 14,
}

impl PacketType {
    pub fn from_u8(v: u8) -> Option<PacketType> {
        use PacketType::*;
        Some(match v {
            1 => Connect,
            2 => ConnAck,
            3 => Publish,
            4 => PubAck,
            5 => PubRec,
            6 => PubRel,
            7 => PubComp,
            8 => Subscribe,
            9 => SubAck,
            10 => Unsubscribe,
            11 => UnsubAck,
            12 => PingReq,
            13 => PingResp,
            14 => Disconnect,
            _ => return None,
        })
    }

    /// Flag nibble mandated for every type other than PUBLISH.
    fn fixed_flags(self) -> u8 {
        match self {
            PacketType::Subscribe | PacketType::Unsubscribe | PacketType::PubRel => 0b0010,
            _ => 0,
        }
    }
}

/// Decoded first byte plus remaining length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedHeader {
    pub packet_type: PacketType,
    pub flags: u8,
    pub remaining_length: u32,
}

impl FixedHeader {
    /// Size of the fixed header itself (type byte plus length field).
    pub fn header_len(&self) -> usize {
        1 + remaining_length_len(self.remaining_length)
    }

    pub fn frame_len(&self) -> usize {
        self.header_len() + self.remaining_length as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectReturnCode {
    Accepted = 0,
    UnacceptableProtocolVersion = 1,
    IdentifierRejected = 2,
    ServerUnavailable = 3,
    BadCredentials = 4,
    NotAuthorized = 5,
}

impl ConnectReturnCode {
    pub fn from_u8(v: u8) -> Option<Self> {
        use ConnectReturnCode::*;
        Some(match v {
            0 => Accepted,
            1 => UnacceptableProtocolVersion,
            2 => IdentifierRejected,
            3 => ServerUnavailable,
            4 => BadCredentials,
            5 => NotAuthorized,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WillMessage {
    pub topic: String,
    pub payload: Bytes,
    pub qos: QoS,
    pub retain: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectOptions {
    /// Always 4 when produced by this crate; kept so a broker can reject
    /// other levels with the proper return code.
    pub protocol_level: u8,
    pub client_id: String,
    pub keep_alive_s: u16,
    pub clean_session: bool,
    pub will: Option<WillMessage>,
    pub username: Option<String>,
    pub password: Option<Bytes>,
}

impl ConnectOptions {
    pub fn new(client_id: impl Into<String>) -> Self {
        ConnectOptions {
            protocol_level: PROTOCOL_LEVEL,
            client_id: client_id.into(),
            keep_alive_s: 60,
            clean_session: true,
            will: None,
            username: None,
            password: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishMessage {
    pub topic: String,
    /// Opaque to the codec.
    pub payload: Bytes,
    pub qos: QoS,
    pub retain: bool,
    pub dup: bool,
    pub packet_id: Option<u16>,
}

impl PublishMessage {
    /// A QoS 0, non-retained publish.
    pub fn at_most_once(topic: impl Into<String>, payload: impl Into<Bytes>) -> Self {
        PublishMessage {
            topic: topic.into(),
            payload: payload.into(),
            qos: QoS::AtMostOnce,
            retain: false,
            dup: false,
            packet_id: None,
        }
    }

    pub fn retained(mut self) -> Self {
        self.retain = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubscribeReturnCode {
    Granted(QoS),
    Failure,
}

impl SubscribeReturnCode {
    fn to_u8(self) -> u8 {
        match self {
            SubscribeReturnCode::Granted(q) => q as u8,
            SubscribeReturnCode::Failure => 0x80,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0x80 => Some(SubscribeReturnCode::Failure),
            other => QoS::from_u8(other).map(SubscribeReturnCode::Granted),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(ConnectOptions),
    ConnAck {
        session_present: bool,
        return_code: ConnectReturnCode,
    },
    Publish(PublishMessage),
    PubAck {
        packet_id: u16,
    },
    PubRec {
        packet_id: u16,
    },
    PubRel {
        packet_id: u16,
    },
    PubComp {
        packet_id: u16,
    },
    Subscribe {
        packet_id: u16,
        filters: Vec<(String, QoS)>,
    },
    SubAck {
        packet_id: u16,
        return_codes: Vec<SubscribeReturnCode>,
    },
    Unsubscribe {
        packet_id: u16,
        filters: Vec<String>,
    },
    UnsubAck {
        packet_id: u16,
    },
    PingReq,
    PingResp,
    Disconnect,
}

impl Packet {
    pub fn packet_type(&self) -> PacketType {
        match self {
            Packet::Connect(_) => PacketType::Connect,
            Packet::ConnAck { .. } => PacketType::ConnAck,
            Packet::Publish(_) => PacketType::Publish,
            Packet::PubAck { .. } => PacketType::PubAck,
            Packet::PubRec { .. } => PacketType::PubRec,
            Packet::PubRel { .. } => PacketType::PubRel,
            Packet::PubComp { .. } => PacketType::PubComp,
            Packet::Subscribe { .. } => PacketType::Subscribe,
            Packet::SubAck { .. } => PacketType::SubAck,
            Packet::Unsubscribe { .. } => PacketType::Unsubscribe,
            Packet::UnsubAck { .. } => PacketType::UnsubAck,
            Packet::PingReq => PacketType::PingReq,
            Packet::PingResp => PacketType::PingResp,
            Packet::Disconnect => PacketType::Disconnect,
        }
    }
}

// ---------------------------------------------------------------------------
// remaining length

/// Number of bytes the remaining-length field occupies for `n`.
pub fn remaining_length_len(n: u32) -> usize {
    match n {
        0..=127 => 1,
        128..=16_383 => 2,
        16_384..=2_097_151 => 3,
        _ => 4,
    }
}

fn put_remaining_length(buf: &mut BytesMut, mut n: u32) {
    loop {
        let mut byte = (n % 128) as u8;
        n /= 128;
        if n > 0 {
            byte |= 0x80;
        }
        buf.put_u8(byte);
        if n == 0 {
            break;
        }
    }
}

/// Base-128 encoding, least significant group first.
pub fn encode_remaining_length(n: u64) -> Result<Vec<u8>, EncodeError> {
    if n > MAX_REMAINING_LENGTH as u64 {
        return Err(EncodeError::LengthOverflow(n));
    }
    let mut buf = BytesMut::with_capacity(4);
    put_remaining_length(&mut buf, n as u32);
    Ok(buf.to_vec())
}

/// Returns the decoded value and the number of bytes consumed.
pub fn decode_remaining_length(input: &[u8]) -> Result<(u32, usize), DecodeError> {
    let mut value: u32 = 0;
    for i in 0..4 {
        let Some(&byte) = input.get(i) else {
            return Err(DecodeError::Incomplete(1));
        };
        value |= ((byte & 0x7F) as u32) << (7 * i);
        if byte & 0x80 == 0 {
            return Ok((value, i + 1));
        }
    }
    Err(DecodeError::MalformedLength)
}

// ---------------------------------------------------------------------------
// primitive fields

fn check_string(s: &str) -> Result<(), EncodeError> {
    if s.len() > u16::MAX as usize || s.contains('\0') {
        return Err(EncodeError::BadString);
    }
    Ok(())
}

fn put_string(buf: &mut BytesMut, s: &str) -> Result<(), EncodeError> {
    check_string(s)?;
    buf.put_u16(s.len() as u16);
    buf.put_slice(s.as_bytes());
    Ok(())
}

fn put_binary(buf: &mut BytesMut, b: &[u8]) -> Result<(), EncodeError> {
    if b.len() > u16::MAX as usize {
        return Err(EncodeError::InvalidPacket("binary field longer than 65535 bytes"));
    }
    buf.put_u16(b.len() as u16);
    buf.put_slice(b);
    Ok(())
}

/// Two byte big-endian length prefix followed by the UTF-8 bytes.
pub fn encode_utf8_string(s: &str) -> Result<Vec<u8>, EncodeError> {
    let mut buf = BytesMut::with_capacity(2 + s.len());
    put_string(&mut buf, s)?;
    Ok(buf.to_vec())
}

/// Cursor over the body of a single packet. Running past the end is a
/// malformed packet, never an incomplete one, since the frame length is
/// already known.
struct Body<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Body<'a> {
    fn new(data: &'a [u8]) -> Self {
        Body { data, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Malformed("field overruns remaining length"));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn packet_id(&mut self) -> Result<u16, DecodeError> {
        match self.u16()? {
            0 => Err(DecodeError::Malformed("packet identifier must be nonzero")),
            id => Ok(id),
        }
    }

    fn binary(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u16()? as usize;
        self.take(len)
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let raw = self.binary()?;
        let s = std::str::from_utf8(raw).map_err(|_| DecodeError::BadString)?;
        if s.contains('\0') {
            return Err(DecodeError::BadString);
        }
        Ok(s.to_owned())
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.data[self.pos..];
        self.pos = self.data.len();
        out
    }

    fn finish(&self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return Err(DecodeError::Malformed("trailing bytes inside packet"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// encode

fn nonzero_id(id: u16) -> Result<u16, EncodeError> {
    if id == 0 {
        return Err(EncodeError::InvalidPacket("packet identifier must be nonzero"));
    }
    Ok(id)
}

fn publish_topic_ok(topic: &str) -> bool {
    !topic.is_empty() && !topic.contains(['+', '#'])
}

fn encode_body(packet: &Packet, body: &mut BytesMut) -> Result<u8, EncodeError> {
    let flags = match packet {
        Packet::Connect(opts) => {
            put_string(body, PROTOCOL_NAME)?;
            body.put_u8(opts.protocol_level);
            let mut connect_flags = 0u8;
            if opts.username.is_some() {
                connect_flags |= 0x80;
            }
            if opts.password.is_some() {
                if opts.username.is_none() {
                    return Err(EncodeError::InvalidPacket("password without username"));
                }
                connect_flags |= 0x40;
            }
            if let Some(will) = &opts.will {
                if !publish_topic_ok(&will.topic) {
                    return Err(EncodeError::InvalidPacket("will topic must be a valid topic name"));
                }
                if will.retain {
                    connect_flags |= 0x20;
                }
                connect_flags |= (will.qos as u8) << 3;
                connect_flags |= 0x04;
            }
            if opts.clean_session {
                connect_flags |= 0x02;
            }
            body.put_u8(connect_flags);
            body.put_u16(opts.keep_alive_s);
            put_string(body, &opts.client_id)?;
            if let Some(will) = &opts.will {
                put_string(body, &will.topic)?;
                put_binary(body, &will.payload)?;
            }
            if let Some(user) = &opts.username {
                put_string(body, user)?;
            }
            if let Some(pass) = &opts.password {
                put_binary(body, pass)?;
            }
            0
        }
        Packet::ConnAck {
            session_present,
            return_code,
        } => {
            body.put_u8(*session_present as u8);
            body.put_u8(*return_code as u8);
            0
        }
        Packet::Publish(msg) => {
            if !publish_topic_ok(&msg.topic) {
                return Err(EncodeError::InvalidPacket("publish topic must be non-empty and wildcard free"));
            }
            match (msg.qos, msg.packet_id) {
                (QoS::AtMostOnce, None) => {
                    if msg.dup {
                        return Err(EncodeError::InvalidPacket("DUP set on a QoS 0 publish"));
                    }
                }
                (QoS::AtMostOnce, Some(_)) => {
                    return Err(EncodeError::InvalidPacket("packet identifier on a QoS 0 publish"))
                }
                (_, None) => {
                    return Err(EncodeError::InvalidPacket("QoS > 0 publish without packet identifier"))
                }
                (_, Some(_)) => {}
            }
            put_string(body, &msg.topic)?;
            if let Some(id) = msg.packet_id {
                body.put_u16(nonzero_id(id)?);
            }
            body.put_slice(&msg.payload);
            ((msg.dup as u8) << 3) | ((msg.qos as u8) << 1) | msg.retain as u8
        }
        Packet::PubAck { packet_id }
        | Packet::PubRec { packet_id }
        | Packet::PubRel { packet_id }
        | Packet::PubComp { packet_id }
        | Packet::UnsubAck { packet_id } => {
            body.put_u16(nonzero_id(*packet_id)?);
            packet.packet_type().fixed_flags()
        }
        Packet::Subscribe { packet_id, filters } => {
            if filters.is_empty() {
                return Err(EncodeError::InvalidPacket("SUBSCRIBE with no filters"));
            }
            body.put_u16(nonzero_id(*packet_id)?);
            for (filter, qos) in filters {
                if filter.is_empty() {
                    return Err(EncodeError::InvalidPacket("empty topic filter"));
                }
                put_string(body, filter)?;
                body.put_u8(*qos as u8);
            }
            0b0010
        }
        Packet::SubAck {
            packet_id,
            return_codes,
        } => {
            if return_codes.is_empty() {
                return Err(EncodeError::InvalidPacket("SUBACK with no return codes"));
            }
            body.put_u16(nonzero_id(*packet_id)?);
            for code in return_codes {
                body.put_u8(code.to_u8());
            }
            0
        }
        Packet::Unsubscribe { packet_id, filters } => {
            if filters.is_empty() {
                return Err(EncodeError::InvalidPacket("UNSUBSCRIBE with no filters"));
            }
            body.put_u16(nonzero_id(*packet_id)?);
            for filter in filters {
                if filter.is_empty() {
                    return Err(EncodeError::InvalidPacket("empty topic filter"));
                }
                put_string(body, filter)?;
            }
            0b0010
        }
        Packet::PingReq | Packet::PingResp | Packet::Disconnect => 0,
    };
    Ok(flags)
}

/// Appends the encoded packet to `out`.
pub fn encode_packet_into(packet: &Packet, out: &mut BytesMut) -> Result<(), EncodeError> {
    let mut body = BytesMut::new();
    let flags = encode_body(packet, &mut body)?;
    if body.len() as u64 > MAX_REMAINING_LENGTH as u64 {
        return Err(EncodeError::LengthOverflow(body.len() as u64));
    }
    let remaining = body.len() as u32;
    out.reserve(1 + remaining_length_len(remaining) + body.len());
    out.put_u8(((packet.packet_type() as u8) << 4) | flags);
    put_remaining_length(out, remaining);
    out.put_slice(&body);
    Ok(())
}

pub fn encode_packet(packet: &Packet) -> Result<Bytes, EncodeError> {
    let mut out = BytesMut::new();
    encode_packet_into(packet, &mut out)?;
    Ok(out.freeze())
}

// ---------------------------------------------------------------------------
// decode

/// Parses the fixed header at the start of `input` without requiring the
/// body to be present.
pub fn decode_fixed_header(input: &[u8]) -> Result<FixedHeader, DecodeError> {
    let Some(&first) = input.first() else {
        return Err(DecodeError::Incomplete(2));
    };
    let type_bits = first >> 4;
    let flags = first & 0x0F;
    let packet_type = PacketType::from_u8(type_bits).ok_or(DecodeError::UnknownType(type_bits))?;
    if packet_type == PacketType::Publish {
        if (flags >> 1) & 0b11 == 0b11 {
            return Err(DecodeError::MalformedFlags {
                packet_type: type_bits,
                flags,
            });
        }
    } else if flags != packet_type.fixed_flags() {
        return Err(DecodeError::MalformedFlags {
            packet_type: type_bits,
            flags,
        });
    }
    let (remaining_length, _) = decode_remaining_length(&input[1..])?;
    Ok(FixedHeader {
        packet_type,
        flags,
        remaining_length,
    })
}

/// Decodes one packet from the front of `input`, returning it together with
/// the number of bytes consumed. Bytes after the frame are left untouched.
pub fn decode_packet(input: &[u8]) -> Result<(Packet, usize), DecodeError> {
    let header = decode_fixed_header(input)?;
    let frame_len = header.frame_len();
    if input.len() < frame_len {
        return Err(DecodeError::Incomplete(frame_len - input.len()));
    }
    let mut body = Body::new(&input[header.header_len()..frame_len]);
    let packet = decode_body(header, &mut body)?;
    body.finish()?;
    Ok((packet, frame_len))
}

fn decode_body(header: FixedHeader, body: &mut Body<'_>) -> Result<Packet, DecodeError> {
    let packet = match header.packet_type {
        PacketType::Connect => Packet::Connect(decode_connect(body)?),
        PacketType::ConnAck => {
            let ack_flags = body.u8()?;
            if ack_flags & 0xFE != 0 {
                return Err(DecodeError::Malformed("reserved CONNACK flag bits set"));
            }
            let code = body.u8()?;
            Packet::ConnAck {
                session_present: ack_flags & 1 == 1,
                return_code: ConnectReturnCode::from_u8(code)
                    .ok_or(DecodeError::Malformed("unknown CONNACK return code"))?,
            }
        }
        PacketType::Publish => {
            let qos = QoS::from_u8((header.flags >> 1) & 0b11).expect("checked in fixed header");
            let dup = header.flags & 0b1000 != 0;
            if qos == QoS::AtMostOnce && dup {
                return Err(DecodeError::MalformedFlags {
                    packet_type: 3,
                    flags: header.flags,
                });
            }
            let topic = body.string()?;
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                _ => Some(body.packet_id()?),
            };
            Packet::Publish(PublishMessage {
                topic,
                payload: Bytes::copy_from_slice(body.rest()),
                qos,
                retain: header.flags & 1 == 1,
                dup,
                packet_id,
            })
        }
        PacketType::PubAck => Packet::PubAck {
            packet_id: body.packet_id()?,
        },
        PacketType::PubRec => Packet::PubRec {
            packet_id: body.packet_id()?,
        },
        PacketType::PubRel => Packet::PubRel {
            packet_id: body.packet_id()?,
        },
        PacketType::PubComp => Packet::PubComp {
            packet_id: body.packet_id()?,
        },
        PacketType::UnsubAck => Packet::UnsubAck {
            packet_id: body.packet_id()?,
        },
        PacketType::Subscribe => {
            let packet_id = body.packet_id()?;
            let mut filters = Vec::new();
            while body.remaining() > 0 {
                let filter = body.string()?;
                let options = body.u8()?;
                if options & 0xFC != 0 {
                    return Err(DecodeError::Malformed("reserved bits set in requested QoS"));
                }
                let qos = QoS::from_u8(options).ok_or(DecodeError::Malformed("requested QoS 3"))?;
                filters.push((filter, qos));
            }
            if filters.is_empty() {
                return Err(DecodeError::Malformed("SUBSCRIBE with no filters"));
            }
            Packet::Subscribe { packet_id, filters }
        }
        PacketType::SubAck => {
            let packet_id = body.packet_id()?;
            let mut return_codes = Vec::new();
            while body.remaining() > 0 {
                let code = SubscribeReturnCode::from_u8(body.u8()?)
                    .ok_or(DecodeError::Malformed("invalid SUBACK return code"))?;
                return_codes.push(code);
            }
            if return_codes.is_empty() {
                return Err(DecodeError::Malformed("SUBACK with no return codes"));
            }
            Packet::SubAck {
                packet_id,
                return_codes,
            }
        }
        PacketType::Unsubscribe => {
            let packet_id = body.packet_id()?;
            let mut filters = Vec::new();
            while body.remaining() > 0 {
                filters.push(body.string()?);
            }
            if filters.is_empty() {
                return Err(DecodeError::Malformed("UNSUBSCRIBE with no filters"));
            }
            Packet::Unsubscribe { packet_id, filters }
        }
        PacketType::PingReq => Packet::PingReq,
        PacketType::PingResp => Packet::PingResp,
        PacketType::Disconnect => Packet::Disconnect,
    };
    Ok(packet)
}

fn decode_connect(body: &mut Body<'_>) -> Result<ConnectOptions, DecodeError> {
    let name = body.string()?;
    if name != PROTOCOL_NAME {
        return Err(DecodeError::Malformed("protocol name is not \"MQTT\""));
    }
    let protocol_level = body.u8()?;
    let flags = body.u8()?;
    if flags & 0x01 != 0 {
        return Err(DecodeError::Malformed("reserved connect flag set"));
    }
    let has_user = flags & 0x80 != 0;
    let has_pass = flags & 0x40 != 0;
    let will_retain = flags & 0x20 != 0;
    let will_qos_bits = (flags >> 3) & 0b11;
    let has_will = flags & 0x04 != 0;
    let clean_session = flags & 0x02 != 0;
    if !has_will && (will_retain || will_qos_bits != 0) {
        return Err(DecodeError::Malformed("will QoS/retain set without will flag"));
    }
    if has_pass && !has_user {
        return Err(DecodeError::Malformed("password flag without username flag"));
    }
    let will_qos = QoS::from_u8(will_qos_bits).ok_or(DecodeError::Malformed("will QoS 3"))?;
    let keep_alive_s = body.u16()?;
    let client_id = body.string()?;
    let will = if has_will {
        let topic = body.string()?;
        let payload = Bytes::copy_from_slice(body.binary()?);
        Some(WillMessage {
            topic,
            payload,
            qos: will_qos,
            retain: will_retain,
        })
    } else {
        None
    };
    let username = if has_user { Some(body.string()?) } else { None };
    let password = if has_pass {
        Some(Bytes::copy_from_slice(body.binary()?))
    } else {
        None
    };
    Ok(ConnectOptions {
        protocol_level,
        client_id,
        keep_alive_s,
        clean_session,
        will,
        username,
        password,
    })
}

/// Incremental decoder for a byte stream carrying back-to-back packets.
///
/// Frames whose remaining length exceeds `max_frame` are rejected as soon as
/// the fixed header is visible, before the body is buffered.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: BytesMut,
    max_frame: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("frame of {0} bytes exceeds the configured maximum")]
    TooLarge(u32),
}

impl FrameDecoder {
    pub fn new(max_frame: u32) -> Self {
        FrameDecoder {
            buf: BytesMut::new(),
            max_frame,
        }
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Returns the next complete packet, `Ok(None)` when more bytes are
    /// needed, or an error after which the stream should be dropped.
    pub fn next_packet(&mut self) -> Result<Option<Packet>, FrameError> {
        match decode_fixed_header(&self.buf) {
            Ok(h) if h.remaining_length > self.max_frame => {
                return Err(FrameError::TooLarge(h.remaining_length))
            }
            Ok(_) => {}
            Err(DecodeError::Incomplete(_)) => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        match decode_packet(&self.buf) {
            Ok((packet, used)) => {
                let _ = self.buf.split_to(used);
                Ok(Some(packet))
            }
            Err(DecodeError::Incomplete(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}
