use bytes::Bytes;
use proptest::prelude::*;
use wsn_core::codec::{
    decode_packet, decode_remaining_length, encode_packet, encode_remaining_length, ConnectOptions, ConnectReturnCode,
    DecodeError, FrameDecoder, Packet, PublishMessage, QoS, SubscribeReturnCode, WillMessage, MAX_REMAINING_LENGTH,
};

fn qos() -> impl Strategy<Value = QoS> {
    prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce), Just(QoS::ExactlyOnce)]
}

fn text() -> impl Strategy<Value = String> {
    "[^\u{0}]{0,24}"
}

fn topic_name() -> impl Strategy<Value = String> {
    "[a-z0-9$/ é]{1,24}".prop_filter("no wildcards", |s| !s.contains(['+', '#']))
}

fn filter() -> impl Strategy<Value = String> {
    "[a-z+#/]{1,16}"
}

fn packet_id() -> impl Strategy<Value = u16> {
    1u16..=u16::MAX
}

fn payload() -> impl Strategy<Value = Bytes> {
    prop::collection::vec(any::<u8>(), 0..300).prop_map(Bytes::from)
}

fn publish() -> impl Strategy<Value = PublishMessage> {
    (topic_name(), payload(), qos(), any::<bool>(), any::<bool>(), packet_id()).prop_map(
        |(topic, payload, qos, retain, dup, id)| PublishMessage {
            topic,
            payload,
            qos,
            retain,
            dup: dup && qos != QoS::AtMostOnce,
            packet_id: (qos != QoS::AtMostOnce).then_some(id),
        },
    )
}

fn connect() -> impl Strategy<Value = ConnectOptions> {
    let will = prop::option::of((topic_name(), payload(), qos(), any::<bool>()).prop_map(|(topic, payload, qos, retain)| {
        WillMessage {
            topic,
            payload,
            qos,
            retain,
        }
    }));
    let creds = prop::option::of((text(), prop::option::of(payload())));
    (text(), any::<u16>(), any::<bool>(), will, creds).prop_map(|(client_id, keep_alive_s, clean_session, will, creds)| {
        let (username, password) = match creds {
            Some((u, p)) => (Some(u), p),
            None => (None, None),
        };
        ConnectOptions {
            protocol_level: 4,
            client_id,
            keep_alive_s,
            clean_session,
            will,
            username,
            password,
        }
    })
}

fn return_code() -> impl Strategy<Value = ConnectReturnCode> {
    (0u8..=5).prop_map(|c| ConnectReturnCode::from_u8(c).unwrap())
}

fn suback_code() -> impl Strategy<Value = SubscribeReturnCode> {
    prop_oneof![qos().prop_map(SubscribeReturnCode::Granted), Just(SubscribeReturnCode::Failure)]
}

pub fn packet() -> impl Strategy<Value = Packet> {
    prop_oneof![
        connect().prop_map(Packet::Connect),
        (any::<bool>(), return_code()).prop_map(|(session_present, return_code)| Packet::ConnAck {
            session_present: session_present && return_code == ConnectReturnCode::Accepted,
            return_code
        }),
        publish().prop_map(Packet::Publish),
        packet_id().prop_map(|packet_id| Packet::PubAck { packet_id }),
        packet_id().prop_map(|packet_id| Packet::PubRec { packet_id }),
        packet_id().prop_map(|packet_id| Packet::PubRel { packet_id }),
        packet_id().prop_map(|packet_id| Packet::PubComp { packet_id }),
        (packet_id(), prop::collection::vec((filter(), qos()), 1..5))
            .prop_map(|(packet_id, filters)| Packet::Subscribe { packet_id, filters }),
        (packet_id(), prop::collection::vec(suback_code(), 1..5))
            .prop_map(|(packet_id, return_codes)| Packet::SubAck { packet_id, return_codes }),
        (packet_id(), prop::collection::vec(filter(), 1..5))
            .prop_map(|(packet_id, filters)| Packet::Unsubscribe { packet_id, filters }),
        packet_id().prop_map(|packet_id| Packet::UnsubAck { packet_id }),
        Just(Packet::PingReq),
        Just(Packet::PingResp),
        Just(Packet::Disconnect),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn decode_inverts_encode(p in packet()) {
        let bytes = encode_packet(&p).unwrap();
        let (decoded, used) = decode_packet(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(decoded, p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    /// Every strict prefix of a frame is reported as incomplete, never as a
    /// different packet or a malformed one.
    #[test]
    fn prefixes_are_incomplete(p in packet()) {
        let bytes = encode_packet(&p).unwrap();
        for cut in 0..bytes.len() {
            prop_assert!(matches!(decode_packet(&bytes[..cut]), Err(DecodeError::Incomplete(_))), "cut {}", cut);
        }
    }

    /// Streams split at arbitrary points reassemble into the same packets.
    #[test]
    fn frame_decoder_reassembles(ps in prop::collection::vec(packet(), 1..8), chunk in 1usize..40) {
        let stream: Vec<u8> = ps.iter().flat_map(|p| encode_packet(p).unwrap().to_vec()).collect();
        let mut dec = FrameDecoder::new(MAX_REMAINING_LENGTH);
        let mut out = Vec::new();
        for piece in stream.chunks(chunk) {
            dec.extend(piece);
            while let Some(p) = dec.next_packet().unwrap() {
                out.push(p);
            }
        }
        prop_assert_eq!(out, ps);
        prop_assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_packet(&bytes);
    }

    #[test]
    fn remaining_length_round_trips(n in 0u32..=MAX_REMAINING_LENGTH) {
        let enc = encode_remaining_length(n as u64).unwrap();
        prop_assert_eq!(decode_remaining_length(&enc).unwrap(), (n, enc.len()));
    }
}

#[test]
fn remaining_length_bounds() {
    assert!(encode_remaining_length(MAX_REMAINING_LENGTH as u64 + 1).is_err());
    assert_eq!(encode_remaining_length(MAX_REMAINING_LENGTH as u64).unwrap(), [0xFF, 0xFF, 0xFF, 0x7F]);
    assert_eq!(decode_remaining_length(&[0xFF, 0xFF, 0xFF, 0xFF, 0x01]), Err(DecodeError::MalformedLength));
}
