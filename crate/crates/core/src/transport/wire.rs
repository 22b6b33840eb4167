//! Length-prefixed frame format shared by the in-process bus and TCP.
//!
//! ```text
//! offset  size  field
//! 0       4     length of everything after this field (u32, big-endian)
//! 4       1     kind (1 SHARE, 2 PARTIAL, 3 RESULT, 4 BARRIER)
//! 5       4     round (u32, big-endian)
//! 9       1     layer tag
//! 10      2     group tag (u16, big-endian, 0 = global)
//! 12      2     sender (u16, big-endian)
//! 14      2     recipient (u16, big-endian)
//! 16      4n    payload: n ring elements, each u32 little-endian
//! ```

use std::io::{self, Read, Write};

use crate::error::ProtocolError;
use crate::ring::{ParticipantId, RingVec};

pub const HEADER_LEN: usize = 16;
/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME_LEN: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Share = 1,
    Partial = 2,
    Result = 3,
    Barrier = 4,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(MessageKind::Share),
            2 => Some(MessageKind::Partial),
            3 => Some(MessageKind::Result),
            4 => Some(MessageKind::Barrier),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub round: u32,
    pub layer_tag: u8,
    pub group_tag: u16,
    pub sender: ParticipantId,
    pub recipient: ParticipantId,
    pub payload: RingVec,
}

impl WireMessage {
    pub fn barrier(round: u32, sender: ParticipantId, recipient: ParticipantId) -> Self {
        WireMessage {
            kind: MessageKind::Barrier,
            round,
            layer_tag: 0,
            group_tag: 0,
            sender,
            recipient,
            payload: RingVec::default(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload_bytes = self.payload.len() * 4;
        let mut out = Vec::with_capacity(HEADER_LEN + payload_bytes);
        out.extend_from_slice(&((HEADER_LEN - 4 + payload_bytes) as u32).to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.round.to_be_bytes());
        out.push(self.layer_tag);
        out.extend_from_slice(&self.group_tag.to_be_bytes());
        out.extend_from_slice(&self.sender.0.to_be_bytes());
        out.extend_from_slice(&self.recipient.0.to_be_bytes());
        for v in self.payload.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes exactly one complete frame.
    pub fn decode(frame: &[u8]) -> Result<Self, ProtocolError> {
        if frame.len() < HEADER_LEN {
            return Err(ProtocolError::Frame(format!(
                "frame of {} bytes is shorter than the {HEADER_LEN}-byte header",
                frame.len()
            )));
        }
        let declared = u32::from_be_bytes(frame[0..4].try_into().unwrap()) as usize;
        if declared + 4 != frame.len() {
            return Err(ProtocolError::Frame(format!(
                "length prefix says {declared} bytes follow, frame carries {}",
                frame.len() - 4
            )));
        }
        let kind = MessageKind::from_byte(frame[4])
            .ok_or_else(|| ProtocolError::Frame(format!("unknown kind byte {}", frame[4])))?;
        let round = u32::from_be_bytes(frame[5..9].try_into().unwrap());
        let layer_tag = frame[9];
        let group_tag = u16::from_be_bytes([frame[10], frame[11]]);
        let sender = ParticipantId(u16::from_be_bytes([frame[12], frame[13]]));
        let recipient = ParticipantId(u16::from_be_bytes([frame[14], frame[15]]));
        let body = &frame[HEADER_LEN..];
        if body.len() % 4 != 0 {
            return Err(ProtocolError::Frame(format!(
                "payload of {} bytes is not a multiple of 4",
                body.len()
            )));
        }
        if kind == MessageKind::Barrier && !body.is_empty() {
            return Err(ProtocolError::Frame("BARRIER frame carries a payload".into()));
        }
        let payload = RingVec::from_le_bytes(body).expect("length checked");
        Ok(WireMessage {
            kind,
            round,
            layer_tag,
            group_tag,
            sender,
            recipient,
            payload,
        })
    }
}

pub fn write_frame<W: Write>(w: &mut W, msg: &WireMessage) -> io::Result<Vec<u8>> {
    let bytes = msg.encode();
    w.write_all(&bytes)?;
    Ok(bytes)
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let declared = u32::from_be_bytes(len) as usize;
    if !(HEADER_LEN - 4..=MAX_FRAME_LEN).contains(&declared) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("implausible frame length {declared}"),
        ));
    }
    let mut frame = vec![0u8; 4 + declared];
    frame[..4].copy_from_slice(&len);
    r.read_exact(&mut frame[4..])?;
    Ok(Some(frame))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn kind_strategy() -> impl Strategy<Value = MessageKind> {
        prop_oneof![
            Just(MessageKind::Share),
            Just(MessageKind::Partial),
            Just(MessageKind::Result),
        ]
    }

    #[test]
    fn header_layout_is_exact() {
        let msg = WireMessage {
            kind: MessageKind::Partial,
            round: 0x01020304,
            layer_tag: 7,
            group_tag: 0x0a0b,
            sender: ParticipantId(0x0102),
            recipient: ParticipantId(3),
            payload: RingVec::new(vec![0x11223344]),
        };
        assert_eq!(
            msg.encode(),
            vec![
                0, 0, 0, 16, // length: 12 header bytes + 4 payload bytes
                2, // PARTIAL
                1, 2, 3, 4, // round
                7, // layer
                0x0a, 0x0b, // group
                0x01, 0x02, // sender
                0, 3, // recipient
                0x44, 0x33, 0x22, 0x11, // payload element, little-endian
            ]
        );
    }

    #[test]
    fn rejects_malformed_frames() {
        let good = WireMessage::barrier(1, ParticipantId(0), ParticipantId(1)).encode();
        assert!(WireMessage::decode(&good[..10]).is_err());
        let mut bad_kind = good.clone();
        bad_kind[4] = 9;
        assert!(WireMessage::decode(&bad_kind).is_err());
        let mut bad_len = good.clone();
        bad_len[3] += 1;
        assert!(WireMessage::decode(&bad_len).is_err());
        let mut odd_payload = good.clone();
        odd_payload.extend_from_slice(&[1, 2]);
        odd_payload[3] += 2;
        assert!(WireMessage::decode(&odd_payload).is_err());
    }

    #[test]
    fn stream_framing_roundtrip() {
        let msgs = [
            WireMessage::barrier(2, ParticipantId(1), ParticipantId(0)),
            WireMessage {
                kind: MessageKind::Share,
                round: 2,
                layer_tag: 1,
                group_tag: 0,
                sender: ParticipantId(1),
                recipient: ParticipantId(0),
                payload: RingVec::new(vec![1, 2, 3]),
            },
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_frame(&mut buf, m).unwrap();
        }
        let mut cursor = io::Cursor::new(buf);
        for m in &msgs {
            let frame = read_frame(&mut cursor).unwrap().unwrap();
            assert_eq!(&WireMessage::decode(&frame).unwrap(), m);
        }
        assert!(read_frame(&mut cursor).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn frame_roundtrip(
            kind in kind_strategy(),
            round in any::<u32>(),
            layer_tag in any::<u8>(),
            group_tag in any::<u16>(),
            sender in any::<u16>(),
            recipient in any::<u16>(),
            payload in proptest::collection::vec(any::<u32>(), 0..64),
        ) {
            let msg = WireMessage {
                kind, round, layer_tag, group_tag,
                sender: ParticipantId(sender),
                recipient: ParticipantId(recipient),
                payload: RingVec::new(payload),
            };
            prop_assert_eq!(WireMessage::decode(&msg.encode()).unwrap(), msg);
        }
    }
}
