//! Z-Wave MAC and beam frame encoding.
//!
//! On-air layout of a singlecast MAC frame:
//!
//! ```text
//! 0x00 0x0E | !(home_id[4] src[1] 0x41 0x01 len[1] dst[1] payload[n] checksum[1])
//! ```
//!
//! The two leading bytes are the start-of-frame delimiter and are sent as-is;
//! everything after them is bitwise inverted for the radio's modulation
//! polarity. The checksum is the 0xFF-seeded XOR fold of the delimiter plus the
//! un-inverted body up to (not including) the checksum byte.
//!
//! Beam frames are preamble-only: `0x55` padding followed by the beam tag, the
//! target node id and a one-byte hash of the home id, 8 or 20 bytes in total.

use std::io::{self, Read, Write};

use thiserror::Error;

/// Start-of-frame delimiter preceding every MAC frame.
pub const MAC_INIT: [u8; 2] = [0x00, 0x0E];
/// Frame control bytes for a singlecast frame.
pub const SINGLECAST_CONTROL: [u8; 2] = [0x41, 0x01];
/// Header and trailer bytes around the payload: home id, source, control, length, destination, checksum.
pub const MAC_OVERHEAD: usize = 4 + 1 + 2 + 1 + 1 + 1;
pub const MAX_FRAME_LEN: usize = 255;
pub const MAX_PAYLOAD_LEN: usize = MAX_FRAME_LEN - MAC_OVERHEAD;

pub const BEAM_PREAMBLE: u8 = 0x55;
pub const BEAM_TAG: u8 = 0xF0;
pub const BEAM_SHORT_LEN: usize = 8;
pub const BEAM_LONG_LEN: usize = 20;

/// Destination id addressing every node on the network.
pub const BROADCAST_ID: u8 = 0xFF;

// Command-class prefixes. Security (0x98) carries the nonce exchange and the
// encrypted message encapsulation.
pub const CMD_NONCE_GET: [u8; 2] = [0x98, 0x40];
pub const CMD_NONCE_REPORT: [u8; 2] = [0x98, 0x80];
pub const CMD_ENCRYPTED: [u8; 2] = [0x98, 0x81];
pub const CMD_CONFIGURATION_GET: [u8; 2] = [0x70, 0x05];
pub const CMD_WAKEUP_NOTIFICATION: [u8; 2] = [0x84, 0x07];
pub const CMD_BATTERY_REPORT: [u8; 2] = [0x80, 0x03];

pub const NONCE_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("frame of {0} bytes exceeds the 255-byte limit")]
    FrameTooLong(usize),
    #[error("checksum mismatch: expected {expected:#04x}, found {found:#04x}")]
    ChecksumMismatch { expected: u8, found: u8 },
    #[error("truncated frame: need at least {needed} bytes, got {got}")]
    TruncatedFrame { needed: usize, got: usize },
    #[error("unknown start-of-frame marker {0:#04x}")]
    UnknownMarker(u8),
    #[error("length field says {declared} bytes but body has {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("beam frames are 8 or 20 bytes, not {0}")]
    InvalidBeamLength(usize),
    #[error("malformed beam frame")]
    MalformedBeam,
    #[error("generic payload collides with a reserved command encoding")]
    ReservedPayload,
}

/// Application payload carried by a MAC frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FrameKind {
    NonceGet,
    NonceReport([u8; NONCE_LEN]),
    Ack,
    ConfigurationGet,
    WakeupNotification,
    BatteryReport,
    EncryptedPayload(Vec<u8>),
    Generic(Vec<u8>),
}

impl FrameKind {
    /// Only encrypted payloads count as meaningful traffic.
    pub fn requires_encryption(&self) -> bool {
        matches!(self, FrameKind::EncryptedPayload(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            FrameKind::NonceGet => "NonceGet",
            FrameKind::NonceReport(_) => "NonceReport",
            FrameKind::Ack => "Ack",
            FrameKind::ConfigurationGet => "ConfigurationGet",
            FrameKind::WakeupNotification => "WakeupNotification",
            FrameKind::BatteryReport => "BatteryReport",
            FrameKind::EncryptedPayload(_) => "EncryptedPayload",
            FrameKind::Generic(_) => "Generic",
        }
    }

    pub fn to_payload(&self) -> Vec<u8> {
        match self {
            FrameKind::NonceGet => CMD_NONCE_GET.to_vec(),
            FrameKind::NonceReport(nonce) => {
                let mut p = CMD_NONCE_REPORT.to_vec();
                p.extend_from_slice(nonce);
                p
            }
            FrameKind::Ack => Vec::new(),
            FrameKind::ConfigurationGet => CMD_CONFIGURATION_GET.to_vec(),
            FrameKind::WakeupNotification => CMD_WAKEUP_NOTIFICATION.to_vec(),
            FrameKind::BatteryReport => CMD_BATTERY_REPORT.to_vec(),
            FrameKind::EncryptedPayload(body) => {
                let mut p = CMD_ENCRYPTED.to_vec();
                p.extend_from_slice(body);
                p
            }
            FrameKind::Generic(bytes) => bytes.clone(),
        }
    }

    /// Classifies a raw payload. Anything that is not one of the fixed
    /// command encodings is `Generic`.
    pub fn from_payload(payload: &[u8]) -> FrameKind {
        match payload {
            [] => FrameKind::Ack,
            p if p == CMD_NONCE_GET => FrameKind::NonceGet,
            p if p == CMD_CONFIGURATION_GET => FrameKind::ConfigurationGet,
            p if p == CMD_WAKEUP_NOTIFICATION => FrameKind::WakeupNotification,
            p if p == CMD_BATTERY_REPORT => FrameKind::BatteryReport,
            p if p.len() == 2 + NONCE_LEN && p[..2] == CMD_NONCE_REPORT => {
                let mut nonce = [0u8; NONCE_LEN];
                nonce.copy_from_slice(&p[2..]);
                FrameKind::NonceReport(nonce)
            }
            p if p.len() >= 2 && p[..2] == CMD_ENCRYPTED => {
                FrameKind::EncryptedPayload(p[2..].to_vec())
            }
            p => FrameKind::Generic(p.to_vec()),
        }
    }
}

/// A singlecast MAC frame. The length and checksum are derived on encode and
/// verified on decode.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MacFrame {
    pub home_id: u32,
    pub source_id: u8,
    pub frame_control: [u8; 2],
    pub dest_id: u8,
    pub kind: FrameKind,
}

impl MacFrame {
    pub fn new(home_id: u32, source_id: u8, dest_id: u8, kind: FrameKind) -> Self {
        MacFrame {
            home_id,
            source_id,
            frame_control: SINGLECAST_CONTROL,
            dest_id,
            kind,
        }
    }

    /// Value of the length byte: payload plus header and checksum.
    pub fn length_field(&self) -> Result<u8, CodecError> {
        let len = self.kind.to_payload().len() + MAC_OVERHEAD;
        u8::try_from(len)
            .ok()
            .filter(|l| usize::from(*l) <= MAX_FRAME_LEN)
            .ok_or(CodecError::FrameTooLong(len))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BeamFrame {
    pub beam_tag: u8,
    pub node_id: u8,
    pub home_id_hash: u8,
    pub total_length: usize,
}

impl BeamFrame {
    pub fn wake(node_id: u8, home_id: u32, total_length: usize) -> Self {
        BeamFrame {
            beam_tag: BEAM_TAG,
            node_id,
            home_id_hash: home_id_hash(home_id),
            total_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Frame {
    Mac(MacFrame),
    Beam(BeamFrame),
}

impl Frame {
    pub fn as_mac(&self) -> Option<&MacFrame> {
        match self {
            Frame::Mac(m) => Some(m),
            Frame::Beam(_) => None,
        }
    }
}

/// 0xFF-seeded XOR fold.
pub fn checksum_of(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0xFF, |acc, b| acc ^ b)
}

pub fn invert(bytes: &[u8]) -> Vec<u8> {
    bytes.iter().map(|b| !b).collect()
}

/// One-byte digest of a home id carried in beam frames.
pub fn home_id_hash(home_id: u32) -> u8 {
    home_id.to_be_bytes().iter().fold(0xA5, |acc, b| acc.rotate_left(1) ^ b)
}

pub fn encode(frame: &MacFrame) -> Result<Vec<u8>, CodecError> {
    if let FrameKind::Generic(bytes) = &frame.kind {
        if !matches!(FrameKind::from_payload(bytes), FrameKind::Generic(_)) {
            return Err(CodecError::ReservedPayload);
        }
    }
    let payload = frame.kind.to_payload();
    let length = frame.length_field()?;

    let mut body = Vec::with_capacity(usize::from(length));
    body.extend_from_slice(&frame.home_id.to_be_bytes());
    body.push(frame.source_id);
    body.extend_from_slice(&frame.frame_control);
    body.push(length);
    body.push(frame.dest_id);
    body.extend_from_slice(&payload);

    let mut summed = MAC_INIT.to_vec();
    summed.extend_from_slice(&body);
    body.push(checksum_of(&summed));

    let mut out = MAC_INIT.to_vec();
    out.extend(invert(&body));
    Ok(out)
}

pub fn encode_beam(beam: &BeamFrame) -> Result<Vec<u8>, CodecError> {
    if beam.total_length != BEAM_SHORT_LEN && beam.total_length != BEAM_LONG_LEN {
        return Err(CodecError::InvalidBeamLength(beam.total_length));
    }
    let mut out = vec![BEAM_PREAMBLE; beam.total_length - 3];
    out.extend_from_slice(&[beam.beam_tag, beam.node_id, beam.home_id_hash]);
    Ok(out)
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, CodecError> {
    match frame {
        Frame::Mac(m) => encode(m),
        Frame::Beam(b) => encode_beam(b),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Frame, CodecError> {
    match bytes.first() {
        None => Err(CodecError::TruncatedFrame { needed: 1, got: 0 }),
        Some(&BEAM_PREAMBLE) => decode_beam(bytes).map(Frame::Beam),
        Some(&0x00) => decode_mac(bytes).map(Frame::Mac),
        Some(&other) => Err(CodecError::UnknownMarker(other)),
    }
}

fn decode_beam(bytes: &[u8]) -> Result<BeamFrame, CodecError> {
    let len = bytes.len();
    if len != BEAM_SHORT_LEN && len != BEAM_LONG_LEN {
        return Err(CodecError::InvalidBeamLength(len));
    }
    let (preamble, fields) = bytes.split_at(len - 3);
    if preamble.iter().any(|&b| b != BEAM_PREAMBLE) || fields[0] == BEAM_PREAMBLE {
        return Err(CodecError::MalformedBeam);
    }
    Ok(BeamFrame {
        beam_tag: fields[0],
        node_id: fields[1],
        home_id_hash: fields[2],
        total_length: len,
    })
}

fn decode_mac(bytes: &[u8]) -> Result<MacFrame, CodecError> {
    let needed = MAC_INIT.len() + MAC_OVERHEAD;
    if bytes.len() < needed {
        return Err(CodecError::TruncatedFrame {
            needed,
            got: bytes.len(),
        });
    }
    if bytes[1] != MAC_INIT[1] {
        return Err(CodecError::UnknownMarker(bytes[1]));
    }
    if bytes.len() - MAC_INIT.len() > MAX_FRAME_LEN {
        return Err(CodecError::FrameTooLong(bytes.len() - MAC_INIT.len()));
    }
    let body = invert(&bytes[MAC_INIT.len()..]);
    let declared = usize::from(body[7]);
    if declared != body.len() {
        return Err(CodecError::LengthMismatch {
            declared,
            actual: body.len(),
        });
    }
    let (content, trailer) = body.split_at(body.len() - 1);
    let mut summed = MAC_INIT.to_vec();
    summed.extend_from_slice(content);
    let expected = checksum_of(&summed);
    if expected != trailer[0] {
        return Err(CodecError::ChecksumMismatch {
            expected,
            found: trailer[0],
        });
    }
    Ok(MacFrame {
        home_id: u32::from_be_bytes([content[0], content[1], content[2], content[3]]),
        source_id: content[4],
        frame_control: [content[5], content[6]],
        dest_id: content[8],
        kind: FrameKind::from_payload(&content[9..]),
    })
}

/// Writes frames as capture records: a little-endian u16 length followed by the on-air bytes.
pub fn write_capture<W: Write>(mut out: W, frames: &[Vec<u8>]) -> io::Result<()> {
    for f in frames {
        let len = u16::try_from(f.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "capture record too long"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(f)?;
    }
    Ok(())
}

pub fn read_capture<R: Read>(mut input: R) -> io::Result<Vec<Vec<u8>>> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut records = Vec::new();
    let mut rest = data.as_slice();
    while !rest.is_empty() {
        if rest.len() < 2 {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "truncated capture length prefix",
            ));
        }
        let len = usize::from(u16::from_le_bytes([rest[0], rest[1]]));
        rest = &rest[2..];
        if rest.len() < len {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "truncated capture record",
            ));
        }
        records.push(rest[..len].to_vec());
        rest = &rest[len..];
    }
    Ok(records)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn kind() -> impl Strategy<Value = FrameKind> {
        prop_oneof![
            Just(FrameKind::NonceGet),
            any::<[u8; NONCE_LEN]>().prop_map(FrameKind::NonceReport),
            Just(FrameKind::Ack),
            Just(FrameKind::ConfigurationGet),
            Just(FrameKind::WakeupNotification),
            Just(FrameKind::BatteryReport),
            proptest::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD_LEN - 2)
                .prop_map(FrameKind::EncryptedPayload),
            proptest::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD_LEN)
                .prop_map(|b| FrameKind::from_payload(&b)),
        ]
    }

    fn mac() -> impl Strategy<Value = MacFrame> {
        (any::<u32>(), any::<u8>(), any::<[u8; 2]>(), any::<u8>(), kind()).prop_map(
            |(home_id, source_id, frame_control, dest_id, kind)| MacFrame {
                home_id,
                source_id,
                frame_control,
                dest_id,
                kind,
            },
        )
    }

    proptest! {
        #[test]
        fn mac_round_trip(f in mac()) {
            let bytes = encode(&f).unwrap();
            prop_assert_eq!(bytes.len(), 2 + usize::from(f.length_field().unwrap()));
            prop_assert_eq!(decode(&bytes).unwrap(), Frame::Mac(f));
        }

        #[test]
        fn beam_round_trip(node in any::<u8>(), home in any::<u32>(), long in any::<bool>()) {
            let len = if long { BEAM_LONG_LEN } else { BEAM_SHORT_LEN };
            let b = BeamFrame::wake(node, home, len);
            prop_assert_eq!(decode(&encode_beam(&b).unwrap()).unwrap(), Frame::Beam(b));
        }

        #[test]
        fn any_single_byte_change_is_rejected(f in mac(), pos in any::<prop::sample::Index>(), x in 1u8..) {
            let mut bytes = encode(&f).unwrap();
            let i = pos.index(bytes.len());
            bytes[i] ^= x;
            prop_assert!(decode(&bytes).is_err());
        }

        #[test]
        fn trailer_is_xor_fold(f in mac()) {
            let bytes = encode(&f).unwrap();
            let body = invert(&bytes[2..]);
            let folded = MAC_INIT.iter().chain(&body[..body.len() - 1]).fold(0xFFu8, |a, b| a ^ b);
            prop_assert_eq!(folded, body[body.len() - 1]);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
            let _ = decode(&bytes);
        }
    }
}
