//! Length-prefixed framing for the classical channel.
//!
//! A frame is `length: u32 BE | msg_type: u8 | frame_seq: u64 BE | payload`,
//! where `length` counts everything after itself (`payload.len() + 9`).

use std::io::{self, Read, Write};

use thiserror::Error;

pub const HEADER_BYTES: usize = 13;
/// Bytes after the length field that are not payload.
pub const HEADER_REMAINDER: usize = 9;
/// Largest accepted payload. A 2^27-bit syndrome or key fits comfortably.
pub const MAX_PAYLOAD: usize = 1 << 26;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("length field {0} outside the accepted range")]
    LengthOverflow(u64),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("frame sequence {got} after {last}")]
    Sequence { last: u64, got: u64 },
    #[error("authentication failed on frame {0}")]
    Auth(u64),
    #[error("link i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    SiftAnnounce = 0x01,
    SiftReply = 0x02,
    EcSyndrome = 0x03,
    EcVerify = 0x04,
    PaSeed = 0x05,
    StatsPing = 0x06,
    Shutdown = 0x07,
}

impl MsgType {
    pub const ALL: [MsgType; 7] = [
        MsgType::SiftAnnounce,
        MsgType::SiftReply,
        MsgType::EcSyndrome,
        MsgType::EcVerify,
        MsgType::PaSeed,
        MsgType::StatsPing,
        MsgType::Shutdown,
    ];
}

impl TryFrom<u8> for MsgType {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        MsgType::ALL
            .into_iter()
            .find(|t| *t as u8 == v)
            .ok_or(WireError::UnknownType(v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub msg_type: MsgType,
    pub frame_seq: u64,
    pub payload: Vec<u8>,
}

impl WireFrame {
    pub fn new(msg_type: MsgType, frame_seq: u64, payload: Vec<u8>) -> Self {
        WireFrame {
            msg_type,
            frame_seq,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.payload.len()
    }
}

fn header(
    msg_type: MsgType,
    frame_seq: u64,
    payload_len: usize,
) -> Result<[u8; HEADER_BYTES], WireError> {
    if payload_len > MAX_PAYLOAD {
        return Err(WireError::LengthOverflow(
            payload_len as u64 + HEADER_REMAINDER as u64,
        ));
    }
    let mut h = [0u8; HEADER_BYTES];
    h[..4].copy_from_slice(&((payload_len + HEADER_REMAINDER) as u32).to_be_bytes());
    h[4] = msg_type as u8;
    h[5..].copy_from_slice(&frame_seq.to_be_bytes());
    Ok(h)
}

pub fn encode_frame(frame: &WireFrame) -> Result<Vec<u8>, WireError> {
    let h = header(frame.msg_type, frame.frame_seq, frame.payload.len())?;
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&h);
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

fn parse_length(bytes: [u8; 4]) -> Result<usize, WireError> {
    let length = u32::from_be_bytes(bytes) as usize;
    if !(HEADER_REMAINDER..=MAX_PAYLOAD + HEADER_REMAINDER).contains(&length) {
        return Err(WireError::LengthOverflow(length as u64));
    }
    Ok(length)
}

/// Decodes the frame at the start of `buf`; returns it with the bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(WireFrame, usize), WireError> {
    if buf.len() < 4 {
        return Err(WireError::Truncated {
            needed: 4,
            available: buf.len(),
        });
    }
    let length = parse_length(buf[..4].try_into().unwrap())?;
    let total = 4 + length;
    if buf.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            available: buf.len(),
        });
    }
    let msg_type = MsgType::try_from(buf[4])?;
    let frame_seq = u64::from_be_bytes(buf[5..13].try_into().unwrap());
    Ok((
        WireFrame {
            msg_type,
            frame_seq,
            payload: buf[HEADER_BYTES..total].to_vec(),
        },
        total,
    ))
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, frame: &WireFrame) -> Result<(), WireError> {
    let h = header(frame.msg_type, frame.frame_seq, frame.payload.len())?;
    w.write_all(&h)?;
    w.write_all(&frame.payload)?;
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean end of stream between frames.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Option<WireFrame>, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(WireError::Truncated {
                    needed: 4,
                    available: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let length = parse_length(len)?;
    let mut rest = vec![0u8; length];
    r.read_exact(&mut rest).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated {
            needed: 4 + length,
            available: 4,
        },
        _ => WireError::Io(e),
    })?;
    let msg_type = MsgType::try_from(rest[0])?;
    let frame_seq = u64::from_be_bytes(rest[1..9].try_into().unwrap());
    rest.drain(..HEADER_REMAINDER);
    Ok(Some(WireFrame {
        msg_type,
        frame_seq,
        payload: rest,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_payload_is_a_bare_header() {
        let f = WireFrame::new(MsgType::Shutdown, 7, Vec::new());
        let bytes = encode_frame(&f).unwrap();
        assert_eq!(bytes.len(), 13);
        assert_eq!(&bytes[..4], &[0, 0, 0, 9]);
        assert_eq!(bytes[4], 0x07);
        assert_eq!(decode_frame(&bytes).unwrap(), (f, 13));
    }

    #[test]
    fn unassigned_type_is_rejected() {
        let mut bytes = encode_frame(&WireFrame::new(MsgType::StatsPing, 0, vec![1, 2])).unwrap();
        bytes[4] = 0xff;
        assert!(matches!(
            decode_frame(&bytes),
            Err(WireError::UnknownType(0xff))
        ));
        assert!(matches!(
            read_frame(&mut &bytes[..]),
            Err(WireError::UnknownType(0xff))
        ));
        assert!(matches!(
            MsgType::try_from(0),
            Err(WireError::UnknownType(0))
        ));
    }

    #[test]
    fn truncation_and_overflow() {
        let bytes = encode_frame(&WireFrame::new(MsgType::PaSeed, 1, vec![9; 24])).unwrap();
        for cut in 0..bytes.len() {
            assert!(
                matches!(
                    decode_frame(&bytes[..cut]),
                    Err(WireError::Truncated { .. })
                ),
                "{cut}"
            );
        }
        for cut in 1..bytes.len() {
            assert!(
                matches!(
                    read_frame(&mut &bytes[..cut]),
                    Err(WireError::Truncated { .. })
                ),
                "{cut}"
            );
        }
        assert!(read_frame(&mut &[][..]).unwrap().is_none());
        let mut huge = bytes.clone();
        huge[..4].copy_from_slice(&u32::MAX.to_be_bytes());
        assert!(matches!(
            decode_frame(&huge),
            Err(WireError::LengthOverflow(_))
        ));
        let mut short = bytes;
        short[..4].copy_from_slice(&3u32.to_be_bytes());
        assert!(matches!(
            decode_frame(&short),
            Err(WireError::LengthOverflow(3))
        ));
    }

    #[test]
    fn stream_of_frames() {
        let frames: Vec<WireFrame> = MsgType::ALL
            .iter()
            .enumerate()
            .map(|(i, &t)| WireFrame::new(t, i as u64, vec![i as u8; i * 3]))
            .collect();
        let mut buf = Vec::new();
        for f in &frames {
            write_frame(&mut buf, f).unwrap();
        }
        let mut r = &buf[..];
        for f in &frames {
            assert_eq!(read_frame(&mut r).unwrap().as_ref(), Some(f));
        }
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn round_trip(t in 0usize..7, seq in any::<u64>(), payload in proptest::collection::vec(any::<u8>(), 0..2048)) {
            let f = WireFrame::new(MsgType::ALL[t], seq, payload);
            let bytes = encode_frame(&f).unwrap();
            prop_assert_eq!(bytes.len(), f.payload.len() + HEADER_BYTES);
            let (g, used) = decode_frame(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(g, f);
        }
    }
}
