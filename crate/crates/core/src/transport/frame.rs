//! Wire frames for the TCP channel.
//!
//! ```text
//! magic u16 = 0x554E | version u8 = 1 | op u8 | region_id u32 | offset u64
//! | length u32 | custom_remote [u8; 16] | custom_local_echo [u8; 16]
//! | payload [u8; length]
//! ```
//!
//! All integers little-endian; the header is 52 bytes.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: u16 = 0x554E;
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 52;
pub const MAX_PAYLOAD: u32 = 1 << 30;

/// Payload layout of a GET request: reply region, reply offset, read length.
pub const GET_REQ_PAYLOAD_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameOp {
    PutData = 1,
    GetReq = 2,
    GetResp = 3,
    SideNotify = 4,
    Ctrl = 5,
}

impl FrameOp {
    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => FrameOp::PutData,
            2 => FrameOp::GetReq,
            3 => FrameOp::GetResp,
            4 => FrameOp::SideNotify,
            5 => FrameOp::Ctrl,
            _ => return None,
        })
    }
}

/// First payload byte of a CTRL frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CtrlKind {
    /// Connection greeting; `region_id` carries the sender's rank.
    Hello = 1,
    /// Remote failure: `[2, fault code, failed op]`, `custom_local_echo`
    /// carries the requester's local bits.
    Error = 2,
    /// Bootstrap message: `[3, tag u64 LE, data...]`.
    Bootstrap = 3,
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("bad magic {0:#06x}")]
    Magic(u16),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unknown op {0}")]
    UnknownOp(u8),
    #[error("payload length {0} too large")]
    TooLarge(u32),
    #[error("need {0} more bytes")]
    Incomplete(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub op: FrameOp,
    pub region_id: u32,
    pub offset: u64,
    pub custom_remote: u128,
    pub custom_local_echo: u128,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(op: FrameOp) -> Self {
        Self {
            op,
            region_id: 0,
            offset: 0,
            custom_remote: 0,
            custom_local_echo: 0,
            payload: Vec::new(),
        }
    }

    pub fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..2].copy_from_slice(&MAGIC.to_le_bytes());
        h[2] = VERSION;
        h[3] = self.op as u8;
        h[4..8].copy_from_slice(&self.region_id.to_le_bytes());
        h[8..16].copy_from_slice(&self.offset.to_le_bytes());
        h[16..20].copy_from_slice(&(self.payload.len() as u32).to_le_bytes());
        h[20..36].copy_from_slice(&self.custom_remote.to_le_bytes());
        h[36..52].copy_from_slice(&self.custom_local_echo.to_le_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.header())?;
        w.write_all(&self.payload)
    }

    fn parse_header(h: &[u8]) -> Result<(FrameOp, u32, u64, u32, u128, u128), FrameError> {
        let magic = u16::from_le_bytes([h[0], h[1]]);
        if magic != MAGIC {
            return Err(FrameError::Magic(magic));
        }
        if h[2] != VERSION {
            return Err(FrameError::Version(h[2]));
        }
        let op = FrameOp::from_u8(h[3]).ok_or(FrameError::UnknownOp(h[3]))?;
        let len = u32::from_le_bytes(h[16..20].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(FrameError::TooLarge(len));
        }
        Ok((
            op,
            u32::from_le_bytes(h[4..8].try_into().unwrap()),
            u64::from_le_bytes(h[8..16].try_into().unwrap()),
            len,
            u128::from_le_bytes(h[20..36].try_into().unwrap()),
            u128::from_le_bytes(h[36..52].try_into().unwrap()),
        ))
    }

    /// Decode one frame from the front of `buf`, returning it and the bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Frame, usize), FrameError> {
        if buf.len() < HEADER_LEN {
            return Err(FrameError::Incomplete(HEADER_LEN - buf.len()));
        }
        let (op, region_id, offset, len, custom_remote, custom_local_echo) =
            Self::parse_header(&buf[..HEADER_LEN])?;
        let total = HEADER_LEN + len as usize;
        if buf.len() < total {
            return Err(FrameError::Incomplete(total - buf.len()));
        }
        Ok((
            Frame {
                op,
                region_id,
                offset,
                custom_remote,
                custom_local_echo,
                payload: buf[HEADER_LEN..total].to_vec(),
            },
            total,
        ))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Frame, FrameError> {
        let mut h = [0u8; HEADER_LEN];
        r.read_exact(&mut h)?;
        let (op, region_id, offset, len, custom_remote, custom_local_echo) = Self::parse_header(&h)?;
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload)?;
        Ok(Frame {
            op,
            region_id,
            offset,
            custom_remote,
            custom_local_echo,
            payload,
        })
    }

    pub fn get_request(
        region_id: u32,
        offset: u64,
        len: u32,
        reply_region: u32,
        reply_offset: u64,
        custom_remote: u128,
        custom_local: u128,
    ) -> Frame {
        let mut payload = Vec::with_capacity(GET_REQ_PAYLOAD_LEN);
        payload.extend_from_slice(&reply_region.to_le_bytes());
        payload.extend_from_slice(&reply_offset.to_le_bytes());
        payload.extend_from_slice(&len.to_le_bytes());
        Frame {
            op: FrameOp::GetReq,
            region_id,
            offset,
            custom_remote,
            custom_local_echo: custom_local,
            payload,
        }
    }

    /// `(reply_region, reply_offset, read_len)` of a GET request.
    pub fn get_request_fields(&self) -> Option<(u32, u64, u32)> {
        if self.op != FrameOp::GetReq || self.payload.len() != GET_REQ_PAYLOAD_LEN {
            return None;
        }
        let p = &self.payload;
        Some((
            u32::from_le_bytes(p[0..4].try_into().unwrap()),
            u64::from_le_bytes(p[4..12].try_into().unwrap()),
            u32::from_le_bytes(p[12..16].try_into().unwrap()),
        ))
    }

    pub fn ctrl(kind: CtrlKind, body: &[u8]) -> Frame {
        let mut payload = Vec::with_capacity(1 + body.len());
        payload.push(kind as u8);
        payload.extend_from_slice(body);
        Frame {
            payload,
            ..Frame::new(FrameOp::Ctrl)
        }
    }

    pub fn ctrl_kind(&self) -> Option<CtrlKind> {
        if self.op != FrameOp::Ctrl {
            return None;
        }
        match self.payload.first()? {
            1 => Some(CtrlKind::Hello),
            2 => Some(CtrlKind::Error),
            3 => Some(CtrlKind::Bootstrap),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn golden_put_frame() {
        let f = Frame {
            op: FrameOp::PutData,
            region_id: 1,
            offset: 0x0807060504030201,
            custom_remote: 0xAA,
            custom_local_echo: 1u128 << 120,
            payload: vec![0xDE, 0xAD],
        };
        let bytes = f.encode();
        #[rustfmt::skip]
        let expect: Vec<u8> = vec![
            0x4E, 0x55, 0x01, 0x01,
            0x01, 0x00, 0x00, 0x00,
            0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07, 0x08,
            0x02, 0x00, 0x00, 0x00,
            0xAA, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0,
            0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0x01,
            0xDE, 0xAD,
        ];
        assert_eq!(bytes, expect);
        assert_eq!(Frame::decode(&bytes).unwrap(), (f, 54));
    }

    #[test]
    fn golden_side_notify() {
        let mut f = Frame::new(FrameOp::SideNotify);
        f.custom_remote = u128::MAX;
        let b = f.encode();
        assert_eq!(b.len(), HEADER_LEN);
        assert_eq!(&b[..4], &[0x4E, 0x55, 0x01, 0x04]);
        assert_eq!(&b[16..20], &[0, 0, 0, 0]);
        assert!(b[20..36].iter().all(|&x| x == 0xFF));
        assert!(b[36..52].iter().all(|&x| x == 0));
    }

    #[test]
    fn rejects_unknown_op_and_bad_magic() {
        let mut b = Frame::new(FrameOp::Ctrl).encode();
        b[3] = 9;
        assert!(matches!(Frame::decode(&b), Err(FrameError::UnknownOp(9))));
        b[3] = 5;
        b[0] = 0;
        assert!(matches!(Frame::decode(&b), Err(FrameError::Magic(_))));
    }

    #[test]
    fn incomplete_input() {
        let b = Frame::get_request(1, 2, 3, 4, 5, 6, 7).encode();
        assert!(matches!(Frame::decode(&b[..10]), Err(FrameError::Incomplete(42))));
        assert!(matches!(Frame::decode(&b[..HEADER_LEN + 1]), Err(FrameError::Incomplete(15))));
        let (f, _) = Frame::decode(&b).unwrap();
        assert_eq!(f.get_request_fields(), Some((4, 5, 3)));
    }

    proptest! {
        #[test]
        fn round_trip(op in 1u8..=5, region: u32, offset: u64, cr: u128, cl: u128,
                      payload in proptest::collection::vec(any::<u8>(), 0..256)) {
            let f = Frame { op: FrameOp::from_u8(op).unwrap(), region_id: region, offset,
                            custom_remote: cr, custom_local_echo: cl, payload };
            let b = f.encode();
            prop_assert_eq!(b.len(), HEADER_LEN + f.payload.len());
            let (g, n) = Frame::decode(&b).unwrap();
            prop_assert_eq!(n, b.len());
            prop_assert_eq!(&g, &f);
            let mut cur = std::io::Cursor::new(b);
            prop_assert_eq!(Frame::read_from(&mut cur).unwrap(), f);
        }
    }
}
