//! Wire framing for the TCP transport.
//!
//! Every frame starts with a 16-byte little-endian header:
//!
//! ```text
//! magic "LCR1" | kind u8 | flags u8 | imm u32 | length u32 | reserved u16
//! ```
//!
//! `length` counts payload bytes. WRITE and READ_REQ frames carry a
//! 12-byte `{region u32, offset u64}` extension between header and payload.

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LCR1";
pub const HEADER_LEN: usize = 16;
pub const EXT_LEN: usize = 12;
pub const FLAG_IMM: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Hello = 0,
    Send = 1,
    Write = 2,
    ReadReq = 3,
    ReadResp = 4,
    Error = 5,
    Bye = 6,
}

impl FrameKind {
    fn from_u8(v: u8) -> Option<FrameKind> {
        Some(match v {
            0 => FrameKind::Hello,
            1 => FrameKind::Send,
            2 => FrameKind::Write,
            3 => FrameKind::ReadReq,
            4 => FrameKind::ReadResp,
            5 => FrameKind::Error,
            6 => FrameKind::Bye,
            _ => return None,
        })
    }

    fn has_ext(self) -> bool {
        matches!(self, FrameKind::Write | FrameKind::ReadReq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame<'a> {
    pub kind: FrameKind,
    pub imm: Option<u32>,
    /// `(region, offset)` for WRITE and READ_REQ.
    pub ext: Option<(u32, u64)>,
    pub payload: &'a [u8],
}

impl Frame<'_> {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + if self.kind.has_ext() { EXT_LEN } else { 0 } + self.payload.len()
    }

    pub fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        let len = u32::try_from(self.payload.len())
            .map_err(|_| Error::invalid("frame payload exceeds 4 GiB"))?;
        out.reserve(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(self.kind as u8);
        out.push(if self.imm.is_some() { FLAG_IMM } else { 0 });
        out.extend_from_slice(&self.imm.unwrap_or(0).to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&[0, 0]);
        if self.kind.has_ext() {
            let (region, offset) = self.ext.unwrap_or((0, 0));
            out.extend_from_slice(&region.to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
        }
        out.extend_from_slice(self.payload);
        Ok(())
    }
}

/// Bytes needed for the frame starting at `buf`, once its header is in.
pub fn needed(buf: &[u8]) -> Option<usize> {
    if buf.len() < HEADER_LEN {
        return None;
    }
    let kind = FrameKind::from_u8(buf[4])?;
    let len = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
    Some(HEADER_LEN + if kind.has_ext() { EXT_LEN } else { 0 } + len)
}

/// Decode one frame from the front of `buf`. `Ok(None)` means more bytes
/// are needed; the `usize` is the number of bytes consumed.
pub fn decode(buf: &[u8]) -> Result<Option<(Frame<'_>, usize)>> {
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    if buf[0..4] != MAGIC {
        return Err(Error::fatal("bad frame magic"));
    }
    let kind = FrameKind::from_u8(buf[4])
        .ok_or_else(|| Error::fatal(format!("unknown frame kind {}", buf[4])))?;
    let flags = buf[5];
    let imm = u32::from_le_bytes(buf[6..10].try_into().unwrap());
    let len = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
    let mut at = HEADER_LEN;
    let ext_len = if kind.has_ext() { EXT_LEN } else { 0 };
    if buf.len() < at + ext_len + len {
        return Ok(None);
    }
    let ext = if kind.has_ext() {
        let region = u32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
        let offset = u64::from_le_bytes(buf[at + 4..at + 12].try_into().unwrap());
        at += EXT_LEN;
        Some((region, offset))
    } else {
        None
    };
    let frame = Frame {
        kind,
        imm: (flags & FLAG_IMM != 0).then_some(imm),
        ext,
        payload: &buf[at..at + len],
    };
    Ok(Some((frame, at + len)))
}
