//! Network backend contract and the software transports implementing it.
//!
//! The protocol engine speaks only [`BackendOp`] and [`BackendEvent`] to a
//! device. Posting is non-blocking: a busy device lock or a full send
//! queue hands the operation back with a retry reason.

pub mod frame;
pub mod loopback;
mod region;
pub mod tcp;

use std::fmt;

use crate::error::Result;
use crate::packet::Packet;
use crate::types::{Rank, RetryReason};

pub use region::{MemoryToken, RegionTable};

pub const DEFAULT_SEND_QUEUE_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Send,
    Recv,
    Write,
    Read,
}

/// Local memory attached to an operation. It travels with the op and comes
/// back in the completion event.
#[derive(Default)]
pub enum LocalBuf {
    #[default]
    Empty,
    Packet(Packet),
    Bytes(Vec<u8>),
}

impl LocalBuf {
    /// Bytes a SEND or WRITE moves.
    pub fn as_slice(&self) -> &[u8] {
        match self {
            LocalBuf::Empty => &[],
            LocalBuf::Packet(p) => p.frame(),
            LocalBuf::Bytes(v) => v,
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        match self {
            LocalBuf::Empty => &mut [],
            LocalBuf::Packet(p) => p.frame_mut(),
            LocalBuf::Bytes(v) => v,
        }
    }

    pub fn len(&self) -> usize {
        self.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_packet(self) -> Option<Packet> {
        match self {
            LocalBuf::Packet(p) => Some(p),
            _ => None,
        }
    }

    pub fn into_bytes(self) -> Option<Vec<u8>> {
        match self {
            LocalBuf::Bytes(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Debug for LocalBuf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocalBuf::Empty => f.write_str("Empty"),
            LocalBuf::Packet(p) => write!(f, "Packet({})", p.len()),
            LocalBuf::Bytes(v) => write!(f, "Bytes({})", v.len()),
        }
    }
}

/// A transport command.
#[derive(Debug)]
pub struct BackendOp {
    pub kind: OpKind,
    pub peer: Rank,
    pub local: LocalBuf,
    pub remote: Option<MemoryToken>,
    pub remote_offset: u64,
    pub imm: Option<u32>,
    pub context: u64,
}

impl BackendOp {
    pub fn send(peer: Rank, local: LocalBuf, context: u64) -> Self {
        BackendOp {
            kind: OpKind::Send,
            peer,
            local,
            remote: None,
            remote_offset: 0,
            imm: None,
            context,
        }
    }

    /// Pre-post a packet to receive one incoming SEND from any peer.
    pub fn recv(packet: Packet, context: u64) -> Self {
        BackendOp {
            kind: OpKind::Recv,
            peer: Rank(0),
            local: LocalBuf::Packet(packet),
            remote: None,
            remote_offset: 0,
            imm: None,
            context,
        }
    }

    pub fn write(
        peer: Rank,
        data: Vec<u8>,
        token: MemoryToken,
        offset: u64,
        imm: Option<u32>,
        context: u64,
    ) -> Self {
        BackendOp {
            kind: OpKind::Write,
            peer,
            local: LocalBuf::Bytes(data),
            remote: Some(token),
            remote_offset: offset,
            imm,
            context,
        }
    }

    /// Read `into.len()` bytes from the remote region.
    pub fn read(peer: Rank, into: Vec<u8>, token: MemoryToken, offset: u64, context: u64) -> Self {
        BackendOp {
            kind: OpKind::Read,
            peer,
            local: LocalBuf::Bytes(into),
            remote: Some(token),
            remote_offset: offset,
            imm: None,
            context,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    SendDone,
    RecvDone,
    WriteDone,
    ReadDone,
    RemoteWriteNotify,
}

#[derive(Debug)]
pub struct BackendEvent {
    pub kind: EventKind,
    pub peer: Rank,
    pub length: usize,
    pub imm: Option<u32>,
    pub context: u64,
    pub local: LocalBuf,
}

impl BackendEvent {
    /// Completion of `op` at its initiator, handing its buffer back.
    pub fn completed(op: BackendOp) -> Self {
        let kind = match op.kind {
            OpKind::Send => EventKind::SendDone,
            OpKind::Recv => EventKind::RecvDone,
            OpKind::Write => EventKind::WriteDone,
            OpKind::Read => EventKind::ReadDone,
        };
        BackendEvent {
            kind,
            peer: op.peer,
            length: op.local.len(),
            imm: op.imm,
            context: op.context,
            local: op.local,
        }
    }
}

/// Result of a post attempt.
#[derive(Debug)]
pub enum Submit {
    Accepted,
    Retry(RetryReason, BackendOp),
}

/// Result of a poll attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polled {
    /// Another thread holds the device.
    Busy,
    Events(usize),
}

/// One set of transport resources. Threads on different devices never
/// contend on transport state.
pub trait NetDevice: Send + Sync {
    fn index(&self) -> usize;

    fn post(&self, op: BackendOp) -> Result<Submit>;

    /// Append up to `max` completion events to `out`.
    fn poll(&self, max: usize, out: &mut Vec<BackendEvent>) -> Result<Polled>;

    /// Pull back every pre-posted receive packet that has not been used.
    fn drain_posted(&self) -> Vec<Packet>;

    /// Initiated operations whose completion has not been polled yet.
    fn in_flight(&self) -> usize;

    /// Incoming SENDs waiting for a pre-posted receive.
    fn stalled(&self) -> usize;

    /// Monotonic count of state changes caused by post/poll on this device.
    fn mutations(&self) -> u64;

    /// Highest number of SENDs ever stalled at once.
    fn stall_watermark(&self) -> usize {
        0
    }
}

/// A rank's view of a transport: world membership, memory, devices.
pub trait Transport: Send + Sync {
    fn rank_me(&self) -> Rank;
    fn rank_n(&self) -> u32;
    fn regions(&self) -> &RegionTable;
    fn open_device(&self, index: usize, config: &DeviceConfig) -> Result<Box<dyn NetDevice>>;
    /// Collective close. `serve` is called while waiting for peers so
    /// the caller can keep answering their remaining requests.
    fn finalize(&self, serve: &mut dyn FnMut() -> Result<()>) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceConfig {
    pub send_queue_depth: usize,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            send_queue_depth: DEFAULT_SEND_QUEUE_DEPTH,
        }
    }
}
