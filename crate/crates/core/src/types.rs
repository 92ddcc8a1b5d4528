//! Value types shared by every posting operation: ranks, tags, the status
//! contract and the named-option set with its resolution against runtime
//! defaults.

use std::fmt;

use crate::backend::MemoryToken;
use crate::error::{Error, Result};
use crate::packet::PacketPool;
use crate::protocol::{Device, MatchingEngineHandle};
use crate::registry::RcompId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Rank(pub u32);

impl Rank {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for Rank {
    fn from(v: u32) -> Self {
        Rank(v)
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Tag(pub u32);

impl From<u32> for Tag {
    fn from(v: u32) -> Self {
        Tag(v)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// The scarce resource behind a RETRY.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RetryReason {
    PacketPoolEmpty,
    SendQueueFull,
    LockBusy,
    CqFull,
    NothingToPop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum State {
    /// Completed inside the call; completion objects are not signaled.
    Done,
    /// Accepted; the completion object will be signaled exactly once.
    Posted,
    /// Resubmit later.
    Retry(RetryReason),
}

/// Result descriptor of a posting or popping operation and the value
/// delivered to completion objects.
///
/// `rank`, `tag`, `buffer` and `size` are meaningful when `state` is
/// `Done`; a status handed to a completion object is always `Done`. A
/// `Retry` status hands the caller's buffer back so it can be resubmitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Status {
    pub state: State,
    pub rank: Rank,
    pub tag: Tag,
    pub buffer: Option<Vec<u8>>,
    pub size: usize,
    pub user_context: u64,
}

impl Status {
    pub fn done(
        rank: Rank,
        tag: Tag,
        buffer: Option<Vec<u8>>,
        size: usize,
        user_context: u64,
    ) -> Self {
        Status {
            state: State::Done,
            rank,
            tag,
            buffer,
            size,
            user_context,
        }
    }

    pub fn posted() -> Self {
        Status {
            state: State::Posted,
            rank: Rank(0),
            tag: Tag(0),
            buffer: None,
            size: 0,
            user_context: 0,
        }
    }

    pub fn retry(reason: RetryReason, buffer: Option<Vec<u8>>) -> Self {
        Status {
            state: State::Retry(reason),
            rank: Rank(0),
            tag: Tag(0),
            buffer,
            size: 0,
            user_context: 0,
        }
    }

    pub fn is_done(&self) -> bool {
        self.state == State::Done
    }

    pub fn is_posted(&self) -> bool {
        self.state == State::Posted
    }

    pub fn is_retry(&self) -> bool {
        matches!(self.state, State::Retry(_))
    }

    pub fn retry_reason(&self) -> Option<RetryReason> {
        match self.state {
            State::Retry(r) => Some(r),
            _ => None,
        }
    }

    /// Take the buffer out, leaving `None`.
    pub fn take_buffer(&mut self) -> Option<Vec<u8>> {
        self.buffer.take()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Direction {
    #[default]
    Out,
    In,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MatchingPolicy {
    #[default]
    RankTag,
    RankOnly,
    TagOnly,
}

impl MatchingPolicy {
    pub fn to_wire(self) -> u8 {
        match self {
            MatchingPolicy::RankTag => 1,
            MatchingPolicy::RankOnly => 2,
            MatchingPolicy::TagOnly => 3,
        }
    }

    pub fn from_wire(v: u8) -> Option<Self> {
        match v {
            1 => Some(MatchingPolicy::RankTag),
            2 => Some(MatchingPolicy::RankOnly),
            3 => Some(MatchingPolicy::TagOnly),
            _ => None,
        }
    }
}

/// Target-side address of a one-sided operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RemoteBuffer {
    pub token: MemoryToken,
    pub offset: u64,
}

impl RemoteBuffer {
    pub fn new(token: MemoryToken, offset: u64) -> Self {
        RemoteBuffer { token, offset }
    }
}

/// The communication paradigm selected by (direction, remote buffer,
/// remote completion).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Paradigm {
    Send,
    ActiveMessage,
    Put,
    PutWithSignal,
    Recv,
    Get,
    GetWithSignal,
}

impl Paradigm {
    /// Classify an option triple. Seven of the eight combinations are
    /// valid; an inbound operation naming a remote completion without a
    /// remote buffer is rejected.
    pub fn classify(
        direction: Direction,
        remote_buffer: bool,
        remote_comp: bool,
    ) -> Result<Paradigm> {
        use Direction::*;
        Ok(match (direction, remote_buffer, remote_comp) {
            (Out, false, false) => Paradigm::Send,
            (Out, false, true) => Paradigm::ActiveMessage,
            (Out, true, false) => Paradigm::Put,
            (Out, true, true) => Paradigm::PutWithSignal,
            (In, false, false) => Paradigm::Recv,
            (In, false, true) => {
                return Err(Error::invalid(
                    "inbound operation with a remote completion requires a remote buffer",
                ))
            }
            (In, true, false) => Paradigm::Get,
            (In, true, true) => Paradigm::GetWithSignal,
        })
    }
}

/// Named optional arguments of a posting operation.
///
/// Handles left unset resolve to the runtime's defaults. Handle equality is
/// identity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PostOptions {
    pub device: Option<Device>,
    pub matching_engine: Option<MatchingEngineHandle>,
    pub packet_pool: Option<PacketPool>,
    pub tag: Tag,
    pub matching_policy: MatchingPolicy,
    pub remote_buffer: Option<RemoteBuffer>,
    pub remote_comp: Option<RcompId>,
    pub direction: Direction,
    pub allow_done: bool,
    pub allow_retry: bool,
    pub user_context: u64,
}

impl PostOptions {
    pub fn new(direction: Direction) -> Self {
        PostOptions {
            direction,
            allow_done: true,
            allow_retry: true,
            ..Default::default()
        }
    }

    pub fn paradigm(&self) -> Result<Paradigm> {
        Paradigm::classify(
            self.direction,
            self.remote_buffer.is_some(),
            self.remote_comp.is_some(),
        )
    }

    /// Fill every unset handle from `defaults` and check the option triple.
    /// Explicitly set handles win.
    pub fn resolve(mut self, defaults: &PostOptions) -> Result<PostOptions> {
        self.paradigm()?;
        if self.device.is_none() {
            self.device = defaults.device.clone();
        }
        if self.matching_engine.is_none() {
            self.matching_engine = defaults.matching_engine.clone();
        }
        if self.packet_pool.is_none() {
            self.packet_pool = defaults.packet_pool.clone();
        }
        Ok(self)
    }
}

/// Free-function form of [`PostOptions::resolve`].
pub fn resolve_options(
    partial: PostOptions,
    runtime_defaults: &PostOptions,
) -> Result<PostOptions> {
    partial.resolve(runtime_defaults)
}
