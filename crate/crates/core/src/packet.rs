//! Fixed-size transport buffers and the pool that hands them out.
//!
//! Every thread gets its own deque inside each pool it touches. Local gets
//! and puts work at the tail; when the local deque runs dry the thread
//! steals half of a random victim's packets from the victim's head.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};

use crossbeam_utils::CachePadded;
use parking_lot::Mutex;

use crate::registry::MpmcArray;
use crate::types::{MatchingPolicy, Rank, Tag};

pub const DEFAULT_PACKET_CAPACITY: usize = 8192;
pub const DEFAULT_PACKET_COUNT: usize = 4096;
pub const HEADER_SIZE: usize = 32;
pub const NO_RCOMP: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgKind {
    EagerSend = 1,
    ActiveMessage = 2,
    Rts = 3,
    Cts = 4,
    Fin = 5,
}

impl MsgKind {
    fn from_u8(v: u8) -> Option<MsgKind> {
        Some(match v {
            1 => MsgKind::EagerSend,
            2 => MsgKind::ActiveMessage,
            3 => MsgKind::Rts,
            4 => MsgKind::Cts,
            5 => MsgKind::Fin,
            _ => return None,
        })
    }
}

/// Message metadata carried in front of every eager payload.
///
/// Wire layout, little-endian, 32 bytes:
/// `kind:u8 policy:u8 engine:u16 src:u32 tag:u32 rcomp:u32 size:u64 context:u64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketHeader {
    pub msg_kind: MsgKind,
    pub policy: MatchingPolicy,
    pub engine: u16,
    pub src_rank: Rank,
    pub tag: Tag,
    pub rcomp: Option<u32>,
    pub payload_size: u64,
    pub protocol_context: u64,
}

impl PacketHeader {
    pub fn new(msg_kind: MsgKind, src_rank: Rank, tag: Tag) -> Self {
        PacketHeader {
            msg_kind,
            policy: MatchingPolicy::RankTag,
            engine: 0,
            src_rank,
            tag,
            rcomp: None,
            payload_size: 0,
            protocol_context: 0,
        }
    }

    pub fn encode(&self, out: &mut [u8]) {
        out[0] = self.msg_kind as u8;
        out[1] = self.policy.to_wire();
        out[2..4].copy_from_slice(&self.engine.to_le_bytes());
        out[4..8].copy_from_slice(&self.src_rank.0.to_le_bytes());
        out[8..12].copy_from_slice(&self.tag.0.to_le_bytes());
        out[12..16].copy_from_slice(&self.rcomp.unwrap_or(NO_RCOMP).to_le_bytes());
        out[16..24].copy_from_slice(&self.payload_size.to_le_bytes());
        out[24..32].copy_from_slice(&self.protocol_context.to_le_bytes());
    }

    pub fn decode(buf: &[u8]) -> Option<PacketHeader> {
        if buf.len() < HEADER_SIZE {
            return None;
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let rcomp = u32_at(12);
        Some(PacketHeader {
            msg_kind: MsgKind::from_u8(buf[0])?,
            policy: MatchingPolicy::from_wire(buf[1])?,
            engine: u16::from_le_bytes([buf[2], buf[3]]),
            src_rank: Rank(u32_at(4)),
            tag: Tag(u32_at(8)),
            rcomp: (rcomp != NO_RCOMP).then_some(rcomp),
            payload_size: u64_at(16),
            protocol_context: u64_at(24),
        })
    }
}

#[derive(Clone, Copy)]
#[repr(C, align(64))]
struct Line([u8; 64]);

const OWNER_POOL: u8 = 0;
const OWNER_HELD: u8 = 1;

#[repr(C, align(64))]
struct PacketBody {
    owner: AtomicU8,
    origin: u64,
    len: usize,
    capacity: usize,
    lines: Box<[Line]>,
}

/// A header slot followed by a fixed-capacity payload region, 64-byte
/// aligned. Owned by exactly one party at a time.
pub struct Packet {
    body: Box<PacketBody>,
}

impl Packet {
    fn new(origin: u64, payload_capacity: usize) -> Packet {
        let bytes = HEADER_SIZE + payload_capacity;
        let nlines = bytes.div_ceil(64);
        Packet {
            body: Box::new(PacketBody {
                owner: AtomicU8::new(OWNER_POOL),
                origin,
                len: 0,
                capacity: payload_capacity,
                lines: vec![Line([0; 64]); nlines].into_boxed_slice(),
            }),
        }
    }

    fn raw(&self) -> &[u8] {
        let n = self.body.lines.len() * 64;
        // SAFETY: `Line` is a plain byte array with no padding.
        unsafe { std::slice::from_raw_parts(self.body.lines.as_ptr() as *const u8, n) }
    }

    fn raw_mut(&mut self) -> &mut [u8] {
        let n = self.body.lines.len() * 64;
        unsafe { std::slice::from_raw_parts_mut(self.body.lines.as_mut_ptr() as *mut u8, n) }
    }

    pub fn payload_capacity(&self) -> usize {
        self.body.capacity
    }

    /// Bytes of header plus payload a transport may move.
    pub fn frame_capacity(&self) -> usize {
        HEADER_SIZE + self.body.capacity
    }

    pub fn origin(&self) -> u64 {
        self.body.origin
    }

    /// Current frame length (header + payload).
    pub fn len(&self) -> usize {
        self.body.len
    }

    pub fn is_empty(&self) -> bool {
        self.body.len == 0
    }

    pub fn set_len(&mut self, len: usize) {
        assert!(len <= self.frame_capacity());
        self.body.len = len;
    }

    /// The whole frame: header bytes then payload.
    pub fn frame(&self) -> &[u8] {
        &self.raw()[..self.body.len]
    }

    pub fn frame_mut(&mut self) -> &mut [u8] {
        let cap = self.frame_capacity();
        &mut self.raw_mut()[..cap]
    }

    pub fn header(&self) -> Option<PacketHeader> {
        PacketHeader::decode(self.frame())
    }

    pub fn payload(&self) -> &[u8] {
        let f = self.frame();
        if f.len() <= HEADER_SIZE {
            &[]
        } else {
            &f[HEADER_SIZE..]
        }
    }

    /// Write header and payload, setting the frame length.
    pub fn fill(&mut self, header: &PacketHeader, payload: &[u8]) {
        assert!(
            payload.len() <= self.body.capacity,
            "payload exceeds packet capacity"
        );
        let raw = self.raw_mut();
        header.encode(&mut raw[..HEADER_SIZE]);
        raw[HEADER_SIZE..HEADER_SIZE + payload.len()].copy_from_slice(payload);
        self.body.len = HEADER_SIZE + payload.len();
    }

    fn mark(&self, from: u8, to: u8) -> bool {
        self.body.owner.swap(to, Ordering::AcqRel) == from
    }
}

impl fmt::Debug for Packet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Packet")
            .field("origin", &self.body.origin)
            .field("len", &self.body.len)
            .finish()
    }
}

type Deque = CachePadded<Mutex<VecDeque<Packet>>>;

struct PoolShared {
    uid: u64,
    capacity: usize,
    total: usize,
    deques: MpmcArray<Arc<Deque>>,
    violations: AtomicUsize,
    steals: AtomicUsize,
}

static NEXT_POOL_UID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static LOCAL_DEQUES: RefCell<Vec<(u64, Weak<Deque>, usize)>> = const { RefCell::new(Vec::new()) };
}

/// Pool of fixed-size packets. Cloning yields another handle to the same
/// pool.
#[derive(Clone)]
pub struct PacketPool {
    shared: Arc<PoolShared>,
}

impl PartialEq for PacketPool {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.shared, &other.shared)
    }
}

impl fmt::Debug for PacketPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PacketPool")
            .field("uid", &self.shared.uid)
            .field("total", &self.shared.total)
            .field("capacity", &self.shared.capacity)
            .finish()
    }
}

impl PacketPool {
    /// Create `count` packets of `payload_capacity` bytes each, seeded into
    /// the calling thread's deque.
    pub fn new(count: usize, payload_capacity: usize) -> PacketPool {
        let uid = NEXT_POOL_UID.fetch_add(1, Ordering::Relaxed);
        let pool = PacketPool {
            shared: Arc::new(PoolShared {
                uid,
                capacity: payload_capacity,
                total: count,
                deques: MpmcArray::with_capacity(16),
                violations: AtomicUsize::new(0),
                steals: AtomicUsize::new(0),
            }),
        };
        let (dq, _) = pool.local();
        dq.lock()
            .extend((0..count).map(|_| Packet::new(uid, payload_capacity)));
        pool
    }

    pub fn uid(&self) -> u64 {
        self.shared.uid
    }

    pub fn payload_capacity(&self) -> usize {
        self.shared.capacity
    }

    pub fn total(&self) -> usize {
        self.shared.total
    }

    /// Calling thread's deque and its index, registering on first use.
    fn local(&self) -> (Arc<Deque>, usize) {
        let uid = self.shared.uid;
        LOCAL_DEQUES.with(|cell| {
            let mut v = cell.borrow_mut();
            // Forget deques of pools that no longer exist.
            v.retain(|(_, w, _)| w.strong_count() > 0);
            if let Some(pos) = v.iter().position(|(u, _, _)| *u == uid) {
                v.swap(0, pos);
                if let Some(dq) = v[0].1.upgrade() {
                    return (dq, v[0].2);
                }
            }
            let dq: Arc<Deque> = Arc::new(CachePadded::new(Mutex::new(VecDeque::new())));
            let idx = self.shared.deques.append(dq.clone());
            v.insert(0, (uid, Arc::downgrade(&dq), idx));
            (dq, idx)
        })
    }

    fn with_local<R>(&self, f: impl FnOnce(&Deque, usize) -> R) -> R {
        let uid = self.shared.uid;
        let hit = LOCAL_DEQUES.with(|cell| {
            let v = cell.borrow();
            match v.first() {
                Some((u, dq, idx)) if *u == uid => dq.upgrade().map(|d| (d, *idx)),
                _ => None,
            }
        });
        let (dq, idx) = match hit {
            Some(x) => x,
            None => self.local(),
        };
        f(&dq, idx)
    }

    /// Take a packet. `None` means the local deque was empty and one steal
    /// attempt came back empty-handed.
    pub fn get(&self) -> Option<Packet> {
        let p = self.with_local(|dq, idx| {
            if let Some(p) = dq.lock().pop_back() {
                return Some(p);
            }
            self.steal_into(dq, idx)
        })?;
        if !p.mark(OWNER_POOL, OWNER_HELD) {
            self.shared.violations.fetch_add(1, Ordering::Relaxed);
            debug_assert!(false, "packet handed out while already held");
        }
        Some(p)
    }

    fn steal_into(&self, dq: &Deque, own: usize) -> Option<Packet> {
        let n = self.shared.deques.len();
        if n < 2 {
            return None;
        }
        let mut victim = fastrand::usize(..n - 1);
        if victim >= own {
            victim += 1;
        }
        let victim = self.shared.deques.get(victim)?;
        let mut loot: Vec<Packet> = {
            let mut v = victim.lock();
            let take = v.len().div_ceil(2);
            v.drain(..take).collect()
        };
        if loot.is_empty() {
            return None;
        }
        self.shared.steals.fetch_add(1, Ordering::Relaxed);
        let mine = loot.pop();
        if !loot.is_empty() {
            dq.lock().extend(loot);
        }
        mine
    }

    /// Return a packet to the caller's deque (tail end).
    pub fn put(&self, p: Packet) {
        debug_assert_eq!(
            p.origin(),
            self.shared.uid,
            "packet returned to a foreign pool"
        );
        if !p.mark(OWNER_HELD, OWNER_POOL) {
            self.shared.violations.fetch_add(1, Ordering::Relaxed);
            debug_assert!(false, "packet returned twice");
        }
        self.with_local(|dq, _| dq.lock().push_back(p));
    }

    /// Packets currently resting in deques.
    pub fn census(&self) -> usize {
        self.shared.deques.iter().map(|d| d.lock().len()).sum()
    }

    /// Length of the calling thread's deque.
    pub fn local_len(&self) -> usize {
        self.with_local(|dq, _| dq.lock().len())
    }

    pub fn registered_deques(&self) -> usize {
        self.shared.deques.len()
    }

    pub fn ownership_violations(&self) -> usize {
        self.shared.violations.load(Ordering::Relaxed)
    }

    pub fn steals(&self) -> usize {
        self.shared.steals.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustion_returns_none() {
        let pool = PacketPool::new(4, 64);
        let got: Vec<_> = (0..4).map(|_| pool.get().unwrap()).collect();
        assert!(pool.get().is_none());
        let mut addrs: Vec<_> = got.iter().map(|p| p.raw().as_ptr() as usize).collect();
        addrs.sort_unstable();
        addrs.dedup();
        assert_eq!(addrs.len(), 4);
        for p in got {
            pool.put(p);
        }
        assert_eq!(pool.census(), 4);
    }

    #[test]
    fn get_then_put_keeps_census() {
        let pool = PacketPool::new(8, 64);
        let p = pool.get().unwrap();
        assert_eq!(pool.census(), 7);
        pool.put(p);
        assert_eq!(pool.census(), 8);
    }

    #[test]
    fn local_discipline_is_lifo() {
        let pool = PacketPool::new(8, 64);
        let a = pool.get().unwrap();
        let b = pool.get().unwrap();
        let b_addr = b.raw().as_ptr() as usize;
        pool.put(a);
        pool.put(b);
        let again = pool.get().unwrap();
        assert_eq!(again.raw().as_ptr() as usize, b_addr);
        pool.put(again);
    }

    #[test]
    fn steal_takes_half() {
        // The creating thread holds all 8 packets in its deque.
        let pool = PacketPool::new(8, 64);
        assert_eq!(pool.local_len(), 8);
        let pool2 = pool.clone();
        let p = std::thread::spawn(move || {
            let p = pool2.get().expect("steal from the only other deque");
            assert_eq!(pool2.local_len(), 3);
            p
        })
        .join()
        .unwrap();
        assert_eq!(pool.local_len(), 4);
        assert_eq!(pool.steals(), 1);
        pool.put(p);
        assert_eq!(pool.census(), 8);
    }

    #[test]
    fn fresh_thread_exhausts_then_retries() {
        let pool = PacketPool::new(4, 64);
        let pool2 = pool.clone();
        std::thread::spawn(move || {
            let got: Vec<_> = (0..4).map(|_| pool2.get().unwrap()).collect();
            assert!(pool2.get().is_none());
            for p in got {
                pool2.put(p);
            }
        })
        .join()
        .unwrap();
        assert_eq!(pool.census(), 4);
    }

    #[test]
    fn put_from_fresh_thread_lands_locally() {
        let pool = PacketPool::new(2, 64);
        let p = pool.get().unwrap();
        let before = pool.registered_deques();
        let pool2 = pool.clone();
        std::thread::spawn(move || {
            pool2.put(p);
            assert_eq!(pool2.local_len(), 1);
        })
        .join()
        .unwrap();
        assert_eq!(pool.registered_deques(), before + 1);
        assert_eq!(pool.census(), 2);
    }

    #[test]
    fn header_roundtrip() {
        let mut h = PacketHeader::new(MsgKind::Rts, Rank(3), Tag(u32::MAX));
        h.policy = MatchingPolicy::TagOnly;
        h.engine = 7;
        h.rcomp = Some(9);
        h.payload_size = 1 << 40;
        h.protocol_context = 0xdead_beef;
        let mut buf = [0u8; HEADER_SIZE];
        h.encode(&mut buf);
        assert_eq!(PacketHeader::decode(&buf), Some(h));
    }

    #[test]
    fn fill_and_alignment() {
        let pool = PacketPool::new(1, 100);
        let mut p = pool.get().unwrap();
        assert_eq!(p.raw().as_ptr() as usize % 64, 0);
        let h = PacketHeader::new(MsgKind::EagerSend, Rank(0), Tag(1));
        p.fill(&h, &[7u8; 100]);
        assert_eq!(p.payload(), &[7u8; 100][..]);
        assert_eq!(p.header().unwrap().tag, Tag(1));
        pool.put(p);
    }

    #[test]
    fn many_threads_conserve() {
        let pool = PacketPool::new(64, 32);
        let hs: Vec<_> = (0..8)
            .map(|_| {
                let pool = pool.clone();
                std::thread::spawn(move || {
                    let mut held = Vec::new();
                    for i in 0..5000 {
                        if i % 3 == 2 {
                            if let Some(p) = held.pop() {
                                pool.put(p);
                            }
                        } else if let Some(p) = pool.get() {
                            held.push(p);
                        }
                        if held.len() > 4 {
                            pool.put(held.remove(0));
                        }
                    }
                    for p in held {
                        pool.put(p);
                    }
                })
            })
            .collect();
        for h in hs {
            h.join().unwrap();
        }
        assert_eq!(pool.census(), 64);
        assert_eq!(pool.ownership_violations(), 0);
    }
}
