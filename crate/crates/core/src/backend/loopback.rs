//! In-process transport. Every rank of a world lives in one address space;
//! SENDs are copied into the target device's inbox, WRITE/READ copy
//! straight into or out of registered regions.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use parking_lot::Mutex;

use super::{
    BackendEvent, BackendOp, DeviceConfig, EventKind, LocalBuf, NetDevice, OpKind, Polled,
    RegionTable, Submit, Transport,
};
use crate::error::{Error, Result};
use crate::packet::Packet;
use crate::types::{Rank, RetryReason};

/// A loopback world: `world` ranks sharing one fabric.
pub struct LoopbackFabric {
    world: u32,
    reorder: bool,
    ranks: Vec<RankSlot>,
}

struct RankSlot {
    regions: RegionTable,
    inboxes: Mutex<HashMap<usize, Arc<Inbox>>>,
}

#[derive(Default)]
struct Inbox {
    q: Mutex<InboxState>,
    watermark: AtomicUsize,
}

#[derive(Default)]
struct InboxState {
    posted: VecDeque<(Packet, u64)>,
    arrived: VecDeque<(Rank, Vec<u8>)>,
    events: VecDeque<BackendEvent>,
}

fn fill(mut packet: Packet, data: &[u8]) -> Result<Packet> {
    if data.len() > packet.frame_capacity() {
        return Err(Error::fatal(format!(
            "incoming message of {} bytes exceeds receive packet of {}",
            data.len(),
            packet.frame_capacity()
        )));
    }
    packet.frame_mut()[..data.len()].copy_from_slice(data);
    packet.set_len(data.len());
    Ok(packet)
}

fn recv_event(peer: Rank, packet: Packet, context: u64) -> BackendEvent {
    BackendEvent {
        kind: EventKind::RecvDone,
        peer,
        length: packet.len(),
        imm: None,
        context,
        local: LocalBuf::Packet(packet),
    }
}

impl InboxState {
    fn push_event(&mut self, ev: BackendEvent, reorder: bool) {
        if reorder && !self.events.is_empty() {
            let at = fastrand::usize(..=self.events.len());
            self.events.insert(at, ev);
        } else {
            self.events.push_back(ev);
        }
    }

    fn deliver(&mut self, peer: Rank, data: &[u8], reorder: bool) -> Result<()> {
        match self.posted.pop_front() {
            Some((packet, ctx)) => {
                let packet = fill(packet, data)?;
                self.push_event(recv_event(peer, packet, ctx), reorder);
            }
            None => {
                let item = (peer, data.to_vec());
                if reorder && !self.arrived.is_empty() {
                    let at = fastrand::usize(..=self.arrived.len());
                    self.arrived.insert(at, item);
                } else {
                    self.arrived.push_back(item);
                }
            }
        }
        Ok(())
    }
}

impl LoopbackFabric {
    pub fn new(world: u32, reorder: bool) -> Arc<LoopbackFabric> {
        Arc::new(LoopbackFabric {
            world,
            reorder,
            ranks: (0..world)
                .map(|r| RankSlot {
                    regions: RegionTable::new(Rank(r)),
                    inboxes: Mutex::new(HashMap::new()),
                })
                .collect(),
        })
    }

    pub fn world(&self) -> u32 {
        self.world
    }

    pub fn endpoint(self: &Arc<Self>, rank: Rank) -> LoopbackTransport {
        assert!(rank.0 < self.world, "rank outside the loopback world");
        LoopbackTransport {
            fabric: self.clone(),
            rank,
        }
    }

    fn inbox(&self, rank: Rank, index: usize) -> Arc<Inbox> {
        self.ranks[rank.index()]
            .inboxes
            .lock()
            .entry(index)
            .or_default()
            .clone()
    }
}

pub struct LoopbackTransport {
    fabric: Arc<LoopbackFabric>,
    rank: Rank,
}

impl Transport for LoopbackTransport {
    fn rank_me(&self) -> Rank {
        self.rank
    }

    fn rank_n(&self) -> u32 {
        self.fabric.world
    }

    fn regions(&self) -> &RegionTable {
        &self.fabric.ranks[self.rank.index()].regions
    }

    fn open_device(&self, index: usize, config: &DeviceConfig) -> Result<Box<dyn NetDevice>> {
        Ok(Box::new(self.device(index, config)))
    }

    fn finalize(&self, _serve: &mut dyn FnMut() -> Result<()>) -> Result<()> {
        Ok(())
    }
}

impl LoopbackTransport {
    pub fn device(&self, index: usize, config: &DeviceConfig) -> LoopbackDevice {
        LoopbackDevice {
            fabric: self.fabric.clone(),
            rank: self.rank,
            index,
            depth: config.send_queue_depth.max(1),
            inbox: self.fabric.inbox(self.rank, index),
            peers: (0..self.fabric.world).map(|_| OnceLock::new()).collect(),
            state: Mutex::new(DevState::default()),
            mutations: AtomicU64::new(0),
        }
    }
}

#[derive(Default)]
struct DevState {
    outstanding: usize,
    done: VecDeque<BackendEvent>,
}

pub struct LoopbackDevice {
    fabric: Arc<LoopbackFabric>,
    rank: Rank,
    index: usize,
    depth: usize,
    inbox: Arc<Inbox>,
    peers: Box<[OnceLock<Arc<Inbox>>]>,
    state: Mutex<DevState>,
    mutations: AtomicU64,
}

impl LoopbackDevice {
    fn peer_inbox(&self, peer: Rank) -> Result<&Arc<Inbox>> {
        let slot = self
            .peers
            .get(peer.index())
            .ok_or_else(|| Error::invalid(format!("rank {peer} outside the world")))?;
        Ok(slot.get_or_init(|| self.fabric.inbox(peer, self.index)))
    }

    fn execute(&self, op: &mut BackendOp) -> Result<()> {
        let reorder = self.fabric.reorder;
        match op.kind {
            OpKind::Send => {
                let inbox = self.peer_inbox(op.peer)?;
                let mut q = inbox.q.lock();
                q.deliver(self.rank, op.local.as_slice(), reorder)?;
                inbox
                    .watermark
                    .fetch_max(q.arrived.len(), Ordering::Relaxed);
            }
            OpKind::Write => {
                let token = op
                    .remote
                    .ok_or_else(|| Error::invalid("WRITE without a remote token"))?;
                if token.owner != op.peer {
                    return Err(Error::invalid("WRITE token belongs to another rank"));
                }
                let regions = &self.fabric.ranks[op.peer.index()].regions;
                regions.write(token.region, op.remote_offset, op.local.as_slice())?;
                if let Some(imm) = op.imm {
                    let ev = BackendEvent {
                        kind: EventKind::RemoteWriteNotify,
                        peer: self.rank,
                        length: op.local.len(),
                        imm: Some(imm),
                        context: 0,
                        local: LocalBuf::Empty,
                    };
                    self.peer_inbox(op.peer)?.q.lock().push_event(ev, reorder);
                }
            }
            OpKind::Read => {
                let token = op
                    .remote
                    .ok_or_else(|| Error::invalid("READ without a remote token"))?;
                if token.owner != op.peer {
                    return Err(Error::invalid("READ token belongs to another rank"));
                }
                let regions = &self.fabric.ranks[op.peer.index()].regions;
                regions.read(token.region, op.remote_offset, op.local.as_mut_slice())?;
            }
            OpKind::Recv => unreachable!(),
        }
        Ok(())
    }
}

impl NetDevice for LoopbackDevice {
    fn index(&self) -> usize {
        self.index
    }

    fn post(&self, mut op: BackendOp) -> Result<Submit> {
        let Some(mut st) = self.state.try_lock() else {
            return Ok(Submit::Retry(RetryReason::LockBusy, op));
        };
        self.mutations.fetch_add(1, Ordering::Relaxed);
        if op.kind == OpKind::Recv {
            let LocalBuf::Packet(packet) = std::mem::take(&mut op.local) else {
                return Err(Error::invalid("RECV needs a packet"));
            };
            let mut q = self.inbox.q.lock();
            match q.arrived.pop_front() {
                Some((peer, data)) => {
                    let packet = fill(packet, &data)?;
                    q.push_event(recv_event(peer, packet, op.context), self.fabric.reorder);
                }
                None => q.posted.push_back((packet, op.context)),
            }
            return Ok(Submit::Accepted);
        }
        if st.outstanding >= self.depth {
            return Ok(Submit::Retry(RetryReason::SendQueueFull, op));
        }
        self.execute(&mut op)?;
        st.outstanding += 1;
        st.done.push_back(BackendEvent::completed(op));
        Ok(Submit::Accepted)
    }

    fn poll(&self, max: usize, out: &mut Vec<BackendEvent>) -> Result<Polled> {
        let Some(mut st) = self.state.try_lock() else {
            return Ok(Polled::Busy);
        };
        let mut n = 0;
        while n < max {
            match st.done.pop_front() {
                Some(ev) => {
                    st.outstanding -= 1;
                    out.push(ev);
                    n += 1;
                }
                None => break,
            }
        }
        if n < max {
            let mut q = self.inbox.q.lock();
            while n < max {
                match q.events.pop_front() {
                    Some(ev) => {
                        out.push(ev);
                        n += 1;
                    }
                    None => break,
                }
            }
        }
        if n > 0 {
            self.mutations.fetch_add(1, Ordering::Relaxed);
        }
        Ok(Polled::Events(n))
    }

    fn drain_posted(&self) -> Vec<Packet> {
        let mut q = self.inbox.q.lock();
        let mut out: Vec<Packet> = q.posted.drain(..).map(|(p, _)| p).collect();
        // Received but never polled.
        let mut keep = VecDeque::new();
        for ev in q.events.drain(..) {
            match ev.local {
                LocalBuf::Packet(p) => out.push(p),
                _ => keep.push_back(ev),
            }
        }
        q.events = keep;
        out
    }

    fn in_flight(&self) -> usize {
        self.state.lock().outstanding
    }

    fn stalled(&self) -> usize {
        self.inbox.q.lock().arrived.len()
    }

    fn mutations(&self) -> u64 {
        self.mutations.load(Ordering::Relaxed)
    }

    fn stall_watermark(&self) -> usize {
        self.inbox.watermark.load(Ordering::Relaxed)
    }
}
