//! Framed TCP transport.
//!
//! Device `k` of a rank sends to device `k` of every peer over its own
//! outgoing connection (opened lazily) and receives over connections the
//! peers opened towards it. All socket I/O is non-blocking and happens
//! inside `post` and `poll`; there are no background threads.

use std::collections::{HashMap, VecDeque};
use std::fs::OpenOptions;
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use slab::Slab;

use super::frame::{self, Frame, FrameKind};
use super::{
    BackendEvent, BackendOp, DeviceConfig, EventKind, LocalBuf, NetDevice, OpKind, Polled,
    RegionTable, Submit, Transport,
};
use crate::error::{Error, Result};
use crate::packet::Packet;
use crate::types::{Rank, RetryReason};

const CONTROL_INDEX: u32 = u32::MAX;
const READ_CHUNK: usize = 64 * 1024;
const BUFFER_LIMIT: usize = 4 << 20;

/// How ranks find each other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Bootstrap {
    /// Every rank appends `rank world addr` to a shared file and waits for
    /// the others.
    RendezvousFile(PathBuf),
    /// `host:port` per rank, in rank order.
    Hosts(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpConfig {
    pub rank: u32,
    pub world: u32,
    pub bootstrap: Bootstrap,
    pub timeout: Duration,
}

impl TcpConfig {
    pub fn new(rank: u32, world: u32, bootstrap: Bootstrap) -> Self {
        TcpConfig {
            rank,
            world,
            bootstrap,
            timeout: Duration::from_secs(30),
        }
    }
}

struct InConn {
    stream: TcpStream,
    peer: Rank,
    rbuf: Vec<u8>,
    rpos: usize,
    eof: bool,
}

impl InConn {
    fn new(stream: TcpStream) -> InConn {
        InConn {
            stream,
            peer: Rank(u32::MAX),
            rbuf: Vec::new(),
            rpos: 0,
            eof: false,
        }
    }

    fn unread(&self) -> &[u8] {
        &self.rbuf[self.rpos..]
    }

    /// Read whatever the socket has, keeping at most about `limit`
    /// unparsed bytes buffered so stalled data stays in the kernel.
    fn fill(&mut self) -> Result<()> {
        if self.rpos == self.rbuf.len() {
            self.rbuf.clear();
            self.rpos = 0;
        } else if self.rpos > BUFFER_LIMIT {
            self.rbuf.drain(..self.rpos);
            self.rpos = 0;
        }
        let limit = frame::needed(self.unread()).unwrap_or(0).max(BUFFER_LIMIT);
        let mut tmp = [0u8; READ_CHUNK];
        while !self.eof && self.rbuf.len() - self.rpos < limit {
            match self.stream.read(&mut tmp) {
                Ok(0) => self.eof = true,
                Ok(n) => self.rbuf.extend_from_slice(&tmp[..n]),
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => {
                    return Err(Error::fatal(format!(
                        "receive from rank {}: {e}",
                        self.peer
                    )))
                }
            }
        }
        Ok(())
    }
}

struct OutConn {
    stream: TcpStream,
    wbuf: Vec<u8>,
    wpos: usize,
    queued: u64,
    written: u64,
    waiting: VecDeque<(u64, BackendEvent)>,
}

impl OutConn {
    fn push(&mut self, f: Frame<'_>) -> Result<u64> {
        let before = self.wbuf.len();
        f.encode(&mut self.wbuf)?;
        self.queued += (self.wbuf.len() - before) as u64;
        Ok(self.queued)
    }

    fn flush(&mut self, peer: Rank, done: &mut VecDeque<BackendEvent>) -> Result<()> {
        while self.wpos < self.wbuf.len() {
            match self.stream.write(&self.wbuf[self.wpos..]) {
                Ok(0) => return Err(Error::fatal(format!("connection to rank {peer} closed"))),
                Ok(n) => {
                    self.wpos += n;
                    self.written += n as u64;
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::fatal(format!("send to rank {peer}: {e}"))),
            }
        }
        if self.wpos == self.wbuf.len() {
            self.wbuf.clear();
            self.wpos = 0;
        } else if self.wpos > BUFFER_LIMIT {
            self.wbuf.drain(..self.wpos);
            self.wpos = 0;
        }
        while let Some((end, _)) = self.waiting.front() {
            if *end > self.written {
                break;
            }
            done.push_back(self.waiting.pop_front().unwrap().1);
        }
        Ok(())
    }
}

struct TcpShared {
    rank: Rank,
    world: u32,
    addrs: Vec<SocketAddr>,
    timeout: Duration,
    listener: Mutex<TcpListener>,
    unidentified: Mutex<Vec<InConn>>,
    pending: Mutex<HashMap<u32, Vec<InConn>>>,
    regions: RegionTable,
}

fn hello_payload(rank: Rank, world: u32, index: u32) -> [u8; 12] {
    let mut b = [0u8; 12];
    b[0..4].copy_from_slice(&rank.0.to_le_bytes());
    b[4..8].copy_from_slice(&world.to_le_bytes());
    b[8..12].copy_from_slice(&index.to_le_bytes());
    b
}

impl TcpShared {
    /// Accept new connections and sort identified ones by device index.
    fn accept(&self) -> Result<()> {
        if let Some(l) = self.listener.try_lock() {
            loop {
                match l.accept() {
                    Ok((s, _)) => {
                        s.set_nonblocking(true)?;
                        s.set_nodelay(true)?;
                        self.unidentified.lock().push(InConn::new(s));
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                    Err(e) if e.kind() == ErrorKind::Interrupted => {}
                    Err(e) => return Err(Error::fatal(format!("accept: {e}"))),
                }
            }
        }
        let Some(mut un) = self.unidentified.try_lock() else {
            return Ok(());
        };
        let mut i = 0;
        while i < un.len() {
            un[i].fill()?;
            let hello = match frame::decode(un[i].unread())? {
                Some((f, used)) if f.kind == FrameKind::Hello && f.payload.len() == 12 => {
                    let p = f.payload;
                    let rank = u32::from_le_bytes(p[0..4].try_into().unwrap());
                    let world = u32::from_le_bytes(p[4..8].try_into().unwrap());
                    let index = u32::from_le_bytes(p[8..12].try_into().unwrap());
                    Some((rank, world, index, used))
                }
                Some(_) => return Err(Error::fatal("connection did not start with HELLO")),
                None => None,
            };
            match hello {
                Some((rank, world, index, used)) => {
                    if world != self.world || rank >= self.world {
                        return Err(Error::fatal(format!(
                            "peer claims rank {rank} of world {world}, this rank expects world {}",
                            self.world
                        )));
                    }
                    let mut c = un.swap_remove(i);
                    c.peer = Rank(rank);
                    c.rpos += used;
                    self.pending.lock().entry(index).or_default().push(c);
                }
                None if un[i].eof => {
                    un.swap_remove(i);
                }
                None => i += 1,
            }
        }
        Ok(())
    }

    fn connect(&self, peer: Rank, index: u32) -> Result<OutConn> {
        let addr = self.addrs[peer.index()];
        let deadline = Instant::now() + self.timeout;
        let stream = loop {
            match TcpStream::connect_timeout(&addr, self.timeout) {
                Ok(s) => break s,
                Err(e) if Instant::now() < deadline => {
                    log::debug!("connect to rank {peer} at {addr}: {e}, retrying");
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => {
                    return Err(Error::fatal(format!(
                        "connect to rank {peer} at {addr}: {e}"
                    )))
                }
            }
        };
        stream.set_nodelay(true)?;
        stream.set_nonblocking(true)?;
        let mut c = OutConn {
            stream,
            wbuf: Vec::new(),
            wpos: 0,
            queued: 0,
            written: 0,
            waiting: VecDeque::new(),
        };
        c.push(Frame {
            kind: FrameKind::Hello,
            imm: None,
            ext: None,
            payload: &hello_payload(self.rank, self.world, index),
        })?;
        Ok(c)
    }
}

/// One rank's endpoint of a TCP world.
pub struct TcpTransport {
    shared: Arc<TcpShared>,
    control: TcpDevice,
}

impl TcpTransport {
    /// Bind, exchange addresses, and connect to every peer. Fails if the
    /// peers disagree about the world size or do not show up in time.
    pub fn connect(cfg: &TcpConfig) -> Result<TcpTransport> {
        if cfg.world == 0 || cfg.rank >= cfg.world {
            return Err(Error::invalid(format!(
                "rank {} outside world of {}",
                cfg.rank, cfg.world
            )));
        }
        let (listener, addrs) = match &cfg.bootstrap {
            Bootstrap::Hosts(hosts) => bootstrap_hosts(cfg, hosts)?,
            Bootstrap::RendezvousFile(path) => bootstrap_file(cfg, path)?,
        };
        listener.set_nonblocking(true)?;
        let shared = Arc::new(TcpShared {
            rank: Rank(cfg.rank),
            world: cfg.world,
            addrs,
            timeout: cfg.timeout,
            listener: Mutex::new(listener),
            unidentified: Mutex::new(Vec::new()),
            pending: Mutex::new(HashMap::new()),
            regions: RegionTable::new(Rank(cfg.rank)),
        });
        let control = TcpDevice::new(shared.clone(), CONTROL_INDEX, 1 << 20);
        let t = TcpTransport { shared, control };
        t.control.connect_all()?;
        t.control.pump_until(
            cfg.timeout,
            |st| st.inbound_peers() == cfg.world as usize,
            &mut || Ok(()),
        )?;
        Ok(t)
    }

    pub fn device(&self, index: usize, config: &DeviceConfig) -> Result<TcpDevice> {
        let index = u32::try_from(index)
            .ok()
            .filter(|&i| i != CONTROL_INDEX)
            .ok_or_else(|| Error::invalid("device index out of range"))?;
        Ok(TcpDevice::new(
            self.shared.clone(),
            index,
            config.send_queue_depth.max(1),
        ))
    }
}

impl Transport for TcpTransport {
    fn rank_me(&self) -> Rank {
        self.shared.rank
    }

    fn rank_n(&self) -> u32 {
        self.shared.world
    }

    fn regions(&self) -> &RegionTable {
        &self.shared.regions
    }

    fn open_device(&self, index: usize, config: &DeviceConfig) -> Result<Box<dyn NetDevice>> {
        Ok(Box::new(self.device(index, config)?))
    }

    /// Exchange BYE with every peer so nobody tears down sockets a peer is
    /// still reading from.
    fn finalize(&self, serve: &mut dyn FnMut() -> Result<()>) -> Result<()> {
        {
            let mut st = self.control.state.lock();
            for p in 0..self.shared.world {
                let peer = Rank(p);
                let c = self.control.out_conn(&mut st, peer)?;
                c.push(Frame {
                    kind: FrameKind::Bye,
                    imm: None,
                    ext: None,
                    payload: &[],
                })?;
            }
        }
        let world = self.shared.world as usize;
        self.control.pump_until(
            self.shared.timeout,
            |st| st.byes.iter().filter(|b| **b).count() == world,
            serve,
        )
    }
}

#[derive(Default)]
struct TcpState {
    out: Vec<Option<OutConn>>,
    inbound: Vec<InConn>,
    posted: VecDeque<(Packet, u64)>,
    done: VecDeque<BackendEvent>,
    rx: VecDeque<BackendEvent>,
    outstanding: usize,
    reads: Slab<BackendOp>,
    byes: Vec<bool>,
    closed: Vec<bool>,
    fatal: Option<String>,
}

impl TcpState {
    fn inbound_peers(&self) -> usize {
        let mut seen: Vec<Rank> = self.inbound.iter().map(|c| c.peer).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    fn check(&self) -> Result<()> {
        match &self.fatal {
            Some(m) => Err(Error::fatal(m.clone())),
            None => Ok(()),
        }
    }
}

pub struct TcpDevice {
    shared: Arc<TcpShared>,
    index: u32,
    depth: usize,
    state: Mutex<TcpState>,
    mutations: AtomicU64,
    watermark: AtomicUsize,
}

struct Reply {
    peer: Rank,
    kind: FrameKind,
    imm: Option<u32>,
    payload: Vec<u8>,
}

impl TcpDevice {
    fn new(shared: Arc<TcpShared>, index: u32, depth: usize) -> TcpDevice {
        let world = shared.world as usize;
        TcpDevice {
            shared,
            index,
            depth,
            state: Mutex::new(TcpState {
                out: (0..world).map(|_| None).collect(),
                byes: vec![false; world],
                closed: vec![false; world],
                ..Default::default()
            }),
            mutations: AtomicU64::new(0),
            watermark: AtomicUsize::new(0),
        }
    }

    fn out_conn<'a>(&self, st: &'a mut TcpState, peer: Rank) -> Result<&'a mut OutConn> {
        if peer.0 >= self.shared.world {
            return Err(Error::invalid(format!("rank {peer} outside the world")));
        }
        if st.closed[peer.index()] {
            return Err(Error::fatal(format!(
                "rank {peer} has closed its connection"
            )));
        }
        let slot = &mut st.out[peer.index()];
        if slot.is_none() {
            *slot = Some(self.shared.connect(peer, self.index)?);
        }
        Ok(slot.as_mut().unwrap())
    }

    fn connect_all(&self) -> Result<()> {
        let mut st = self.state.lock();
        for p in 0..self.shared.world {
            self.out_conn(&mut st, Rank(p))?;
        }
        let TcpState { out, done, .. } = &mut *st;
        for (p, c) in out.iter_mut().enumerate() {
            if let Some(c) = c {
                c.flush(Rank(p as u32), done)?;
            }
        }
        Ok(())
    }

    /// Drive I/O until `pred` holds or `timeout` passes.
    fn pump_until(
        &self,
        timeout: Duration,
        pred: impl Fn(&TcpState) -> bool,
        serve: &mut dyn FnMut() -> Result<()>,
    ) -> Result<()> {
        let deadline = Instant::now() + timeout;
        loop {
            serve()?;
            {
                let mut st = self.state.lock();
                self.pump(&mut st)?;
                if pred(&st) {
                    return Ok(());
                }
            }
            if Instant::now() >= deadline {
                return Err(Error::fatal("timed out waiting for peers"));
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    /// Accept, flush, read and parse. Events land in `st.done` / `st.rx`.
    fn pump(&self, st: &mut TcpState) -> Result<()> {
        st.check()?;
        self.shared.accept()?;
        if let Some(mut mine) = self.shared.pending.lock().remove(&self.index) {
            st.inbound.append(&mut mine);
        }
        {
            let TcpState { out, done, .. } = &mut *st;
            for (p, c) in out.iter_mut().enumerate() {
                if let Some(c) = c {
                    c.flush(Rank(p as u32), done)?;
                }
            }
        }
        let mut replies = Vec::new();
        let mut i = 0;
        while i < st.inbound.len() {
            if let Err(e) = self.read_conn(st, i, &mut replies) {
                st.fatal = Some(e.message().to_string());
                return Err(e);
            }
            let c = &st.inbound[i];
            if c.eof && c.unread().is_empty() {
                let peer = c.peer;
                st.closed[peer.index()] = true;
                st.inbound.swap_remove(i);
            } else {
                i += 1;
            }
        }
        for r in replies {
            let c = self.out_conn(st, r.peer)?;
            c.push(Frame {
                kind: r.kind,
                imm: r.imm,
                ext: None,
                payload: &r.payload,
            })?;
            let TcpState { out, done, .. } = &mut *st;
            out[r.peer.index()].as_mut().unwrap().flush(r.peer, done)?;
        }
        Ok(())
    }

    fn read_conn(&self, st: &mut TcpState, i: usize, replies: &mut Vec<Reply>) -> Result<()> {
        let TcpState {
            inbound,
            posted,
            done,
            rx,
            reads,
            byes,
            fatal,
            ..
        } = st;
        let c = &mut inbound[i];
        c.fill()?;
        let peer = c.peer;
        while let Some((f, used)) = frame::decode(c.unread())? {
            match f.kind {
                FrameKind::Send => {
                    let Some((mut packet, ctx)) = posted.pop_front() else {
                        // No receive slot: leave the rest in the buffer.
                        self.watermark.fetch_max(1, Ordering::Relaxed);
                        break;
                    };
                    if f.payload.len() > packet.frame_capacity() {
                        return Err(Error::fatal(format!(
                            "incoming message of {} bytes exceeds receive packet of {}",
                            f.payload.len(),
                            packet.frame_capacity()
                        )));
                    }
                    packet.frame_mut()[..f.payload.len()].copy_from_slice(f.payload);
                    packet.set_len(f.payload.len());
                    rx.push_back(BackendEvent {
                        kind: EventKind::RecvDone,
                        peer,
                        length: f.payload.len(),
                        imm: None,
                        context: ctx,
                        local: LocalBuf::Packet(packet),
                    });
                }
                FrameKind::Write => {
                    let (region, offset) = f.ext.unwrap_or((0, 0));
                    match self.shared.regions.write(region, offset, f.payload) {
                        Ok(()) => {
                            if let Some(imm) = f.imm {
                                rx.push_back(BackendEvent {
                                    kind: EventKind::RemoteWriteNotify,
                                    peer,
                                    length: f.payload.len(),
                                    imm: Some(imm),
                                    context: 0,
                                    local: LocalBuf::Empty,
                                });
                            }
                        }
                        Err(e) => replies.push(Reply {
                            peer,
                            kind: FrameKind::Error,
                            imm: None,
                            payload: e.message().as_bytes().to_vec(),
                        }),
                    }
                }
                FrameKind::ReadReq => {
                    let (region, offset) = f.ext.unwrap_or((0, 0));
                    let len = f
                        .payload
                        .get(0..4)
                        .map_or(0, |b| u32::from_le_bytes(b.try_into().unwrap()));
                    let mut data = vec![0u8; len as usize];
                    let reply = match self.shared.regions.read(region, offset, &mut data) {
                        Ok(()) => Reply {
                            peer,
                            kind: FrameKind::ReadResp,
                            imm: f.imm,
                            payload: data,
                        },
                        Err(e) => Reply {
                            peer,
                            kind: FrameKind::Error,
                            imm: f.imm,
                            payload: e.message().as_bytes().to_vec(),
                        },
                    };
                    replies.push(reply);
                }
                FrameKind::ReadResp => {
                    let id = f.imm.unwrap_or(u32::MAX) as usize;
                    let Some(mut op) = reads.try_remove(id) else {
                        return Err(Error::fatal("READ response for an unknown request"));
                    };
                    let dst = op.local.as_mut_slice();
                    if dst.len() != f.payload.len() {
                        return Err(Error::fatal("READ response length mismatch"));
                    }
                    dst.copy_from_slice(f.payload);
                    done.push_back(BackendEvent::completed(op));
                }
                FrameKind::Error => {
                    let msg = format!(
                        "rank {peer} rejected a remote access: {}",
                        String::from_utf8_lossy(f.payload)
                    );
                    *fatal = Some(msg.clone());
                    return Err(Error::fatal(msg));
                }
                FrameKind::Bye => byes[peer.index()] = true,
                FrameKind::Hello => {}
            }
            c.rpos += used;
        }
        Ok(())
    }
}

impl NetDevice for TcpDevice {
    fn index(&self) -> usize {
        self.index as usize
    }

    fn post(&self, mut op: BackendOp) -> Result<Submit> {
        let Some(mut guard) = self.state.try_lock() else {
            return Ok(Submit::Retry(RetryReason::LockBusy, op));
        };
        let st = &mut *guard;
        st.check()?;
        self.mutations.fetch_add(1, Ordering::Relaxed);
        if op.kind == OpKind::Recv {
            let LocalBuf::Packet(packet) = std::mem::take(&mut op.local) else {
                return Err(Error::invalid("RECV needs a packet"));
            };
            st.posted.push_back((packet, op.context));
            return Ok(Submit::Accepted);
        }
        if st.outstanding >= self.depth {
            return Ok(Submit::Retry(RetryReason::SendQueueFull, op));
        }
        let peer = op.peer;
        match op.kind {
            OpKind::Send => {
                let c = self.out_conn(st, peer)?;
                let end = c.push(Frame {
                    kind: FrameKind::Send,
                    imm: op.imm,
                    ext: None,
                    payload: op.local.as_slice(),
                })?;
                c.waiting.push_back((end, BackendEvent::completed(op)));
            }
            OpKind::Write => {
                let token = op
                    .remote
                    .ok_or_else(|| Error::invalid("WRITE without a remote token"))?;
                if token.owner != peer {
                    return Err(Error::invalid("WRITE token belongs to another rank"));
                }
                let c = self.out_conn(st, peer)?;
                let end = c.push(Frame {
                    kind: FrameKind::Write,
                    imm: op.imm,
                    ext: Some((token.region, op.remote_offset)),
                    payload: op.local.as_slice(),
                })?;
                c.waiting.push_back((end, BackendEvent::completed(op)));
            }
            OpKind::Read => {
                let token = op
                    .remote
                    .ok_or_else(|| Error::invalid("READ without a remote token"))?;
                if token.owner != peer {
                    return Err(Error::invalid("READ token belongs to another rank"));
                }
                let len = u32::try_from(op.local.len())
                    .map_err(|_| Error::invalid("READ larger than 4 GiB"))?;
                let offset = op.remote_offset;
                let id = st.reads.insert(op) as u32;
                let c = self.out_conn(st, peer)?;
                c.push(Frame {
                    kind: FrameKind::ReadReq,
                    imm: Some(id),
                    ext: Some((token.region, offset)),
                    payload: &len.to_le_bytes(),
                })?;
            }
            OpKind::Recv => unreachable!(),
        }
        st.outstanding += 1;
        let TcpState { out, done, .. } = st;
        out[peer.index()].as_mut().unwrap().flush(peer, done)?;
        Ok(Submit::Accepted)
    }

    fn poll(&self, max: usize, out: &mut Vec<BackendEvent>) -> Result<Polled> {
        let Some(mut guard) = self.state.try_lock() else {
            return Ok(Polled::Busy);
        };
        let st = &mut *guard;
        self.pump(st)?;
        let mut n = 0;
        while n < max {
            let Some(ev) = st.done.pop_front() else { break };
            st.outstanding -= 1;
            out.push(ev);
            n += 1;
        }
        while n < max {
            let Some(ev) = st.rx.pop_front() else { break };
            out.push(ev);
            n += 1;
        }
        if n > 0 {
            self.mutations.fetch_add(1, Ordering::Relaxed);
        }
        Ok(Polled::Events(n))
    }

    fn drain_posted(&self) -> Vec<Packet> {
        let mut st = self.state.lock();
        let mut v: Vec<Packet> = st.posted.drain(..).map(|(p, _)| p).collect();
        let rx = std::mem::take(&mut st.rx);
        for ev in rx {
            match ev.local {
                LocalBuf::Packet(p) => v.push(p),
                _ => st.rx.push_back(ev),
            }
        }
        v
    }

    fn in_flight(&self) -> usize {
        self.state.lock().outstanding
    }

    fn stalled(&self) -> usize {
        let st = self.state.lock();
        st.inbound
            .iter()
            .filter(|c| matches!(frame::decode(c.unread()), Ok(Some((f, _))) if f.kind == FrameKind::Send))
            .count()
    }

    fn mutations(&self) -> u64 {
        self.mutations.load(Ordering::Relaxed)
    }

    fn stall_watermark(&self) -> usize {
        self.watermark.load(Ordering::Relaxed)
    }
}

fn bootstrap_hosts(cfg: &TcpConfig, hosts: &[String]) -> Result<(TcpListener, Vec<SocketAddr>)> {
    if hosts.len() != cfg.world as usize {
        return Err(Error::fatal(format!(
            "host list has {} entries for a world of {}",
            hosts.len(),
            cfg.world
        )));
    }
    let addrs = hosts
        .iter()
        .map(|h| {
            h.to_socket_addrs()
                .ok()
                .and_then(|mut a| a.next())
                .ok_or_else(|| Error::fatal(format!("cannot resolve {h}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let listener = TcpListener::bind(addrs[cfg.rank as usize])?;
    Ok((listener, addrs))
}

fn bootstrap_file(cfg: &TcpConfig, path: &PathBuf) -> Result<(TcpListener, Vec<SocketAddr>)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let me = listener.local_addr()?;
    {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        // One write per line keeps concurrent appends whole.
        f.write_all(format!("{} {} {}\n", cfg.rank, cfg.world, me).as_bytes())?;
    }
    let deadline = Instant::now() + cfg.timeout;
    loop {
        let text = std::fs::read_to_string(path)?;
        let mut addrs: Vec<Option<SocketAddr>> = vec![None; cfg.world as usize];
        for line in text.lines() {
            let mut it = line.split_whitespace();
            let (Some(r), Some(w), Some(a)) = (it.next(), it.next(), it.next()) else {
                continue;
            };
            let (Ok(r), Ok(w), Ok(a)) =
                (r.parse::<u32>(), w.parse::<u32>(), a.parse::<SocketAddr>())
            else {
                return Err(Error::fatal(format!("malformed rendezvous line: {line}")));
            };
            if w != cfg.world {
                return Err(Error::fatal(format!(
                    "rank {r} was launched with world {w}, this rank with world {}",
                    cfg.world
                )));
            }
            if r < cfg.world {
                addrs[r as usize] = Some(a);
            }
        }
        if addrs.iter().all(Option::is_some) {
            return Ok((listener, addrs.into_iter().map(Option::unwrap).collect()));
        }
        if Instant::now() >= deadline {
            return Err(Error::fatal(
                "timed out waiting for peers in the rendezvous file",
            ));
        }
        std::thread::sleep(Duration::from_millis(5));
    }
}
