use std::sync::atomic::Ordering;

use super::{
    ctx, ctx_id, ctx_kind, Device, Runtime, CTX_INLINE, CTX_OP, CTX_PACKET, CTX_RNDV, RNDV_IMM_FLAG,
};
use crate::backend::{BackendEvent, BackendOp, EventKind, LocalBuf, MemoryToken, Polled, Submit};
use crate::backlog::Submitted;
use crate::completion::{in_handler, Comp};
use crate::error::{Error, Result};
use crate::matching::{make_key, EntryKind};
use crate::packet::{MsgKind, Packet, PacketHeader, PacketPool, HEADER_SIZE};
use crate::registry::RcompId;
use crate::types::{Rank, Status, Tag};

pub(crate) struct RecvEntry {
    pub buf: Vec<u8>,
    pub comp: Comp,
    pub user_context: u64,
}

/// What a matching engine stores while waiting for the other side.
pub(crate) enum MatchEntry {
    Eager {
        src: Rank,
        tag: Tag,
        packet: Packet,
    },
    /// A rendezvous announcement. `device` is where the CTS goes out.
    Rts {
        src: Rank,
        tag: Tag,
        size: usize,
        source: u64,
        device: Device,
    },
    Recv(RecvEntry),
}

/// Rendezvous state, one slab entry per side of a transfer.
pub(crate) enum Transfer {
    Source {
        buf: Option<Vec<u8>>,
        comp: Comp,
        rank: Rank,
        tag: Tag,
        user_context: u64,
        target: u32,
    },
    Target {
        token: MemoryToken,
        comp: Comp,
        rank: Rank,
        tag: Tag,
        size: usize,
        user_context: u64,
        notified: bool,
        fin: bool,
    },
}

/// Work parked on a device backlog until resources free up.
pub(crate) enum Pending {
    /// A backend op; `then` is signaled once it is accepted.
    Op {
        op: BackendOp,
        then: Option<(Comp, Status)>,
    },
    /// An eager send still waiting for a packet.
    Eager {
        peer: Rank,
        header: PacketHeader,
        buf: Vec<u8>,
        pool: PacketPool,
        comp: Comp,
        user_context: u64,
    },
    /// A completion that found its queue full.
    Signal { comp: Comp, status: Status },
}

impl Pending {
    pub fn into_packet(self) -> Option<Packet> {
        match self {
            Pending::Op { op, .. } => op.local.into_packet(),
            _ => None,
        }
    }
}

fn payload_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

impl Runtime {
    /// One progress pass over the default device.
    pub fn progress(&self) -> Result<usize> {
        let dev = self.inner.default_device.clone();
        self.progress_device(&dev)
    }

    /// One progress pass: flush the backlog, poll a batch of backend
    /// events, run the protocol for each and top up pre-posted receives.
    /// Returns the number of backlog items submitted plus events handled,
    /// so an idle device returns 0.
    ///
    /// Must not be called from a completion handler.
    pub fn progress_device(&self, dev: &Device) -> Result<usize> {
        self.check_device(dev)?;
        debug_assert!(!in_handler(), "progress called from a completion handler");
        self.progress_pass(dev)
    }

    pub(crate) fn progress_pass(&self, dev: &Device) -> Result<usize> {
        let d = &dev.inner;
        let mut n = d.backlog.flush(|item| self.submit_pending(dev, item))?;
        let mut events = Vec::with_capacity(self.inner.config.progress_batch);
        if let Polled::Events(k) = d.net.poll(self.inner.config.progress_batch, &mut events)? {
            n += k;
        }
        for ev in events {
            self.handle_event(dev, ev)?;
        }
        self.replenish(dev)?;
        Ok(n)
    }

    /// Signal `comp`, parking the status on the backlog if a queue is full.
    pub(crate) fn deliver(&self, dev: &Device, comp: &Comp, status: Status) {
        if let Err(status) = comp.signal(status) {
            dev.inner.backlog.push(Pending::Signal {
                comp: comp.clone(),
                status,
            });
        }
    }

    fn submit_pending(&self, dev: &Device, item: Pending) -> Result<Submitted<Pending>> {
        let d = &dev.inner;
        match item {
            Pending::Op { op, then } => match d.net.post(op)? {
                Submit::Accepted => {
                    if let Some((comp, status)) = then {
                        self.deliver(dev, &comp, status);
                    }
                    Ok(Submitted::Accepted)
                }
                Submit::Retry(_, op) => Ok(Submitted::Again(Pending::Op { op, then })),
            },
            Pending::Eager {
                peer,
                header,
                buf,
                pool,
                comp,
                user_context,
            } => {
                let Some(mut p) = pool.get() else {
                    return Ok(Submitted::Again(Pending::Eager {
                        peer,
                        header,
                        buf,
                        pool,
                        comp,
                        user_context,
                    }));
                };
                p.fill(&header, &buf);
                match d.net.post(BackendOp::send(
                    peer,
                    LocalBuf::Packet(p),
                    ctx(CTX_PACKET, 0),
                ))? {
                    Submit::Accepted => {
                        self.inner.stats.eager.fetch_add(1, Ordering::Relaxed);
                        let size = buf.len();
                        self.deliver(
                            dev,
                            &comp,
                            Status::done(peer, header.tag, Some(buf), size, user_context),
                        );
                        Ok(Submitted::Accepted)
                    }
                    Submit::Retry(_, op) => {
                        if let Some(p) = op.local.into_packet() {
                            pool.put(p);
                        }
                        Ok(Submitted::Again(Pending::Eager {
                            peer,
                            header,
                            buf,
                            pool,
                            comp,
                            user_context,
                        }))
                    }
                }
            }
            Pending::Signal { comp, status } => match comp.signal(status) {
                Ok(()) => Ok(Submitted::Accepted),
                Err(status) => Ok(Submitted::Again(Pending::Signal { comp, status })),
            },
        }
    }

    /// Post a runtime-internal op, queueing behind earlier backlog items.
    fn submit_internal(&self, dev: &Device, op: BackendOp) -> Result<()> {
        let d = &dev.inner;
        if !d.backlog.is_empty() {
            d.backlog.push(Pending::Op { op, then: None });
            return Ok(());
        }
        if let Submit::Retry(_, op) = d.net.post(op)? {
            d.backlog.push(Pending::Op { op, then: None });
        }
        Ok(())
    }

    fn send_control(&self, dev: &Device, peer: Rank, bytes: Vec<u8>) -> Result<()> {
        self.submit_internal(
            dev,
            BackendOp::send(peer, LocalBuf::Bytes(bytes), ctx(CTX_INLINE, 0)),
        )
    }

    pub(crate) fn complete_eager(
        &self,
        mut buf: Vec<u8>,
        src: Rank,
        tag: Tag,
        packet: &Packet,
        user_context: u64,
    ) -> Status {
        let payload = packet.payload();
        buf.clear();
        buf.extend_from_slice(payload);
        let n = buf.len();
        Status::done(src, tag, Some(buf), n, user_context)
    }

    /// Target side of a matched rendezvous: expose the receive buffer and
    /// answer with CTS.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn start_target(
        &self,
        dev: &Device,
        src: Rank,
        tag: Tag,
        size: usize,
        source: u64,
        comp: Comp,
        mut buf: Vec<u8>,
        user_context: u64,
    ) -> Result<()> {
        buf.resize(size, 0);
        let token = self.inner.transport.regions().register(buf)?;
        let tid = self.inner.xfers.lock().insert(Transfer::Target {
            token,
            comp,
            rank: src,
            tag,
            size,
            user_context,
            notified: false,
            fin: false,
        });
        if tid as u64 >= RNDV_IMM_FLAG as u64 {
            return Err(Error::fatal("too many rendezvous transfers in flight"));
        }
        let mut h = PacketHeader::new(MsgKind::Cts, self.rank_me(), tag);
        h.protocol_context = source;
        h.payload_size = (MemoryToken::ENCODED_LEN + 8) as u64;
        let mut bytes = vec![0u8; HEADER_SIZE];
        h.encode(&mut bytes);
        bytes.extend_from_slice(&token.to_bytes());
        bytes.extend_from_slice(&(tid as u64).to_le_bytes());
        self.send_control(dev, src, bytes)?;
        self.inner.stats.cts.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn handle_event(&self, dev: &Device, ev: BackendEvent) -> Result<()> {
        match ev.kind {
            EventKind::SendDone => {
                if ctx_kind(ev.context) == CTX_PACKET {
                    if let LocalBuf::Packet(p) = ev.local {
                        self.return_packet(p);
                    }
                }
                Ok(())
            }
            EventKind::RecvDone => {
                dev.inner.preposted.fetch_sub(1, Ordering::AcqRel);
                match ev.local {
                    LocalBuf::Packet(p) => self.handle_packet(dev, p),
                    _ => Err(Error::fatal("receive completed without a packet")),
                }
            }
            EventKind::WriteDone if ctx_kind(ev.context) == CTX_RNDV => {
                self.source_written(dev, ctx_id(ev.context), ev.local.into_bytes())
            }
            EventKind::WriteDone | EventKind::ReadDone => {
                if ctx_kind(ev.context) != CTX_OP {
                    return Err(Error::fatal("one-sided completion with an unknown context"));
                }
                let rec = self
                    .inner
                    .ops
                    .lock()
                    .try_remove(ctx_id(ev.context))
                    .ok_or_else(|| Error::fatal("completion for an unknown operation"))?;
                let buf = ev.local.into_bytes();
                let size = buf.as_ref().map_or(ev.length, Vec::len);
                self.deliver(
                    dev,
                    &rec.comp,
                    Status::done(rec.rank, rec.tag, buf, size, rec.user_context),
                );
                Ok(())
            }
            EventKind::RemoteWriteNotify => {
                let imm = ev
                    .imm
                    .ok_or_else(|| Error::fatal("write notification without immediate"))?;
                if imm & RNDV_IMM_FLAG != 0 {
                    return self.target_event(
                        dev,
                        (imm & !RNDV_IMM_FLAG) as usize,
                        |notified, _| *notified = true,
                    );
                }
                let comp = self.lookup_rcomp(RcompId(imm))?;
                self.deliver(
                    dev,
                    &comp,
                    Status::done(ev.peer, Tag(0), None, ev.length, 0),
                );
                Ok(())
            }
        }
    }

    fn handle_packet(&self, dev: &Device, p: Packet) -> Result<()> {
        let Some(h) = p.header() else {
            self.return_packet(p);
            return Err(Error::fatal("malformed packet header"));
        };
        match h.msg_kind {
            MsgKind::EagerSend => {
                let engine = match self.inner.engines.get(h.engine as usize) {
                    Some(e) => e.clone(),
                    None => {
                        self.return_packet(p);
                        return Err(Error::fatal(format!(
                            "message for unknown matching engine {}",
                            h.engine
                        )));
                    }
                };
                let key = make_key(h.src_rank, h.tag, h.policy);
                let entry = MatchEntry::Eager {
                    src: h.src_rank,
                    tag: h.tag,
                    packet: p,
                };
                if let Some((MatchEntry::Eager { packet, .. }, MatchEntry::Recv(r))) = engine
                    .inner
                    .engine
                    .insert_or_match(key, EntryKind::Send, entry)
                {
                    let done =
                        self.complete_eager(r.buf, h.src_rank, h.tag, &packet, r.user_context);
                    self.return_packet(packet);
                    self.deliver(dev, &r.comp, done);
                }
                Ok(())
            }
            MsgKind::ActiveMessage => {
                let data = p.payload().to_vec();
                self.return_packet(p);
                let comp = self.lookup_rcomp(RcompId(h.rcomp.unwrap_or(u32::MAX)))?;
                let n = data.len();
                self.deliver(
                    dev,
                    &comp,
                    Status::done(h.src_rank, h.tag, Some(data), n, 0),
                );
                Ok(())
            }
            MsgKind::Rts => {
                self.return_packet(p);
                let size = h.payload_size as usize;
                if let Some(rc) = h.rcomp {
                    let comp = self.lookup_rcomp(RcompId(rc))?;
                    return self.start_target(
                        dev,
                        h.src_rank,
                        h.tag,
                        size,
                        h.protocol_context,
                        comp,
                        Vec::new(),
                        0,
                    );
                }
                let engine = self
                    .inner
                    .engines
                    .get(h.engine as usize)
                    .cloned()
                    .ok_or_else(|| {
                        Error::fatal(format!("message for unknown matching engine {}", h.engine))
                    })?;
                let key = make_key(h.src_rank, h.tag, h.policy);
                let entry = MatchEntry::Rts {
                    src: h.src_rank,
                    tag: h.tag,
                    size,
                    source: h.protocol_context,
                    device: dev.clone(),
                };
                if let Some((_, MatchEntry::Recv(r))) =
                    engine
                        .inner
                        .engine
                        .insert_or_match(key, EntryKind::Send, entry)
                {
                    self.start_target(
                        dev,
                        h.src_rank,
                        h.tag,
                        size,
                        h.protocol_context,
                        r.comp,
                        r.buf,
                        r.user_context,
                    )?;
                }
                Ok(())
            }
            MsgKind::Cts => {
                let payload = p.payload();
                let parsed = (payload.len() >= MemoryToken::ENCODED_LEN + 8)
                    .then(|| MemoryToken::from_bytes(&payload[..MemoryToken::ENCODED_LEN]))
                    .flatten()
                    .map(|t| (t, payload_u64(payload, MemoryToken::ENCODED_LEN)));
                self.return_packet(p);
                let (token, tid) = parsed.ok_or_else(|| Error::fatal("malformed CTS"))?;
                self.source_ready(
                    dev,
                    h.src_rank,
                    h.protocol_context as usize,
                    token,
                    tid as u32,
                )
            }
            MsgKind::Fin => {
                self.return_packet(p);
                self.target_event(dev, h.protocol_context as usize, |_, fin| *fin = true)
            }
        }
    }

    /// CTS arrived: move the data.
    fn source_ready(
        &self,
        dev: &Device,
        peer: Rank,
        id: usize,
        token: MemoryToken,
        tid: u32,
    ) -> Result<()> {
        let buf = match self.inner.xfers.lock().get_mut(id) {
            Some(Transfer::Source {
                buf, target, rank, ..
            }) if *rank == peer => {
                *target = tid;
                buf.take()
            }
            _ => None,
        };
        let buf = buf.ok_or_else(|| Error::fatal("CTS for an unknown transfer"))?;
        let op = BackendOp::write(
            peer,
            buf,
            token,
            0,
            Some(RNDV_IMM_FLAG | tid),
            ctx(CTX_RNDV, id),
        );
        self.submit_internal(dev, op)?;
        self.inner
            .stats
            .rendezvous_writes
            .fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// The rendezvous WRITE completed locally: tell the target and finish.
    fn source_written(&self, dev: &Device, id: usize, buf: Option<Vec<u8>>) -> Result<()> {
        let Some(Transfer::Source {
            comp,
            rank,
            tag,
            user_context,
            target,
            ..
        }) = self.inner.xfers.lock().try_remove(id)
        else {
            return Err(Error::fatal("write completion for an unknown transfer"));
        };
        let mut h = PacketHeader::new(MsgKind::Fin, self.rank_me(), tag);
        h.protocol_context = target as u64;
        let mut bytes = vec![0u8; HEADER_SIZE];
        h.encode(&mut bytes);
        self.send_control(dev, rank, bytes)?;
        self.inner.stats.fin.fetch_add(1, Ordering::Relaxed);
        let size = buf.as_ref().map_or(0, Vec::len);
        self.deliver(dev, &comp, Status::done(rank, tag, buf, size, user_context));
        Ok(())
    }

    /// Record a notify or FIN for a target transfer; completes it once
    /// both have arrived.
    fn target_event(
        &self,
        dev: &Device,
        tid: usize,
        mark: impl FnOnce(&mut bool, &mut bool),
    ) -> Result<()> {
        let done = {
            let mut xfers = self.inner.xfers.lock();
            match xfers.get_mut(tid) {
                Some(Transfer::Target { notified, fin, .. }) => {
                    mark(notified, fin);
                    *notified && *fin
                }
                _ => return Err(Error::fatal("rendezvous event for an unknown transfer")),
            }
            .then(|| xfers.remove(tid))
        };
        if let Some(Transfer::Target {
            token,
            comp,
            rank,
            tag,
            size,
            user_context,
            ..
        }) = done
        {
            let buf = self.inner.transport.regions().deregister(token)?;
            self.deliver(
                dev,
                &comp,
                Status::done(rank, tag, Some(buf), size, user_context),
            );
        }
        Ok(())
    }
}
