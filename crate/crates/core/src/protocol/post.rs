use std::sync::atomic::Ordering;

use super::progress::{MatchEntry, Pending, RecvEntry, Transfer};
use super::{ctx, Device, OpRecord, Runtime, CTX_INLINE, CTX_OP, CTX_PACKET, RNDV_IMM_FLAG};
use crate::backend::{BackendOp, LocalBuf, Submit};
use crate::completion::Comp;
use crate::error::{Error, Result};
use crate::matching::{make_key, EntryKind};
use crate::packet::{MsgKind, PacketHeader, PacketPool, HEADER_SIZE};
use crate::registry::RcompId;
use crate::types::{
    Direction, MatchingPolicy, Paradigm, PostOptions, Rank, RemoteBuffer, RetryReason, Status, Tag,
};
use crate::MatchingEngineHandle;

/// A posting operation under construction. Nothing happens until
/// [`call`](Post::call).
#[must_use = "a post does nothing until `call` is invoked"]
pub struct Post<'a> {
    rt: &'a Runtime,
    rank: Rank,
    buf: Vec<u8>,
    comp: Comp,
    opts: PostOptions,
}

impl<'a> Post<'a> {
    pub fn tag(mut self, tag: impl Into<Tag>) -> Self {
        self.opts.tag = tag.into();
        self
    }

    pub fn device(mut self, dev: &Device) -> Self {
        self.opts.device = Some(dev.clone());
        self
    }

    pub fn matching_engine(mut self, engine: &MatchingEngineHandle) -> Self {
        self.opts.matching_engine = Some(engine.clone());
        self
    }

    pub fn packet_pool(mut self, pool: &PacketPool) -> Self {
        self.opts.packet_pool = Some(pool.clone());
        self
    }

    pub fn matching_policy(mut self, policy: MatchingPolicy) -> Self {
        self.opts.matching_policy = policy;
        self
    }

    pub fn remote_buffer(mut self, rb: RemoteBuffer) -> Self {
        self.opts.remote_buffer = Some(rb);
        self
    }

    pub fn remote_comp(mut self, id: RcompId) -> Self {
        self.opts.remote_comp = Some(id);
        self
    }

    pub fn allow_done(mut self, yes: bool) -> Self {
        self.opts.allow_done = yes;
        self
    }

    pub fn allow_retry(mut self, yes: bool) -> Self {
        self.opts.allow_retry = yes;
        self
    }

    pub fn user_context(mut self, ctx: u64) -> Self {
        self.opts.user_context = ctx;
        self
    }

    /// Replace all options at once; unset handles still take defaults.
    pub fn options(mut self, opts: PostOptions) -> Self {
        self.opts = opts;
        self
    }

    pub fn call(self) -> Result<Status> {
        let Post {
            rt,
            rank,
            buf,
            comp,
            opts,
        } = self;
        let opts = opts.resolve(rt.defaults())?;
        let paradigm = opts.paradigm()?;
        let dev = opts.device.clone().expect("resolved");
        rt.check_device(&dev)?;
        let engine = opts.matching_engine.as_ref().expect("resolved");
        if rt.inner.engines.get(engine.index() as usize) != Some(engine) {
            return Err(Error::invalid("matching engine belongs to another runtime"));
        }
        let pool = opts.packet_pool.as_ref().expect("resolved");
        if !rt.inner.pools.iter().any(|p| p == pool) {
            return Err(Error::invalid("packet pool belongs to another runtime"));
        }
        if rank.0 >= rt.rank_n() {
            return Err(Error::invalid(format!(
                "rank {rank} outside a world of {}",
                rt.rank_n()
            )));
        }
        match paradigm {
            Paradigm::Send => rt.post_out(&dev, rank, buf, comp, &opts, None),
            Paradigm::ActiveMessage => {
                let id = opts.remote_comp.expect("classified").0;
                rt.post_out(&dev, rank, buf, comp, &opts, Some(id))
            }
            Paradigm::Put | Paradigm::PutWithSignal => rt.start_put(&dev, rank, buf, comp, &opts),
            Paradigm::Recv => rt.post_recv_entry(rank, buf, comp, &opts),
            Paradigm::Get => rt.start_get(&dev, rank, buf, comp, &opts),
            Paradigm::GetWithSignal => Err(Error::invalid(
                "get with a remote completion is not supported by this runtime",
            )),
        }
    }
}

impl Runtime {
    /// The general posting operation; the paradigm follows from the
    /// direction and from whether a remote buffer or remote completion is
    /// set.
    pub fn post_comm(
        &self,
        direction: Direction,
        rank: Rank,
        buf: Vec<u8>,
        comp: &Comp,
    ) -> Post<'_> {
        Post {
            rt: self,
            rank,
            buf,
            comp: comp.clone(),
            opts: PostOptions::new(direction),
        }
    }

    pub fn post_send(&self, rank: Rank, buf: Vec<u8>, comp: &Comp) -> Post<'_> {
        self.post_comm(Direction::Out, rank, buf, comp)
    }

    pub fn post_recv(&self, rank: Rank, buf: Vec<u8>, comp: &Comp) -> Post<'_> {
        self.post_comm(Direction::In, rank, buf, comp)
    }

    /// Active message: the payload lands in a runtime-allocated buffer
    /// handed to `rcomp` on the target.
    pub fn post_am(&self, rank: Rank, buf: Vec<u8>, comp: &Comp, rcomp: RcompId) -> Post<'_> {
        self.post_comm(Direction::Out, rank, buf, comp)
            .remote_comp(rcomp)
    }

    pub fn post_put(&self, rank: Rank, buf: Vec<u8>, comp: &Comp, rb: RemoteBuffer) -> Post<'_> {
        self.post_comm(Direction::Out, rank, buf, comp)
            .remote_buffer(rb)
    }

    /// Read `buf.len()` bytes from the remote buffer into `buf`.
    pub fn post_get(&self, rank: Rank, buf: Vec<u8>, comp: &Comp, rb: RemoteBuffer) -> Post<'_> {
        self.post_comm(Direction::In, rank, buf, comp)
            .remote_buffer(rb)
    }

    /// A completed status either goes back to the caller or, when DONE is
    /// not allowed, to the completion object.
    fn finish(&self, dev: &Device, comp: &Comp, opts: &PostOptions, done: Status) -> Status {
        if opts.allow_done {
            done
        } else {
            self.deliver(dev, comp, done);
            Status::posted()
        }
    }

    /// Submit `op` whose completion counts as `done` for the caller.
    fn submit_user_op(
        &self,
        dev: &Device,
        op: BackendOp,
        comp: Comp,
        opts: &PostOptions,
        done: Status,
    ) -> Result<Status> {
        let d = &dev.inner;
        if !opts.allow_retry && !d.backlog.is_empty() {
            d.backlog.push(Pending::Op {
                op,
                then: Some((comp, done)),
            });
            return Ok(Status::posted());
        }
        match d.net.post(op)? {
            Submit::Accepted => Ok(self.finish(dev, &comp, opts, done)),
            Submit::Retry(reason, op) if opts.allow_retry => {
                if let LocalBuf::Packet(p) = op.local {
                    self.return_packet(p);
                }
                Ok(Status::retry(reason, done.buffer))
            }
            Submit::Retry(_, op) => {
                d.backlog.push(Pending::Op {
                    op,
                    then: Some((comp, done)),
                });
                Ok(Status::posted())
            }
        }
    }

    fn post_out(
        &self,
        dev: &Device,
        peer: Rank,
        buf: Vec<u8>,
        comp: Comp,
        opts: &PostOptions,
        rcomp: Option<u32>,
    ) -> Result<Status> {
        let cfg = &self.inner.config;
        let size = buf.len();
        let kind = if rcomp.is_some() {
            MsgKind::ActiveMessage
        } else {
            MsgKind::EagerSend
        };
        let mut h = PacketHeader::new(kind, self.rank_me(), opts.tag);
        h.policy = opts.matching_policy;
        h.engine = opts.matching_engine.as_ref().expect("resolved").index();
        h.rcomp = rcomp;
        h.payload_size = size as u64;

        if size <= cfg.max_inject_size {
            let mut bytes = vec![0u8; HEADER_SIZE + size];
            h.encode(&mut bytes[..HEADER_SIZE]);
            bytes[HEADER_SIZE..].copy_from_slice(&buf);
            let done = Status::done(peer, opts.tag, Some(buf), size, opts.user_context);
            let op = BackendOp::send(peer, LocalBuf::Bytes(bytes), ctx(CTX_INLINE, 0));
            let st = self.submit_user_op(dev, op, comp, opts, done)?;
            if !st.is_retry() {
                self.inner.stats.inject.fetch_add(1, Ordering::Relaxed);
            }
            return Ok(st);
        }

        let pool = opts.packet_pool.as_ref().expect("resolved");
        if size <= cfg.eager_threshold.min(pool.payload_capacity()) {
            let parked = |buf: Vec<u8>| Pending::Eager {
                peer,
                header: h,
                buf,
                pool: pool.clone(),
                comp: comp.clone(),
                user_context: opts.user_context,
            };
            if !opts.allow_retry && !dev.inner.backlog.is_empty() {
                dev.inner.backlog.push(parked(buf));
                return Ok(Status::posted());
            }
            let Some(mut p) = pool.get() else {
                if opts.allow_retry {
                    return Ok(Status::retry(RetryReason::PacketPoolEmpty, Some(buf)));
                }
                dev.inner.backlog.push(parked(buf));
                return Ok(Status::posted());
            };
            p.fill(&h, &buf);
            let done = Status::done(peer, opts.tag, Some(buf), size, opts.user_context);
            let op = BackendOp::send(peer, LocalBuf::Packet(p), ctx(CTX_PACKET, 0));
            let st = self.submit_user_op(dev, op, comp, opts, done)?;
            if !st.is_retry() {
                self.inner.stats.eager.fetch_add(1, Ordering::Relaxed);
            }
            return Ok(st);
        }

        // Rendezvous: announce with RTS, the data follows as a WRITE once
        // the target answers with CTS.
        let id = self.inner.xfers.lock().insert(Transfer::Source {
            buf: Some(buf),
            comp,
            rank: peer,
            tag: opts.tag,
            user_context: opts.user_context,
            target: 0,
        });
        h.msg_kind = MsgKind::Rts;
        h.protocol_context = id as u64;
        let mut bytes = vec![0u8; HEADER_SIZE];
        h.encode(&mut bytes);
        let op = BackendOp::send(peer, LocalBuf::Bytes(bytes), ctx(CTX_INLINE, 0));
        let d = &dev.inner;
        if !opts.allow_retry && !d.backlog.is_empty() {
            d.backlog.push(Pending::Op { op, then: None });
            self.inner.stats.rts.fetch_add(1, Ordering::Relaxed);
            return Ok(Status::posted());
        }
        match d.net.post(op)? {
            Submit::Accepted => {}
            Submit::Retry(reason, _) if opts.allow_retry => {
                let buf = match self.inner.xfers.lock().remove(id) {
                    Transfer::Source { buf, .. } => buf,
                    Transfer::Target { .. } => unreachable!("source id"),
                };
                return Ok(Status::retry(reason, buf));
            }
            Submit::Retry(_, op) => d.backlog.push(Pending::Op { op, then: None }),
        }
        self.inner.stats.rts.fetch_add(1, Ordering::Relaxed);
        Ok(Status::posted())
    }

    fn post_recv_entry(
        &self,
        src: Rank,
        buf: Vec<u8>,
        comp: Comp,
        opts: &PostOptions,
    ) -> Result<Status> {
        let engine = opts.matching_engine.as_ref().expect("resolved");
        let key = make_key(src, opts.tag, opts.matching_policy);
        let entry = MatchEntry::Recv(RecvEntry {
            buf,
            comp: comp.clone(),
            user_context: opts.user_context,
        });
        let Some((MatchEntry::Recv(recv), matched)) =
            engine
                .inner
                .engine
                .insert_or_match(key, EntryKind::Recv, entry)
        else {
            return Ok(Status::posted());
        };
        match matched {
            MatchEntry::Eager { src, tag, packet } => {
                let done = self.complete_eager(recv.buf, src, tag, &packet, recv.user_context);
                self.return_packet(packet);
                let dev = opts.device.as_ref().expect("resolved");
                Ok(self.finish(dev, &comp, opts, done))
            }
            MatchEntry::Rts {
                src,
                tag,
                size,
                source,
                device,
            } => {
                self.start_target(
                    &device,
                    src,
                    tag,
                    size,
                    source,
                    recv.comp,
                    recv.buf,
                    recv.user_context,
                )?;
                Ok(Status::posted())
            }
            MatchEntry::Recv(_) => unreachable!("receives only match sends"),
        }
    }

    fn start_put(
        &self,
        dev: &Device,
        peer: Rank,
        buf: Vec<u8>,
        comp: Comp,
        opts: &PostOptions,
    ) -> Result<Status> {
        let rb = opts.remote_buffer.expect("classified");
        if rb.token.owner != peer {
            return Err(Error::invalid(
                "remote buffer is not owned by the target rank",
            ));
        }
        let imm = opts.remote_comp.map(|id| id.0);
        if imm.is_some_and(|v| v >= RNDV_IMM_FLAG) {
            return Err(Error::invalid("remote completion id out of range"));
        }
        let id = self.inner.ops.lock().insert(OpRecord {
            comp: comp.clone(),
            rank: peer,
            tag: opts.tag,
            user_context: opts.user_context,
        });
        let op = BackendOp::write(peer, buf, rb.token, rb.offset, imm, ctx(CTX_OP, id));
        self.submit_tracked(dev, op, id, opts)
    }

    fn start_get(
        &self,
        dev: &Device,
        peer: Rank,
        buf: Vec<u8>,
        comp: Comp,
        opts: &PostOptions,
    ) -> Result<Status> {
        let rb = opts.remote_buffer.expect("classified");
        if rb.token.owner != peer {
            return Err(Error::invalid(
                "remote buffer is not owned by the target rank",
            ));
        }
        let id = self.inner.ops.lock().insert(OpRecord {
            comp: comp.clone(),
            rank: peer,
            tag: opts.tag,
            user_context: opts.user_context,
        });
        let op = BackendOp::read(peer, buf, rb.token, rb.offset, ctx(CTX_OP, id));
        self.submit_tracked(dev, op, id, opts)
    }

    /// Submit a one-sided op whose completion arrives as a backend event.
    fn submit_tracked(
        &self,
        dev: &Device,
        op: BackendOp,
        id: usize,
        opts: &PostOptions,
    ) -> Result<Status> {
        let d = &dev.inner;
        if !opts.allow_retry && !d.backlog.is_empty() {
            d.backlog.push(Pending::Op { op, then: None });
            return Ok(Status::posted());
        }
        let res = d.net.post(op);
        match res {
            Ok(Submit::Accepted) => Ok(Status::posted()),
            Ok(Submit::Retry(reason, op)) if opts.allow_retry => {
                self.inner.ops.lock().remove(id);
                Ok(Status::retry(reason, op.local.into_bytes()))
            }
            Ok(Submit::Retry(_, op)) => {
                d.backlog.push(Pending::Op { op, then: None });
                Ok(Status::posted())
            }
            Err(e) => {
                self.inner.ops.lock().remove(id);
                Err(e)
            }
        }
    }
}
