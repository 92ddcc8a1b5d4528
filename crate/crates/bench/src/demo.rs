//! An RPC library backend built on active messages: the source handler
//! frees each message buffer, the target pops arrivals from a completion
//! queue. Every buffer carries an id so frees and arrivals can be audited.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use lcr::{Comp, Device, RcompId, Runtime, Status};

use crate::world::{fill_pattern, pattern};
use crate::BenchError;

/// Payload sizes cycled through, covering inject, eager and rendezvous.
pub const RPC_SIZES: [usize; 4] = [16, 64, 1000, 9000];

#[derive(Debug, Default)]
pub struct Audit {
    freed: Mutex<HashSet<u64>>,
    double_frees: AtomicU64,
    received: Mutex<HashSet<u64>>,
    duplicates: AtomicU64,
    corrupt: AtomicU64,
    sent: AtomicU64,
}

impl Audit {
    fn free(&self, buf: Vec<u8>) {
        let id = msg_id(&buf);
        if !self.freed.lock().unwrap().insert(id) {
            self.double_frees.fetch_add(1, Ordering::Relaxed);
        }
        drop(buf);
    }

    pub fn freed(&self) -> u64 {
        self.freed.lock().unwrap().len() as u64
    }

    pub fn received(&self) -> u64 {
        self.received.lock().unwrap().len() as u64
    }

    pub fn summary(&self) -> DemoSummary {
        DemoSummary {
            sent: self.sent.load(Ordering::Relaxed),
            freed: self.freed(),
            double_frees: self.double_frees.load(Ordering::Relaxed),
            received: self.received(),
            duplicates: self.duplicates.load(Ordering::Relaxed),
            corrupt: self.corrupt.load(Ordering::Relaxed),
        }
    }
}

fn msg_id(buf: &[u8]) -> u64 {
    u64::from_le_bytes(buf[..8].try_into().expect("message carries an id"))
}

/// A message as the upper layer sees it.
#[derive(Debug)]
pub struct Msg {
    pub rank: lcr::Rank,
    pub tag: lcr::Tag,
    pub buf: Vec<u8>,
    pub size: usize,
}

/// Global backend state.
pub struct RpcBackend {
    rt: Runtime,
    shandler: Comp,
    rcq: Comp,
    rcomp: RcompId,
    pub audit: Arc<Audit>,
}

/// Per-thread backend state.
pub struct ThreadCtx {
    device: Device,
}

impl RpcBackend {
    pub fn global_init(rt: Runtime) -> lcr::Result<RpcBackend> {
        let audit = Arc::new(Audit::default());
        let a = audit.clone();
        let shandler = rt.alloc_handler(move |st: Status| {
            if let Some(buf) = st.buffer {
                a.free(buf);
            }
        });
        let rcq = rt.alloc_cq();
        let rcomp = rt.register_rcomp(rcq.clone())?;
        Ok(RpcBackend {
            rt,
            shandler,
            rcq,
            rcomp,
            audit,
        })
    }

    pub fn rank_me(&self) -> u32 {
        self.rt.rank_me().0
    }

    pub fn rank_n(&self) -> u32 {
        self.rt.rank_n()
    }

    pub fn global_fina(self) -> lcr::Result<()> {
        self.rt.fina()
    }

    pub fn thread_init(&self) -> lcr::Result<ThreadCtx> {
        Ok(ThreadCtx {
            device: self.rt.alloc_device()?,
        })
    }

    pub fn thread_fina(&self, ctx: ThreadCtx) -> lcr::Result<()> {
        self.rt.free_device(&ctx.device)
    }

    /// `Ok(Err(buf))` is a temporary failure: the caller gets `buf` back
    /// and tries again later.
    pub fn send_msg(
        &self,
        ctx: &ThreadCtx,
        rank: u32,
        buf: Vec<u8>,
        tag: u32,
    ) -> lcr::Result<Result<(), Vec<u8>>> {
        self.audit.sent.fetch_add(1, Ordering::Relaxed);
        let mut st = self
            .rt
            .post_am(lcr::Rank(rank), buf, &self.shandler, self.rcomp)
            .tag(tag)
            .device(&ctx.device)
            .call()?;
        if st.is_retry() {
            self.audit.sent.fetch_sub(1, Ordering::Relaxed);
            return Ok(Err(st.take_buffer().unwrap_or_default()));
        }
        if st.is_done() {
            self.shandler
                .signal(st)
                .expect("handlers accept every signal");
        } else {
            assert!(st.is_posted());
        }
        Ok(Ok(()))
    }

    pub fn poll_msg(&self) -> Option<Msg> {
        let st = self.rcq.as_queue()?.try_pop()?;
        Some(Msg {
            rank: st.rank,
            tag: st.tag,
            size: st.size,
            buf: st.buffer.unwrap_or_default(),
        })
    }

    pub fn do_background_work(&self, ctx: &ThreadCtx) -> lcr::Result<usize> {
        self.rt.progress_device(&ctx.device)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DemoSummary {
    pub sent: u64,
    pub freed: u64,
    pub double_frees: u64,
    pub received: u64,
    pub duplicates: u64,
    pub corrupt: u64,
}

impl DemoSummary {
    pub fn encode(&self) -> String {
        format!(
            "demo {} {} {} {} {} {}",
            self.sent, self.freed, self.double_frees, self.received, self.duplicates, self.corrupt
        )
    }

    pub fn decode(line: &str) -> Option<DemoSummary> {
        let f: Vec<u64> = line
            .strip_prefix("demo ")?
            .split_whitespace()
            .map(|x| x.parse().ok())
            .collect::<Option<_>>()?;
        (f.len() == 6).then(|| DemoSummary {
            sent: f[0],
            freed: f[1],
            double_frees: f[2],
            received: f[3],
            duplicates: f[4],
            corrupt: f[5],
        })
    }

    /// Every buffer freed exactly once and every message seen exactly once.
    pub fn check(&self, expected_out: u64, expected_in: u64) -> Result<(), BenchError> {
        if self.sent != expected_out || self.freed != expected_out || self.double_frees != 0 {
            return Err(BenchError::Verify(format!(
                "sent {} freed {} double frees {} (expected {expected_out})",
                self.sent, self.freed, self.double_frees
            )));
        }
        if self.received != expected_in || self.duplicates != 0 || self.corrupt != 0 {
            return Err(BenchError::Verify(format!(
                "received {} duplicates {} corrupt {} (expected {expected_in})",
                self.received, self.duplicates, self.corrupt
            )));
        }
        Ok(())
    }
}

fn rpc_payload(id: u64, size: usize) -> Vec<u8> {
    let mut buf = pattern(size.max(8), id);
    buf[..8].copy_from_slice(&id.to_le_bytes());
    buf
}

/// Run `rpcs` RPCs from this rank to each other rank, spread over
/// `threads` threads, until every outgoing buffer is freed and every
/// incoming message consumed. Collective across the world.
pub fn run_rank(backend: &RpcBackend, threads: usize, rpcs: usize) -> lcr::Result<DemoSummary> {
    let me = backend.rank_me() as u64;
    let n = backend.rank_n() as u64;
    let expected_out = rpcs as u64 * (n - 1);
    let expected_in = expected_out;
    let deadline = Instant::now() + Duration::from_secs(300);
    let audit = &backend.audit;
    std::thread::scope(|s| {
        let hs: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || -> lcr::Result<()> {
                    let ctx = backend.thread_init()?;
                    // Thread t owns sequence numbers t, t + threads, ...
                    let mut todo: Vec<(u32, u64)> = (1..n)
                        .flat_map(|d| {
                            let dst = ((me + d) % n) as u32;
                            (t..rpcs).step_by(threads).map(move |seq| (dst, seq as u64))
                        })
                        .collect();
                    todo.reverse();
                    let mut retry: Option<(u32, u64, Vec<u8>)> = None;
                    loop {
                        let next = retry.take().or_else(|| {
                            todo.pop().map(|(dst, seq)| {
                                let id = (me << 48) | ((dst as u64) << 32) | seq;
                                (
                                    dst,
                                    seq,
                                    rpc_payload(id, RPC_SIZES[seq as usize % RPC_SIZES.len()]),
                                )
                            })
                        });
                        if let Some((dst, seq, buf)) = next {
                            if let Err(buf) = backend.send_msg(&ctx, dst, buf, seq as u32)? {
                                retry = Some((dst, seq, buf));
                            }
                        }
                        while let Some(m) = backend.poll_msg() {
                            consume(audit, me, m);
                        }
                        backend.do_background_work(&ctx)?;
                        if todo.is_empty()
                            && retry.is_none()
                            && audit.freed() == expected_out
                            && audit.received() == expected_in
                        {
                            break;
                        }
                        if Instant::now() > deadline {
                            return Err(lcr::Error::fatal("RPC demo made no progress"));
                        }
                    }
                    backend.thread_fina(ctx)
                })
            })
            .collect();
        hs.into_iter()
            .try_for_each(|h| h.join().expect("rpc thread"))
    })?;
    Ok(audit.summary())
}

fn consume(audit: &Audit, me: u64, m: Msg) {
    let ok = m.buf.len() == m.size && m.size >= 8 && {
        let id = msg_id(&m.buf);
        let seq = id & 0xffff_ffff;
        let mut expect = vec![0; m.size];
        fill_pattern(&mut expect, id);
        expect[..8].copy_from_slice(&id.to_le_bytes());
        (id >> 48) == m.rank.0 as u64
            && ((id >> 32) & 0xffff) == me
            && seq as u32 == m.tag.0
            && m.size == RPC_SIZES[seq as usize % RPC_SIZES.len()].max(8)
            && expect == m.buf
    };
    if !ok {
        audit.corrupt.fetch_add(1, Ordering::Relaxed);
        return;
    }
    if !audit.received.lock().unwrap().insert(msg_id(&m.buf)) {
        audit.duplicates.fetch_add(1, Ordering::Relaxed);
    }
    // The upper layer owns and frees the buffer.
    drop(m);
}
