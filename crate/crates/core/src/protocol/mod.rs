//! The runtime: resources, posting operations and the progress engine.

mod config;
mod post;
mod progress;

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use slab::Slab;

use crate::backend::loopback::LoopbackFabric;
use crate::backend::tcp::{TcpConfig, TcpTransport};
use crate::backend::{BackendOp, DeviceConfig, MemoryToken, NetDevice, Submit, Transport};
use crate::backlog::Backlog;
use crate::completion::{Comp, Graph};
use crate::error::{Error, Result};
use crate::matching::{MatchingEngine, MAX_MATCH_RANK};
use crate::packet::{Packet, PacketPool};
use crate::registry::{MpmcArray, RcompId, RcompRegistry};
use crate::types::{PostOptions, Rank, Status, Tag};

pub use config::{BackendKind, Config};
pub use post::Post;

use progress::{MatchEntry, Pending, Transfer};

// Backend op context: kind in the top byte, id below.
const CTX_SHIFT: u32 = 56;
const CTX_INLINE: u64 = 0;
const CTX_PACKET: u64 = 1;
const CTX_RNDV: u64 = 2;
const CTX_OP: u64 = 3;
const CTX_PREPOST: u64 = 4;

fn ctx(kind: u64, id: usize) -> u64 {
    (kind << CTX_SHIFT) | id as u64
}

fn ctx_kind(c: u64) -> u64 {
    c >> CTX_SHIFT
}

fn ctx_id(c: u64) -> usize {
    (c & ((1 << CTX_SHIFT) - 1)) as usize
}

/// Set in a WRITE's immediate word when it carries rendezvous data rather
/// than a put-with-signal remote completion id.
const RNDV_IMM_FLAG: u32 = 1 << 31;

const QUIESCE_TIMEOUT: Duration = Duration::from_secs(30);

static NEXT_RUNTIME_UID: AtomicU64 = AtomicU64::new(1);

/// Protocol-level counters, mostly for tracing rendezvous transfers.
#[derive(Debug, Default)]
pub struct Stats {
    pub rts: AtomicU64,
    pub cts: AtomicU64,
    pub rendezvous_writes: AtomicU64,
    pub fin: AtomicU64,
    pub eager: AtomicU64,
    pub inject: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsSnapshot {
    pub rts: u64,
    pub cts: u64,
    pub rendezvous_writes: u64,
    pub fin: u64,
    pub eager: u64,
    pub inject: u64,
}

impl Stats {
    fn snapshot(&self) -> StatsSnapshot {
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        StatsSnapshot {
            rts: l(&self.rts),
            cts: l(&self.cts),
            rendezvous_writes: l(&self.rendezvous_writes),
            fin: l(&self.fin),
            eager: l(&self.eager),
            inject: l(&self.inject),
        }
    }
}

pub(crate) struct DeviceInner {
    runtime: u64,
    index: usize,
    net: Box<dyn NetDevice>,
    backlog: Backlog<Pending>,
    pool: PacketPool,
    preposted: AtomicUsize,
    prepost_target: usize,
    freed: AtomicBool,
}

/// A set of network resources with its own backlog. Threads using
/// different devices do not contend.
#[derive(Clone)]
pub struct Device {
    inner: Arc<DeviceInner>,
}

impl PartialEq for Device {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

impl fmt::Debug for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Device")
            .field("index", &self.inner.index)
            .finish()
    }
}

impl Device {
    pub fn index(&self) -> usize {
        self.inner.index
    }

    /// Transport state changes caused by posts and polls on this device.
    pub fn mutations(&self) -> u64 {
        self.inner.net.mutations()
    }

    pub fn backlog_len(&self) -> usize {
        self.inner.backlog.len()
    }

    /// Incoming messages waiting for a pre-posted receive right now, and
    /// the most ever seen at once.
    pub fn stalled(&self) -> (usize, usize) {
        (self.inner.net.stalled(), self.inner.net.stall_watermark())
    }

    pub fn preposted(&self) -> usize {
        self.inner.preposted.load(Ordering::Relaxed)
    }
}

pub(crate) struct EngineInner {
    index: u16,
    engine: MatchingEngine<MatchEntry>,
}

/// A matching engine owned by a runtime.
#[derive(Clone)]
pub struct MatchingEngineHandle {
    inner: Arc<EngineInner>,
}

impl PartialEq for MatchingEngineHandle {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

impl fmt::Debug for MatchingEngineHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatchingEngine")
            .field("index", &self.inner.index)
            .finish()
    }
}

impl MatchingEngineHandle {
    pub fn index(&self) -> u16 {
        self.inner.index
    }

    /// Unmatched entries currently stored.
    pub fn len(&self) -> usize {
        self.inner.engine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.engine.is_empty()
    }
}

/// Bookkeeping for a put or get in flight.
pub(crate) struct OpRecord {
    comp: Comp,
    rank: Rank,
    tag: Tag,
    user_context: u64,
}

pub(crate) struct Inner {
    uid: u64,
    config: Config,
    transport: Box<dyn Transport>,
    rank_me: Rank,
    rank_n: u32,
    defaults: PostOptions,
    default_device: Device,
    next_device: AtomicUsize,
    devices: Mutex<Vec<Device>>,
    engines: MpmcArray<MatchingEngineHandle>,
    pools: MpmcArray<PacketPool>,
    rcomps: RcompRegistry<Comp>,
    xfers: Mutex<Slab<Transfer>>,
    ops: Mutex<Slab<OpRecord>>,
    stats: Stats,
    finalized: AtomicBool,
}

/// One rank's communication runtime. Cloning yields another handle to the
/// same runtime; several runtimes may coexist in a process without sharing
/// state.
#[derive(Clone)]
pub struct Runtime {
    inner: Arc<Inner>,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("rank_me", &self.inner.rank_me)
            .field("rank_n", &self.inner.rank_n)
            .finish()
    }
}

impl Runtime {
    /// Build a runtime over an existing transport endpoint.
    pub fn with_transport(config: Config, transport: Box<dyn Transport>) -> Result<Runtime> {
        config.validate()?;
        let rank_n = transport.rank_n();
        if rank_n == 0 || rank_n - 1 > MAX_MATCH_RANK {
            return Err(Error::invalid(format!(
                "world size {rank_n} is not supported"
            )));
        }
        let rank_me = transport.rank_me();
        let pool = PacketPool::new(config.packet_count, config.packet_size);
        let pools = MpmcArray::with_capacity(4);
        pools.append(pool.clone());
        let engine = MatchingEngineHandle {
            inner: Arc::new(EngineInner {
                index: 0,
                engine: MatchingEngine::with_config(
                    config.matching_buckets,
                    config.inline_matching,
                ),
            }),
        };
        let engines = MpmcArray::with_capacity(4);
        engines.append(engine.clone());
        let uid = NEXT_RUNTIME_UID.fetch_add(1, Ordering::Relaxed);
        let device = open_device(uid, &config, transport.as_ref(), 0, &pool)?;
        let mut defaults = PostOptions::new(crate::types::Direction::Out);
        defaults.device = Some(device.clone());
        defaults.matching_engine = Some(engine);
        defaults.packet_pool = Some(pool);
        let rt = Runtime {
            inner: Arc::new(Inner {
                uid,
                config,
                transport,
                rank_me,
                rank_n,
                defaults,
                default_device: device.clone(),
                next_device: AtomicUsize::new(1),
                devices: Mutex::new(vec![device.clone()]),
                engines,
                pools,
                rcomps: RcompRegistry::new(),
                xfers: Mutex::new(Slab::new()),
                ops: Mutex::new(Slab::new()),
                stats: Stats::default(),
                finalized: AtomicBool::new(false),
            }),
        };
        rt.replenish(&device)?;
        Ok(rt)
    }

    /// All ranks of an in-process loopback world, rank order.
    pub fn loopback_world(world: u32, config: Config) -> Result<Vec<Runtime>> {
        let fabric = LoopbackFabric::new(world, config.reorder);
        (0..world)
            .map(|r| Runtime::with_transport(config.clone(), Box::new(fabric.endpoint(Rank(r)))))
            .collect()
    }

    /// Join a TCP world. Blocks until every peer is connected.
    pub fn tcp(config: Config, tcp: &TcpConfig) -> Result<Runtime> {
        let t = TcpTransport::connect(tcp)?;
        Runtime::with_transport(config, Box::new(t))
    }

    pub fn config(&self) -> &Config {
        &self.inner.config
    }

    pub fn rank_me(&self) -> Rank {
        self.inner.rank_me
    }

    pub fn rank_n(&self) -> u32 {
        self.inner.rank_n
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.inner.stats.snapshot()
    }

    pub fn default_device(&self) -> &Device {
        &self.inner.default_device
    }

    pub fn default_matching_engine(&self) -> &MatchingEngineHandle {
        self.inner.defaults.matching_engine.as_ref().unwrap()
    }

    pub fn default_packet_pool(&self) -> &PacketPool {
        self.inner.defaults.packet_pool.as_ref().unwrap()
    }

    /// The options every post starts from.
    pub fn defaults(&self) -> &PostOptions {
        &self.inner.defaults
    }

    fn check_active(&self) -> Result<()> {
        if self.inner.finalized.load(Ordering::Acquire) {
            return Err(Error::invalid("runtime has been finalized"));
        }
        Ok(())
    }

    fn check_device(&self, dev: &Device) -> Result<()> {
        self.check_active()?;
        if dev.inner.runtime != self.inner.uid {
            return Err(Error::invalid("device belongs to another runtime"));
        }
        if dev.inner.freed.load(Ordering::Acquire) {
            return Err(Error::invalid("device has been freed"));
        }
        Ok(())
    }

    pub fn alloc_device(&self) -> Result<Device> {
        self.check_active()?;
        let index = self.inner.next_device.fetch_add(1, Ordering::Relaxed);
        let dev = open_device(
            self.inner.uid,
            &self.inner.config,
            self.inner.transport.as_ref(),
            index,
            self.default_packet_pool(),
        )?;
        self.replenish(&dev)?;
        self.inner.devices.lock().push(dev.clone());
        Ok(dev)
    }

    /// Release a device once its outgoing work has drained. Its pre-posted
    /// packets go back to the pool; any later use of the handle is an
    /// invalid argument.
    pub fn free_device(&self, dev: &Device) -> Result<()> {
        self.check_device(dev)?;
        if *dev == self.inner.default_device {
            return Err(Error::invalid("the default device is freed by fina"));
        }
        let quiet = self.quiesce(std::slice::from_ref(dev));
        self.retire_device(dev);
        self.inner.devices.lock().retain(|d| d != dev);
        quiet
    }

    fn retire_device(&self, dev: &Device) {
        dev.inner.freed.store(true, Ordering::Release);
        for p in dev.inner.net.drain_posted() {
            self.return_packet(p);
        }
        dev.inner.preposted.store(0, Ordering::Relaxed);
        for item in dev.inner.backlog.drain() {
            if let Some(p) = item.into_packet() {
                self.return_packet(p);
            }
        }
    }

    pub fn alloc_matching_engine(&self) -> Result<MatchingEngineHandle> {
        self.check_active()?;
        let index = u16::try_from(self.inner.engines.len())
            .map_err(|_| Error::invalid("too many matching engines"))?;
        let h = MatchingEngineHandle {
            inner: Arc::new(EngineInner {
                index,
                engine: MatchingEngine::with_config(
                    self.inner.config.matching_buckets,
                    self.inner.config.inline_matching,
                ),
            }),
        };
        // Index and slot agree because engines are only appended here, under
        // the array's writer lock ordering; re-check to be safe.
        let slot = self.inner.engines.append(h.clone());
        if slot != index as usize {
            return Err(Error::invalid("concurrent matching engine allocation"));
        }
        Ok(h)
    }

    pub fn alloc_packet_pool(&self, count: usize, payload_size: usize) -> Result<PacketPool> {
        self.check_active()?;
        let p = PacketPool::new(count, payload_size);
        self.inner.pools.append(p.clone());
        Ok(p)
    }

    pub fn alloc_cq(&self) -> Comp {
        Comp::queue(self.inner.config.cq_capacity)
    }

    pub fn alloc_counter(&self) -> Comp {
        Comp::counter()
    }

    pub fn alloc_sync(&self, expected: usize) -> Comp {
        Comp::synchronizer(expected)
    }

    pub fn alloc_handler(&self, f: impl Fn(Status) + Send + Sync + 'static) -> Comp {
        Comp::handler(f)
    }

    pub fn alloc_graph(&self) -> Graph {
        Graph::new()
    }

    /// Make `comp` addressable by peers. Ids are handed out in
    /// registration order, so all ranks must register in the same order.
    pub fn register_rcomp(&self, comp: Comp) -> Result<RcompId> {
        self.check_active()?;
        let id = self.inner.rcomps.register(comp);
        if id.0 >= RNDV_IMM_FLAG {
            return Err(Error::invalid("too many remote completion handles"));
        }
        Ok(id)
    }

    pub fn lookup_rcomp(&self, id: RcompId) -> Result<Comp> {
        self.inner.rcomps.lookup(id).cloned()
    }

    /// Hand `buf` to the runtime so peers can WRITE into or READ from it.
    pub fn register_memory(&self, buf: Vec<u8>) -> Result<MemoryToken> {
        self.check_active()?;
        self.inner.transport.regions().register(buf)
    }

    pub fn deregister_memory(&self, token: MemoryToken) -> Result<Vec<u8>> {
        self.inner.transport.regions().deregister(token)
    }

    /// Access a local registered region in place.
    pub fn with_memory<R>(&self, token: MemoryToken, f: impl FnOnce(&mut [u8]) -> R) -> Result<R> {
        self.inner.transport.regions().with(token, f)
    }

    /// Tear down: collective handshake with the peers, then every device,
    /// matching engine and backlog gives its packets back. Later calls on
    /// this runtime fail with an invalid argument.
    pub fn fina(&self) -> Result<()> {
        if self.inner.finalized.swap(true, Ordering::AcqRel) {
            return Err(Error::invalid("runtime already finalized"));
        }
        let devices = self.inner.devices.lock().clone();
        let quiet = self.quiesce(&devices);
        let res = quiet.and_then(|_| {
            self.inner.transport.finalize(&mut || {
                for d in &devices {
                    self.progress_pass(d)?;
                }
                Ok(())
            })
        });
        self.inner.devices.lock().clear();
        for d in &devices {
            self.retire_device(d);
        }
        for e in self.inner.engines.iter() {
            for (_, _, entry) in e.inner.engine.drain() {
                if let MatchEntry::Eager { packet, .. } = entry {
                    self.return_packet(packet);
                }
            }
        }
        res
    }

    /// Progress every device until nothing local is left to send.
    fn quiesce(&self, devices: &[Device]) -> Result<()> {
        let deadline = Instant::now() + QUIESCE_TIMEOUT;
        loop {
            let mut busy = false;
            for d in devices {
                self.progress_pass(d)?;
                busy |= !d.inner.backlog.is_empty() || d.inner.net.in_flight() > 0;
            }
            if !busy {
                return Ok(());
            }
            if Instant::now() > deadline {
                return Err(Error::fatal("operations still in flight at finalize"));
            }
            std::thread::yield_now();
        }
    }

    pub fn is_finalized(&self) -> bool {
        self.inner.finalized.load(Ordering::Acquire)
    }

    /// Packets resting in the default pool (for leak audits).
    pub fn packet_census(&self) -> usize {
        self.default_packet_pool().census()
    }

    fn pool_of(&self, p: &Packet) -> Option<PacketPool> {
        self.inner
            .pools
            .iter()
            .find(|pool| pool.uid() == p.origin())
            .cloned()
    }

    fn return_packet(&self, p: Packet) {
        match self.pool_of(&p) {
            Some(pool) => pool.put(p),
            None => debug_assert!(false, "packet from an unknown pool"),
        }
    }

    /// Top up the device's pre-posted receives. Returns how many were
    /// posted.
    fn replenish(&self, dev: &Device) -> Result<usize> {
        let d = &dev.inner;
        let mut n = 0;
        loop {
            if d.preposted.fetch_add(1, Ordering::AcqRel) >= d.prepost_target {
                d.preposted.fetch_sub(1, Ordering::AcqRel);
                return Ok(n);
            }
            let Some(p) = d.pool.get() else {
                d.preposted.fetch_sub(1, Ordering::AcqRel);
                return Ok(n);
            };
            match d.net.post(BackendOp::recv(p, ctx(CTX_PREPOST, 0)))? {
                Submit::Accepted => n += 1,
                Submit::Retry(_, op) => {
                    d.preposted.fetch_sub(1, Ordering::AcqRel);
                    if let Some(p) = op.local.into_packet() {
                        d.pool.put(p);
                    }
                    return Ok(n);
                }
            }
        }
    }
}

fn open_device(
    runtime: u64,
    config: &Config,
    transport: &dyn Transport,
    index: usize,
    pool: &PacketPool,
) -> Result<Device> {
    let net = transport.open_device(
        index,
        &DeviceConfig {
            send_queue_depth: config.send_queue_depth,
        },
    )?;
    Ok(Device {
        inner: Arc::new(DeviceInner {
            runtime,
            index,
            net,
            backlog: Backlog::new(),
            pool: pool.clone(),
            preposted: AtomicUsize::new(0),
            prepost_target: config.prepost_count.min((pool.total() / 2).max(1)),
            freed: AtomicBool::new(false),
        }),
    })
}
