//! Acceptance suite. Prints one PASS/FAIL/WARN line per criterion and
//! exits nonzero if any criterion fails. Pass criterion numbers as
//! arguments to run a subset.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::panic::AssertUnwindSafe;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use lcr::completion::CompletionQueue;
use lcr::matching::{make_key, EntryKind, MatchKey, MatchingEngine};
use lcr::{
    Comp, Config, Direction, ErrorCode, GraphAction, GraphState, MatchingPolicy, PacketPool,
    Paradigm, Rank, RemoteBuffer, RetryReason, Runtime, Status, Tag,
};
use lcr_bench::config::{Backend, BenchConfig, Benchmark, ResourceMode};
use lcr_bench::resource::{self, Resource};
use lcr_bench::world::{
    checksum, complete, finalize_world, make_world, pattern, post_until_accepted,
};

enum Verdict {
    Pass(String),
    Warn(String),
}

type Outcome = Result<Verdict, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn pass(s: impl Into<String>) -> Outcome {
    Ok(Verdict::Pass(s.into()))
}

fn lcr_err(e: lcr::Error) -> String {
    e.to_string()
}

fn pop(cq: &Comp) -> Option<Status> {
    cq.as_queue().expect("queue").try_pop()
}

/// Progress every runtime until `until` holds.
fn pump(rts: &[Runtime], limit: Duration, mut until: impl FnMut() -> bool) -> Result<(), String> {
    let start = Instant::now();
    while !until() {
        for rt in rts {
            rt.progress().map_err(lcr_err)?;
        }
        ensure!(start.elapsed() < limit, "no progress within {limit:?}");
    }
    Ok(())
}

// 1. Paradigm matrix.

fn paradigm_matrix() -> Outcome {
    use Direction::{In, Out};
    let mut valid = 0;
    for d in [Out, In] {
        for rb in [false, true] {
            for rc in [false, true] {
                match Paradigm::classify(d, rb, rc) {
                    Ok(_) => valid += 1,
                    Err(e) => ensure!(
                        (d, rb, rc) == (In, false, true) && e.code() == ErrorCode::InvalidArgument,
                        "unexpected rejection of {d:?}/{rb}/{rc}"
                    ),
                }
            }
        }
    }
    ensure!(valid == 7, "{valid} valid combinations, expected 7");

    let rts = Runtime::loopback_world(2, Config::default()).map_err(lcr_err)?;
    let (a, b) = (&rts[0], &rts[1]);
    // Rcomps are registered in the same order on both ranks.
    let am_cq: Vec<Comp> = rts.iter().map(|r| r.alloc_cq()).collect();
    let sig: Vec<Comp> = rts.iter().map(|r| r.alloc_counter()).collect();
    let am_id = b.register_rcomp(am_cq[1].clone()).map_err(lcr_err)?;
    a.register_rcomp(am_cq[0].clone()).map_err(lcr_err)?;
    let sig_id = b.register_rcomp(sig[1].clone()).map_err(lcr_err)?;
    a.register_rcomp(sig[0].clone()).map_err(lcr_err)?;
    let token = b.register_memory(vec![0; 4096]).map_err(lcr_err)?;
    let scq = a.alloc_cq();
    let rcq = b.alloc_cq();
    let limit = Duration::from_secs(5);
    let one_signal = |cq: &Comp, what: &str| -> Result<Status, String> {
        let mut got = None;
        pump(&rts, limit, || {
            got = pop(cq);
            got.is_some()
        })?;
        for rt in &rts {
            rt.progress().map_err(lcr_err)?;
        }
        ensure!(pop(cq).is_none(), "{what}: more than one signal");
        Ok(got.unwrap())
    };
    let mut rows = Vec::new();

    for size in [8usize, 1000, 100_000] {
        let data = pattern(size, size as u64);
        b.post_recv(Rank(0), Vec::new(), &rcq)
            .tag(1)
            .call()
            .map_err(lcr_err)?;
        let st = a
            .post_send(Rank(1), data.clone(), &scq)
            .tag(1)
            .allow_done(false)
            .call()
            .map_err(lcr_err)?;
        ensure!(
            st.is_posted(),
            "send with allow_done=false returned {:?}",
            st.state
        );
        one_signal(&scq, "send source")?;
        let r = one_signal(&rcq, "recv target")?;
        ensure!(
            r.buffer.as_deref() == Some(&data[..]) && r.rank == Rank(0) && r.tag == Tag(1),
            "send/recv payload or envelope wrong at {size} bytes"
        );
    }
    rows.push("send");
    rows.push("recv");

    for size in [8usize, 1000, 100_000] {
        let data = pattern(size, 3);
        a.post_am(Rank(1), data.clone(), &scq, am_id)
            .tag(2)
            .allow_done(false)
            .call()
            .map_err(lcr_err)?;
        one_signal(&scq, "am source")?;
        let r = one_signal(&am_cq[1], "am target")?;
        ensure!(
            r.buffer.as_deref() == Some(&data[..]) && r.tag == Tag(2),
            "am payload wrong at {size} bytes"
        );
    }
    rows.push("am");

    let data = pattern(300, 4);
    a.post_put(Rank(1), data.clone(), &scq, RemoteBuffer::new(token, 100))
        .allow_done(false)
        .call()
        .map_err(lcr_err)?;
    one_signal(&scq, "put source")?;
    let placed = b
        .with_memory(token, |m| m[100..400] == data[..])
        .map_err(lcr_err)?;
    ensure!(placed, "put did not land");
    ensure!(
        sig[1].as_counter().unwrap().get() == 0,
        "plain put signalled the target"
    );
    rows.push("put");

    let data = pattern(200, 5);
    a.post_put(Rank(1), data.clone(), &scq, RemoteBuffer::new(token, 0))
        .remote_comp(sig_id)
        .allow_done(false)
        .call()
        .map_err(lcr_err)?;
    one_signal(&scq, "put-with-signal source")?;
    pump(&rts, limit, || sig[1].as_counter().unwrap().get() == 1)?;
    let placed = b
        .with_memory(token, |m| m[..200] == data[..])
        .map_err(lcr_err)?;
    ensure!(placed, "put with signal did not land before its signal");
    rows.push("put+signal");

    a.post_get(Rank(1), vec![0; 250], &scq, RemoteBuffer::new(token, 50))
        .allow_done(false)
        .call()
        .map_err(lcr_err)?;
    let g = one_signal(&scq, "get source")?;
    let want = b
        .with_memory(token, |m| m[50..300].to_vec())
        .map_err(lcr_err)?;
    ensure!(
        g.buffer.as_deref() == Some(&want[..]),
        "get returned wrong bytes"
    );
    rows.push("get");

    let e = a
        .post_get(Rank(1), vec![0; 4], &scq, RemoteBuffer::new(token, 0))
        .remote_comp(sig_id)
        .call()
        .err()
        .ok_or("get with signal was accepted")?;
    ensure!(
        e.code() == ErrorCode::InvalidArgument,
        "get with signal: {e}"
    );
    let e = b
        .post_recv(Rank(0), vec![], &rcq)
        .remote_comp(sig_id)
        .call()
        .err()
        .ok_or("receive with remote completion was accepted")?;
    ensure!(e.code() == ErrorCode::InvalidArgument, "invalid row: {e}");
    ensure!(
        sig[0].as_counter().unwrap().get() == 0 && pop(&am_cq[0]).is_none(),
        "stray signal on the source rank"
    );
    finalize_world(rts).map_err(lcr_err)?;
    pass(format!(
        "{} completed, invalid row and get-with-signal rejected",
        rows.join(" ")
    ))
}

// 2. Protocol sweep.

const SWEEP: [usize; 8] = [0, 1, 8, 64, 65, 8192, 8193, 1 << 20];

fn protocol_sweep(backend: Backend, reorder: bool) -> Result<usize, String> {
    let cfg = Config {
        reorder,
        ..Config::default()
    };
    let rts = make_world(backend, 2, &cfg).map_err(lcr_err)?;
    let rounds = 2;
    let checked = std::thread::scope(|s| {
        let sender = s.spawn(|| -> lcr::Result<()> {
            let rt = &rts[0];
            let dev = rt.default_device();
            let cq = rt.alloc_cq();
            for round in 0..rounds {
                for (i, &size) in SWEEP.iter().enumerate() {
                    let seed = (round * 100 + i) as u64;
                    let tag = Tag(seed as u32);
                    let st = post_until_accepted(rt, dev, pattern(size, seed), |b| {
                        rt.post_send(Rank(1), b, &cq).tag(tag).device(dev).call()
                    })?;
                    complete(rt, dev, &cq, st)?;
                }
            }
            Ok(())
        });
        let receiver = s.spawn(|| -> Result<usize, String> {
            let rt = &rts[1];
            let dev = rt.default_device();
            let cq = rt.alloc_cq();
            let mut n = 0;
            for round in 0..rounds {
                for (i, &size) in SWEEP.iter().enumerate() {
                    let seed = (round * 100 + i) as u64;
                    if round == 1 {
                        // Second round: the message arrives before the receive.
                        let start = Instant::now();
                        while rt.default_matching_engine().is_empty() {
                            rt.progress_device(dev).map_err(lcr_err)?;
                            ensure!(
                                start.elapsed() < Duration::from_secs(20),
                                "message {size} never arrived"
                            );
                        }
                    }
                    let st = post_until_accepted(rt, dev, Vec::new(), |b| {
                        rt.post_recv(Rank(0), b, &cq)
                            .tag(seed as u32)
                            .device(dev)
                            .call()
                    })
                    .map_err(lcr_err)?;
                    let st = complete(rt, dev, &cq, st).map_err(lcr_err)?;
                    let buf = st.buffer.unwrap_or_default();
                    ensure!(
                        st.size == size
                            && buf.len() == size
                            && checksum(&buf) == checksum(&pattern(size, seed)),
                        "size {size}: got {} bytes with a bad checksum",
                        buf.len()
                    );
                    n += 1;
                }
            }
            Ok(n)
        });
        sender.join().expect("sender").map_err(lcr_err)?;
        receiver.join().expect("receiver")
    })?;
    finalize_world(rts).map_err(lcr_err)?;
    Ok(checked)
}

fn criterion_protocol_sweep() -> Outcome {
    let a = protocol_sweep(Backend::Loopback, false)?;
    let b = protocol_sweep(Backend::Tcp, false)?;
    pass(format!("{a} loopback and {b} tcp transfers byte-exact"))
}

// 3. Concurrency stress.

const STRESS_THREADS: usize = 8;
const STRESS_MSGS: usize = 10_000;
const STRESS_TAGS: u32 = 64;

fn stress_tags(rank: usize, thread: usize) -> Vec<u32> {
    let mut rng = fastrand::Rng::with_seed(0x5EED_0000 + (rank * 1000 + thread) as u64);
    (0..STRESS_MSGS).map(|_| rng.u32(0..STRESS_TAGS)).collect()
}

fn stress_size(seq: usize) -> usize {
    if seq.is_multiple_of(97) {
        9000
    } else {
        [8, 48, 200, 1500][seq % 4]
    }
}

fn stress_id(rank: usize, thread: usize, seq: usize) -> u64 {
    ((rank as u64) << 40) | ((thread as u64) << 32) | seq as u64
}

fn stress_payload(id: u64, size: usize) -> Vec<u8> {
    let mut b = pattern(size, id);
    b[..8].copy_from_slice(&id.to_le_bytes());
    b
}

fn stress(reorder: bool) -> Result<String, String> {
    let cfg = Config {
        reorder,
        ..Config::default()
    };
    let rts = Runtime::loopback_world(2, cfg).map_err(lcr_err)?;
    let tags: Vec<Vec<Vec<u32>>> = (0..2)
        .map(|r| (0..STRESS_THREADS).map(|t| stress_tags(r, t)).collect())
        .collect();
    let devs: Vec<Vec<lcr::Device>> = rts
        .iter()
        .map(|rt| {
            (0..STRESS_THREADS)
                .map(|_| rt.alloc_device())
                .collect::<lcr::Result<Vec<_>>>()
        })
        .collect::<lcr::Result<_>>()
        .map_err(lcr_err)?;
    let finished = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let deadline = Instant::now() + Duration::from_secs(55);
    let received: Vec<Vec<Status>> = std::thread::scope(|s| {
        let mut hs = Vec::new();
        for (r, rt) in rts.iter().enumerate() {
            for (t, dev) in devs[r].iter().enumerate() {
                let (tags, finished, failed) = (&tags, &finished, &failed);
                hs.push(s.spawn(move || -> Result<Vec<Status>, String> {
                    let peer = 1 - r;
                    let sent = rt.alloc_counter();
                    let rcq = rt.alloc_cq();
                    let mut done_sends = 0u64;
                    let mut got = Vec::with_capacity(STRESS_MSGS);
                    let drain = |got: &mut Vec<Status>| {
                        while let Some(st) = pop(&rcq) {
                            got.push(st);
                        }
                    };
                    let counter = sent.as_counter().unwrap();
                    let (mut next_send, mut next_recv) = (0, 0);
                    let mut pending: Option<Vec<u8>> = None;
                    let mut mine_done = false;
                    // A send that has to be retried never holds up receives:
                    // unmatched arrivals pin packets until a receive claims
                    // them. After its own work, a worker keeps progressing
                    // until every worker in the world is done.
                    while finished.load(Ordering::Acquire) < 2 * STRESS_THREADS {
                        if next_recv < STRESS_MSGS {
                            // Receive what the peer's thread t sends, in its order.
                            let tag = tags[peer][t][next_recv];
                            let st = rt
                                .post_recv(Rank(peer as u32), Vec::new(), &rcq)
                                .tag(tag)
                                .device(dev)
                                .call()
                                .map_err(lcr_err)?;
                            if !st.is_retry() {
                                if st.is_done() {
                                    got.push(st);
                                }
                                next_recv += 1;
                            }
                        }
                        if next_send < STRESS_MSGS {
                            let id = stress_id(r, t, next_send);
                            let buf = pending
                                .take()
                                .unwrap_or_else(|| stress_payload(id, stress_size(next_send)));
                            let mut st = rt
                                .post_send(Rank(peer as u32), buf, &sent)
                                .tag(tags[r][t][next_send])
                                .device(dev)
                                .call()
                                .map_err(lcr_err)?;
                            if st.is_retry() {
                                pending = st.take_buffer();
                            } else {
                                done_sends += st.is_done() as u64;
                                next_send += 1;
                            }
                        }
                        let busy = rt.progress_device(dev).map_err(lcr_err)?;
                        drain(&mut got);
                        if busy == 0 && next_send == STRESS_MSGS {
                            std::thread::yield_now();
                        }
                        if !mine_done
                            && got.len() == STRESS_MSGS
                            && done_sends + counter.get() == STRESS_MSGS as u64
                        {
                            mine_done = true;
                            finished.fetch_add(1, Ordering::AcqRel);
                        }
                        if Instant::now() > deadline || failed.load(Ordering::Relaxed) {
                            failed.store(true, Ordering::Relaxed);
                            return Err(format!(
                                "rank {r} thread {t}: {} received, {} sends complete",
                                got.len(),
                                done_sends + counter.get()
                            ));
                        }
                    }
                    Ok(got)
                }));
            }
        }
        hs.into_iter()
            .map(|h| h.join().expect("stress worker"))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let mut per_rank: Vec<Vec<u64>> = vec![Vec::new(), Vec::new()];
    let mut by_tag: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(), BTreeMap::new()];
    for (w, statuses) in received.iter().enumerate() {
        let me = w / STRESS_THREADS;
        for st in statuses {
            let buf = st.buffer.as_deref().unwrap_or_default();
            ensure!(
                buf.len() >= 8 && buf.len() == st.size,
                "short message at rank {me}"
            );
            let id = u64::from_le_bytes(buf[..8].try_into().unwrap());
            let (src, thread, seq) = (
                (id >> 40) as usize,
                ((id >> 32) & 0xff) as usize,
                (id & 0xffff_ffff) as usize,
            );
            ensure!(
                src == 1 - me && st.rank == Rank(src as u32),
                "message {id:#x} from the wrong rank"
            );
            ensure!(
                thread < STRESS_THREADS && seq < STRESS_MSGS,
                "bad message id {id:#x}"
            );
            ensure!(
                st.tag == Tag(tags[src][thread][seq]),
                "message {id:#x} carries the wrong tag"
            );
            ensure!(
                buf == stress_payload(id, stress_size(seq)),
                "message {id:#x} corrupted"
            );
            per_rank[me].push(id);
            *by_tag[me].entry(st.tag.0).or_default() += 1;
        }
    }
    for me in 0..2 {
        let src = 1 - me;
        let mut want: Vec<u64> = (0..STRESS_THREADS)
            .flat_map(|t| (0..STRESS_MSGS).map(move |q| stress_id(src, t, q)))
            .collect();
        want.sort_unstable();
        per_rank[me].sort_unstable();
        ensure!(
            per_rank[me] == want,
            "rank {me}: received set differs from sent set"
        );
        let mut want_tags = BTreeMap::new();
        for seq in &tags[src] {
            for &tag in seq {
                *want_tags.entry(tag).or_insert(0usize) += 1;
            }
        }
        ensure!(by_tag[me] == want_tags, "rank {me}: per-tag counts differ");
    }
    finalize_world(rts).map_err(lcr_err)?;
    Ok(format!(
        "{} messages each way over {STRESS_THREADS} threads, per-(rank, tag) multisets equal",
        STRESS_THREADS * STRESS_MSGS
    ))
}

// 4. Matching oracle.

#[derive(Default)]
struct FifoOracle {
    lists: HashMap<u64, [VecDeque<u64>; 2]>,
}

impl FifoOracle {
    fn insert(&mut self, key: u64, kind: EntryKind, v: u64) -> Option<u64> {
        let (mine, other) = match kind {
            EntryKind::Send => (0, 1),
            EntryKind::Recv => (1, 0),
        };
        let l = self.lists.entry(key).or_default();
        match l[other].pop_front() {
            Some(m) => Some(m),
            None => {
                l[mine].push_back(v);
                None
            }
        }
    }

    fn len(&self) -> usize {
        self.lists.values().map(|l| l[0].len() + l[1].len()).sum()
    }
}

fn matching_oracle() -> Outcome {
    let mut rng = fastrand::Rng::with_seed(4);
    let mut ops = 0;
    for case in 0..10_000 {
        // Few buckets and a few keys so chains and collisions are exercised.
        let engine = MatchingEngine::<u64>::with_config(1 << rng.u32(0..4), rng.bool());
        let mut oracle = FifoOracle::default();
        let keys = rng.u64(1..6);
        for v in 0..rng.usize(1..60) as u64 {
            let key = rng.u64(0..keys) * 0x9E37_79B9;
            let kind = if rng.bool() {
                EntryKind::Send
            } else {
                EntryKind::Recv
            };
            let got = engine.insert(MatchKey(key), kind, v);
            let want = oracle.insert(key, kind, v);
            ensure!(
                got == want,
                "case {case}: insert {v} on {key:#x} gave {got:?}, oracle {want:?}"
            );
            ops += 1;
        }
        ensure!(
            engine.len() == oracle.len(),
            "case {case}: {} left, oracle {}",
            engine.len(),
            oracle.len()
        );
    }

    // Concurrent: 8 senders and 8 receivers share keys; every key must pair
    // exactly once with the right partner.
    const PER: u64 = 20_000;
    let engine = MatchingEngine::<u64>::new();
    let matches = Mutex::new(Vec::new());
    let barrier = Barrier::new(16);
    std::thread::scope(|s| {
        for t in 0..16u64 {
            let (engine, matches, barrier) = (&engine, &matches, &barrier);
            s.spawn(move || {
                let kind = if t < 8 {
                    EntryKind::Send
                } else {
                    EntryKind::Recv
                };
                let lane = t % 8;
                let mut local = Vec::new();
                barrier.wait();
                for i in 0..PER {
                    let key = make_key(Rank(lane as u32), Tag(i as u32), MatchingPolicy::RankTag);
                    let v = (lane << 32 | i) << 1 | (kind == EntryKind::Recv) as u64;
                    if let Some(pair) = engine.insert_or_match(key, kind, v) {
                        local.push(pair);
                    }
                }
                matches.lock().unwrap().extend(local);
            });
        }
    });
    let matches = matches.into_inner().unwrap();
    ensure!(engine.is_empty(), "{} entries left unpaired", engine.len());
    ensure!(
        matches.len() as u64 == 8 * PER,
        "{} pairs, expected {}",
        matches.len(),
        8 * PER
    );
    let mut seen = HashSet::new();
    for (v, m) in matches {
        ensure!(
            v >> 1 == m >> 1 && (v & 1) != (m & 1),
            "paired {v:#x} with {m:#x}"
        );
        ensure!(seen.insert(v >> 1), "key {:#x} paired twice", v >> 1);
    }
    pass(format!(
        "10000 sequences ({ops} inserts) agree with the FIFO oracle; 16-thread pairing exact"
    ))
}

// 5. Packet conservation.

fn packet_conservation() -> Outcome {
    const THREADS: usize = 8;
    const OPS: usize = 100_000;
    let pool = PacketPool::new(64, 256);
    let held = Mutex::new(HashSet::new());
    let double = AtomicUsize::new(0);
    let done_ops = AtomicUsize::new(0);
    let barrier = Barrier::new(THREADS);
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..THREADS)
        .map(|_| std::sync::mpsc::channel::<lcr::packet::Packet>())
        .unzip();
    std::thread::scope(|s| {
        for (t, rx) in rxs.into_iter().enumerate() {
            let (pool, held, double, done_ops, barrier) =
                (&pool, &held, &double, &done_ops, &barrier);
            // Each thread hands some packets to its neighbour, so puts land
            // on other threads' deques and gets have to steal.
            let tx = txs[(t + 1) % THREADS].clone();
            s.spawn(move || {
                let mut rng = fastrand::Rng::with_seed(t as u64);
                let mut mine = Vec::new();
                barrier.wait();
                for _ in 0..OPS / THREADS {
                    while let Ok(p) = rx.try_recv() {
                        mine.push(p);
                    }
                    if mine.len() < 4 && rng.bool() {
                        if let Some(p) = pool.get() {
                            if !held.lock().unwrap().insert(p.frame().as_ptr() as usize) {
                                double.fetch_add(1, Ordering::Relaxed);
                            }
                            mine.push(p);
                        }
                    } else if let Some(p) = mine.pop() {
                        if rng.u8(..) < 64 {
                            let _ = tx.send(p);
                        } else {
                            held.lock().unwrap().remove(&(p.frame().as_ptr() as usize));
                            pool.put(p);
                        }
                    }
                    done_ops.fetch_add(1, Ordering::Relaxed);
                }
                drop(tx);
                barrier.wait();
                while let Ok(p) = rx.try_recv() {
                    mine.push(p);
                }
                for p in mine {
                    held.lock().unwrap().remove(&(p.frame().as_ptr() as usize));
                    pool.put(p);
                }
            });
        }
        drop(txs);
    });
    let census = pool.census();
    ensure!(census == 64, "census {census}, expected 64");
    ensure!(
        pool.ownership_violations() == 0,
        "{} ownership violations",
        pool.ownership_violations()
    );
    ensure!(
        double.load(Ordering::Relaxed) == 0,
        "a packet was handed out twice"
    );
    pass(format!(
        "{} ops, census 64, {} steals, no violations",
        done_ops.load(Ordering::Relaxed),
        pool.steals()
    ))
}

// 6. Completion queue exactness.

fn cq_exactness() -> Outcome {
    const PRODUCERS: usize = 8;
    const PER: usize = 10_000;
    const POPPERS: usize = 4;
    let q = CompletionQueue::new(1024);
    let popped = AtomicUsize::new(0);
    let logs: Vec<Vec<(u32, u32)>> = std::thread::scope(|s| {
        for p in 0..PRODUCERS {
            let q = &q;
            s.spawn(move || {
                for i in 0..PER {
                    let mut st = Status::done(Rank(p as u32), Tag(i as u32), None, 0, 0);
                    while let Err(back) = q.push(st) {
                        st = back;
                        std::thread::yield_now();
                    }
                }
            });
        }
        let hs: Vec<_> = (0..POPPERS)
            .map(|_| {
                let (q, popped) = (&q, &popped);
                s.spawn(move || {
                    let mut log = Vec::new();
                    while popped.load(Ordering::Relaxed) < PRODUCERS * PER {
                        match q.try_pop() {
                            Some(st) => {
                                popped.fetch_add(1, Ordering::Relaxed);
                                log.push((st.rank.0, st.tag.0));
                            }
                            None => std::thread::yield_now(),
                        }
                    }
                    log
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (k, log) in logs.iter().enumerate() {
        let mut last = [None; PRODUCERS];
        for &(p, i) in log {
            let p = p as usize;
            ensure!(
                last[p].is_none_or(|l| l < i),
                "popper {k} saw producer {p} out of order"
            );
            last[p] = Some(i);
        }
    }
    let mut all: Vec<(u32, u32)> = logs.into_iter().flatten().collect();
    all.sort_unstable();
    let want: Vec<(u32, u32)> = (0..PRODUCERS as u32)
        .flat_map(|p| (0..PER as u32).map(move |i| (p, i)))
        .collect();
    ensure!(
        all == want,
        "popped multiset differs ({} items vs {})",
        all.len(),
        want.len()
    );
    ensure!(q.try_pop().is_none(), "queue not empty");
    pass(format!(
        "{} items, multiset equal, per-producer FIFO at every popper",
        PRODUCERS * PER
    ))
}

// 7. Graph ordering.

fn graph_ordering() -> Outcome {
    let mut rng = fastrand::Rng::with_seed(7);
    for case in 0..100 {
        let n = rng.usize(1..=32);
        let g = lcr::Graph::new();
        let order = Arc::new(Mutex::new(Vec::new()));
        let ids: Vec<_> = (0..n)
            .map(|i| {
                let order = order.clone();
                g.add_node(GraphAction::call(move || order.lock().unwrap().push(i)))
            })
            .collect::<lcr::Result<_>>()
            .map_err(lcr_err)?;
        // Edges only go from lower to higher index, so the graph is acyclic.
        let mut edges = Vec::new();
        for v in 1..n {
            for u in 0..v {
                if rng.u8(..) < 40 {
                    g.add_edge(ids[u], ids[v]).map_err(lcr_err)?;
                    edges.push((u, v));
                }
            }
        }
        g.start().map_err(lcr_err)?;
        ensure!(
            g.state() == GraphState::Done,
            "case {case}: graph of calls did not finish"
        );
        let order = order.lock().unwrap().clone();
        let mut pos = vec![usize::MAX; n];
        for (k, &i) in order.iter().enumerate() {
            ensure!(pos[i] == usize::MAX, "case {case}: node {i} fired twice");
            pos[i] = k;
        }
        ensure!(
            order.len() == n,
            "case {case}: {} of {n} nodes fired",
            order.len()
        );
        for (u, v) in edges {
            ensure!(
                pos[u] < pos[v],
                "case {case}: {v} fired before its predecessor {u}"
            );
        }
    }

    // Diamond: A -> (send, recv) -> D, with completions arriving on 8
    // progress threads.
    let rts = Runtime::loopback_world(2, Config::default()).map_err(lcr_err)?;
    let rounds = 50;
    let stop = AtomicBool::new(false);
    let result = std::thread::scope(|s| -> Result<(), String> {
        for k in 0..8 {
            let (rts, stop) = (&rts, &stop);
            s.spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    if rts[k % 2].progress().unwrap() == 0 {
                        std::thread::yield_now();
                    }
                }
            });
        }
        let run = || -> Result<(), String> {
            for round in 0..rounds {
                let tag = round as u32;
                let size = [10, 5000, 50_000][round % 3];
                let log = Arc::new(Mutex::new(Vec::new()));
                let peer_cq = rts[1].alloc_cq();
                rts[1]
                    .post_recv(Rank(0), vec![], &peer_cq)
                    .tag(tag)
                    .call()
                    .map_err(lcr_err)?;
                let sink = rts[1].alloc_counter();
                let g = rts[0].alloc_graph();
                let l = log.clone();
                let a = g
                    .add_node(GraphAction::call(move || l.lock().unwrap().push('A')))
                    .map_err(lcr_err)?;
                let (rt, l) = (rts[0].clone(), log.clone());
                let b = g
                    .add_node(GraphAction::post(move |c| {
                        l.lock().unwrap().push('B');
                        rt.post_send(Rank(1), pattern(size, 1), &c)
                            .tag(tag)
                            .allow_done(false)
                            .call()
                    }))
                    .map_err(lcr_err)?;
                let (rt, l) = (rts[0].clone(), log.clone());
                let c = g
                    .add_node(GraphAction::post(move |c| {
                        l.lock().unwrap().push('C');
                        rt.post_recv(Rank(1), vec![], &c).tag(tag).call()
                    }))
                    .map_err(lcr_err)?;
                let l = log.clone();
                let d = g
                    .add_node(GraphAction::call(move || l.lock().unwrap().push('D')))
                    .map_err(lcr_err)?;
                for (u, v) in [(a, b), (a, c), (b, d), (c, d)] {
                    g.add_edge(u, v).map_err(lcr_err)?;
                }
                g.start().map_err(lcr_err)?;
                let mut st = Status::posted();
                while st.is_posted() {
                    st = rts[1]
                        .post_send(Rank(0), pattern(size, 2), &sink)
                        .tag(tag)
                        .call()
                        .map_err(lcr_err)?;
                    if st.is_retry() {
                        st = Status::posted();
                        std::thread::yield_now();
                    } else {
                        break;
                    }
                }
                let start = Instant::now();
                while g.test().map_err(lcr_err)? != GraphState::Done {
                    ensure!(
                        start.elapsed() < Duration::from_secs(10),
                        "round {round}: diamond stuck"
                    );
                    std::thread::yield_now();
                }
                let log = log.lock().unwrap().clone();
                ensure!(
                    log.len() == 4 && log[0] == 'A' && log[3] == 'D',
                    "round {round}: firing order {log:?}"
                );
                let got = wait_until(|| pop(&peer_cq))?;
                ensure!(
                    got.size == size,
                    "round {round}: peer got {} bytes",
                    got.size
                );
            }
            Ok(())
        };
        let r = run();
        stop.store(true, Ordering::Relaxed);
        r
    });
    result?;
    finalize_world(rts).map_err(lcr_err)?;
    pass(format!(
        "100 random DAGs fire in a linear extension; {rounds} diamonds under 8 progress threads"
    ))
}

fn wait_until<T>(mut f: impl FnMut() -> Option<T>) -> Result<T, String> {
    let start = Instant::now();
    loop {
        if let Some(v) = f() {
            return Ok(v);
        }
        ensure!(start.elapsed() < Duration::from_secs(10), "timed out");
        std::thread::yield_now();
    }
}

// 8. Backlog and retry liveness.

fn retry_config() -> Config {
    Config {
        send_queue_depth: 1,
        packet_count: 2,
        prepost_count: 1,
        ..Config::default()
    }
}

/// Each rank runs `posters` threads on its default device, each sending
/// `msgs` messages to the peer and receiving as many. Returns the retry
/// reasons posts reported.
fn exchange(
    rts: &[Runtime],
    posters: usize,
    msgs: usize,
    allow_retry: bool,
    extra_progress: bool,
    limit: Duration,
) -> Result<HashSet<RetryReason>, String> {
    let reasons = Mutex::new(HashSet::new());
    let finished = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let deadline = Instant::now() + limit;
    let total = 2 * posters;
    std::thread::scope(|s| -> Result<(), String> {
        if extra_progress {
            for rt in rts {
                let stop = &stop;
                s.spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        let _ = rt.progress();
                        std::thread::yield_now();
                    }
                });
            }
        }
        let mut hs = Vec::new();
        for (r, rt) in rts.iter().enumerate() {
            for t in 0..posters {
                let (reasons, finished) = (&reasons, &finished);
                hs.push(s.spawn(move || -> Result<(), String> {
                    let dev = rt.default_device();
                    let peer = Rank(1 - r as u32);
                    let sent = rt.alloc_counter();
                    let rcq = rt.alloc_cq();
                    let (mut done_sends, mut got) = (0usize, 0usize);
                    let mut seen = HashSet::new();
                    let mut check = |st: Status, got: &mut usize| -> Result<(), String> {
                        let id = u64::from_le_bytes(
                            st.buffer.as_deref().unwrap_or_default()[..8]
                                .try_into()
                                .unwrap(),
                        );
                        ensure!(seen.insert(id), "duplicate message {id}");
                        *got += 1;
                        Ok(())
                    };
                    let (mut next_send, mut next_recv) = (0, 0);
                    let mut pending: Option<Vec<u8>> = None;
                    let mut mine = false;
                    while finished.load(Ordering::Acquire) < total {
                        if next_recv < msgs {
                            let st = rt
                                .post_recv(peer, vec![], &rcq)
                                .tag(t as u32)
                                .allow_retry(allow_retry)
                                .call()
                                .map_err(lcr_err)?;
                            if let Some(why) = st.retry_reason() {
                                return Err(format!("receive asked for retry {why:?}"));
                            }
                            if st.is_done() {
                                check(st, &mut got)?;
                            }
                            next_recv += 1;
                        }
                        if next_send < msgs {
                            let buf = pending.take().unwrap_or_else(|| {
                                let mut b =
                                    pattern([8, 40, 1000, 3000][next_send % 4], next_send as u64);
                                b[..8].copy_from_slice(&(next_send as u64).to_le_bytes());
                                b
                            });
                            let mut st = rt
                                .post_send(peer, buf, &sent)
                                .tag(t as u32)
                                .allow_retry(allow_retry)
                                .call()
                                .map_err(lcr_err)?;
                            match st.retry_reason() {
                                Some(why) => {
                                    ensure!(allow_retry, "retry {why:?} with allow_retry=false");
                                    reasons.lock().unwrap().insert(why);
                                    pending = st.take_buffer();
                                }
                                None => {
                                    done_sends += st.is_done() as usize;
                                    next_send += 1;
                                }
                            }
                        }
                        if rt.progress_device(dev).map_err(lcr_err)? == 0 && next_send == msgs {
                            std::thread::yield_now();
                        }
                        while let Some(st) = pop(&rcq) {
                            check(st, &mut got)?;
                        }
                        if !mine
                            && got == msgs
                            && done_sends + sent.as_counter().unwrap().get() as usize == msgs
                        {
                            mine = true;
                            finished.fetch_add(1, Ordering::AcqRel);
                        }
                        ensure!(
                            Instant::now() < deadline,
                            "rank {r} poster {t}: {got} of {msgs} received, {} sends complete",
                            done_sends + sent.as_counter().unwrap().get() as usize
                        );
                    }
                    Ok(())
                }));
            }
        }
        let r = hs
            .into_iter()
            .map(|h| h.join().expect("poster"))
            .collect::<Result<Vec<_>, _>>();
        stop.store(true, Ordering::Relaxed);
        r.map(|_| ())
    })?;
    Ok(reasons.into_inner().unwrap())
}

fn retry_liveness() -> Outcome {
    let rts = Runtime::loopback_world(2, retry_config()).map_err(lcr_err)?;
    let none = exchange(&rts, 1, 10_000, false, false, Duration::from_secs(25))?;
    ensure!(none.is_empty(), "allow_retry=false reported {none:?}");
    finalize_world(rts).map_err(lcr_err)?;

    let want: HashSet<_> = [
        RetryReason::PacketPoolEmpty,
        RetryReason::SendQueueFull,
        RetryReason::LockBusy,
    ]
    .into();
    let start = Instant::now();
    let mut seen = HashSet::new();
    let mut rounds = 0;
    // Lock contention depends on scheduling; repeat the exchange until all
    // three reasons have shown up or the budget runs out.
    while seen != want && start.elapsed() < Duration::from_secs(25) {
        let rts = Runtime::loopback_world(2, retry_config()).map_err(lcr_err)?;
        let msgs = if rounds == 0 { 5_000 } else { 1_000 };
        seen.extend(exchange(
            &rts,
            2,
            msgs,
            true,
            true,
            Duration::from_secs(20),
        )?);
        finalize_world(rts).map_err(lcr_err)?;
        rounds += 1;
        ensure!(seen.is_subset(&want), "unexpected retry reasons {seen:?}");
    }
    ensure!(seen == want, "observed {seen:?}, expected {want:?}");
    pass(format!(
        "10000 each way with allow_retry=false delivered; retries {{PacketPoolEmpty, SendQueueFull, LockBusy}} in {rounds} round(s)"
    ))
}

// 9. Out-of-order tolerance.

fn reorder_tolerance() -> Outcome {
    let n = protocol_sweep(Backend::Loopback, true)?;
    let s = stress(true)?;
    pass(format!("reordered: {n} sweep transfers byte-exact; {s}"))
}

// 10. Wildcard semantics.

fn wildcard_semantics() -> Outcome {
    let rts = Runtime::loopback_world(3, Config::default()).map_err(lcr_err)?;
    let target = &rts[2];
    let engine = target.default_matching_engine();
    let rcq = target.alloc_cq();
    let scq = rts[0].alloc_cq();
    let policies = [
        MatchingPolicy::RankTag,
        MatchingPolicy::RankOnly,
        MatchingPolicy::TagOnly,
    ];
    let mut rng = fastrand::Rng::with_seed(10);
    let (mut matched, mut unmatched) = (0, 0);
    for case in 0..1000u32 {
        let src = rng.u32(0..2);
        let recv_rank = rng.u32(0..2);
        let sp = policies[rng.usize(0..3)];
        let rp = policies[rng.usize(0..3)];
        // Tags and ranks are chosen so unmatched leftovers of one case can
        // never pair with a later one.
        let base = case * 4;
        let st_tag = base + rng.u32(0..2);
        let rt_tag = base + rng.u32(0..2);
        let expect = sp == rp
            && match sp {
                MatchingPolicy::RankTag => src == recv_rank && st_tag == rt_tag,
                MatchingPolicy::RankOnly => src == recv_rank,
                MatchingPolicy::TagOnly => st_tag == rt_tag,
            };
        let before = engine.len();
        let recv_first = rng.bool();
        let post_recv = || {
            target
                .post_recv(Rank(recv_rank), vec![], &rcq)
                .tag(rt_tag)
                .matching_policy(rp)
                .allow_done(false)
                .call()
        };
        if recv_first {
            post_recv().map_err(lcr_err)?;
        }
        rts[src as usize]
            .post_send(Rank(2), pattern(16, case as u64), &scq)
            .tag(st_tag)
            .matching_policy(sp)
            .call()
            .map_err(lcr_err)?;
        if !recv_first {
            pump(&rts, Duration::from_secs(5), || engine.len() == before + 1)?;
            post_recv().map_err(lcr_err)?;
        }
        let mut got = None;
        pump(&rts, Duration::from_secs(5), || {
            got = pop(&rcq);
            got.is_some() || engine.len() == before + 2
        })?;
        ensure!(
            got.is_some() == expect,
            "case {case}: send {src}/{st_tag}/{sp:?} vs recv {recv_rank}/{rt_tag}/{rp:?}: matched {} oracle {expect}",
            got.is_some()
        );
        let was_matched = got.is_some();
        if let Some(st) = got {
            ensure!(
                st.rank == Rank(src) && st.tag == Tag(st_tag),
                "case {case}: wrong envelope"
            );
            matched += 1;
        } else {
            unmatched += 1;
        }
        clear_leftovers(
            &rts,
            &rcq,
            case,
            src,
            sp,
            st_tag,
            recv_rank,
            rp,
            rt_tag,
            was_matched,
        )?;
    }
    finalize_world(rts).map_err(lcr_err)?;
    pass(format!(
        "1000 cases agree with the oracle ({matched} matched, {unmatched} not)"
    ))
}

/// Pair off whatever a non-matching case left in the engine so later cases
/// start clean.
#[allow(clippy::too_many_arguments)]
fn clear_leftovers(
    rts: &[Runtime],
    rcq: &Comp,
    case: u32,
    src: u32,
    sp: MatchingPolicy,
    st_tag: u32,
    recv_rank: u32,
    rp: MatchingPolicy,
    rt_tag: u32,
    matched: bool,
) -> Result<(), String> {
    if matched {
        return Ok(());
    }
    let target = &rts[2];
    let engine = target.default_matching_engine();
    // A receive identical in key to the send consumes it.
    target
        .post_recv(Rank(src), vec![], rcq)
        .tag(st_tag)
        .matching_policy(sp)
        .allow_done(false)
        .call()
        .map_err(lcr_err)?;
    // A send identical in key to the receive satisfies it.
    let scq = rts[recv_rank as usize].alloc_cq();
    rts[recv_rank as usize]
        .post_send(Rank(2), pattern(16, 0), &scq)
        .tag(rt_tag)
        .matching_policy(rp)
        .call()
        .map_err(lcr_err)?;
    let mut n = 0;
    pump(rts, Duration::from_secs(5), || {
        while pop(rcq).is_some() {
            n += 1;
        }
        n == 2
    })
    .map_err(|e| format!("case {case}: cleanup: {e}"))?;
    ensure!(
        engine.is_empty(),
        "case {case}: {} entries left after cleanup",
        engine.len()
    );
    Ok(())
}

// 11. Performance smoke.

fn msgrate_at(threads: usize) -> Result<f64, String> {
    let mut cfg = BenchConfig::new(Benchmark::Msgrate);
    cfg.threads = vec![threads];
    cfg.iterations = 3000;
    cfg.resource_mode = ResourceMode::Dedicated;
    let report =
        lcr_bench::pingpong::run_threads(&cfg, &Config::default()).map_err(|e| e.to_string())?;
    Ok(report.rows[0].rate.mean)
}

fn perf_smoke() -> Outcome {
    let best = |res, threads, iters| -> Result<f64, String> {
        let mut b: f64 = 0.0;
        for _ in 0..3 {
            b = b.max(resource::throughput(res, threads, iters).map_err(|e| e.to_string())?);
        }
        Ok(b)
    };
    let p1 = best(Resource::PacketPool, 1, 200_000)?;
    let p8 = best(Resource::PacketPool, 8, 200_000)?;
    let m1 = msgrate_at(1)?;
    let m8 = msgrate_at(8)?;
    let (pr, mr) = (p8 / p1, m8 / m1);
    let detail = format!("pool 8t/1t = {pr:.2} (need 4), msgrate 8t/1t = {mr:.2} (need 2)");
    if pr >= 4.0 && mr >= 2.0 {
        return pass(detail);
    }
    let cpus = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    if cpus < 8 {
        Ok(Verdict::Warn(format!(
            "{detail}; only {cpus} CPU(s), scaling is not measurable here"
        )))
    } else {
        Err(detail)
    }
}

// 12. RPC demo over TCP.

fn rpc_demo() -> Outcome {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_bench"))
        .args([
            "demo",
            "--mode",
            "process",
            "--threads",
            "2",
            "--iters",
            "10000",
        ])
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure!(
        out.status.success(),
        "demo exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let want = "demo ok: 20000 sent, 20000 freed, 20000 received, 0 duplicates, 0 corrupt";
    ensure!(stdout.trim() == want, "demo printed {stdout:?}");
    pass("2 TCP ranks x 10000 RPCs: every buffer freed once, every message polled once")
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let secs = Duration::from_secs;
    let all = [
        Criterion {
            id: 1,
            name: "paradigm matrix",
            limit: secs(5),
            run: paradigm_matrix,
        },
        Criterion {
            id: 2,
            name: "protocol sweep",
            limit: secs(30),
            run: criterion_protocol_sweep,
        },
        Criterion {
            id: 3,
            name: "concurrency stress",
            limit: secs(60),
            run: || stress(false).map(Verdict::Pass),
        },
        Criterion {
            id: 4,
            name: "matching oracle",
            limit: secs(60),
            run: matching_oracle,
        },
        Criterion {
            id: 5,
            name: "packet conservation",
            limit: secs(30),
            run: packet_conservation,
        },
        Criterion {
            id: 6,
            name: "completion queue exactness",
            limit: secs(30),
            run: cq_exactness,
        },
        Criterion {
            id: 7,
            name: "graph ordering",
            limit: secs(30),
            run: graph_ordering,
        },
        Criterion {
            id: 8,
            name: "backlog and retry liveness",
            limit: secs(60),
            run: retry_liveness,
        },
        Criterion {
            id: 9,
            name: "out-of-order tolerance",
            limit: secs(90),
            run: reorder_tolerance,
        },
        Criterion {
            id: 10,
            name: "wildcard semantics",
            limit: secs(60),
            run: wildcard_semantics,
        },
        Criterion {
            id: 11,
            name: "performance smoke",
            limit: secs(120),
            run: perf_smoke,
        },
        Criterion {
            id: 12,
            name: "rpc demo",
            limit: secs(60),
            run: rpc_demo,
        },
    ];
    // Ignore harness flags such as --nocapture; numbers select criteria.
    let only: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for c in all
        .iter()
        .filter(|c| only.is_empty() || only.contains(&c.id))
    {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(_) if took > c.limit => Err(format!("took {took:.1?}, limit {:?}", c.limit)),
            o => o,
        };
        let (word, detail) = match outcome {
            Ok(Verdict::Pass(d)) => ("PASS", d),
            Ok(Verdict::Warn(d)) => ("WARN", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{word} {:>2} {:<28} {:>7.2}s  {detail}",
            c.id,
            c.name,
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
