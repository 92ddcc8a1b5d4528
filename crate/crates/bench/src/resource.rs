//! Throughput of individual runtime resources under thread contention.

use std::fmt;
use std::sync::Barrier;
use std::time::Instant;

use lcr::completion::CompletionQueue;
use lcr::matching::{make_key, EntryKind, MatchingEngine};
use lcr::{MatchingPolicy, PacketPool, Rank, Status, Tag};

use crate::config::BenchConfig;
use crate::report::{Report, Row, Summary};
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resource {
    /// Completion queue push then pop.
    CompletionQueue,
    /// Matching engine send insert then matching receive insert.
    MatchingEngine,
    /// Packet pool get then put.
    PacketPool,
}

pub const ALL: [Resource; 3] = [
    Resource::CompletionQueue,
    Resource::MatchingEngine,
    Resource::PacketPool,
];

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Resource::CompletionQueue => "cq",
            Resource::MatchingEngine => "matching",
            Resource::PacketPool => "pool",
        })
    }
}

/// Run `body(thread)` on `threads` threads released together; returns the
/// span from the first thread starting to the last one finishing, in
/// seconds.
fn timed(threads: usize, body: impl Fn(usize) + Sync) -> f64 {
    let barrier = Barrier::new(threads);
    let spans: Vec<(Instant, Instant)> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..threads)
            .map(|t| {
                let (barrier, body) = (&barrier, &body);
                s.spawn(move || {
                    barrier.wait();
                    let start = Instant::now();
                    body(t);
                    (start, Instant::now())
                })
            })
            .collect();
        hs.into_iter()
            .map(|h| h.join().expect("resource worker"))
            .collect()
    });
    let first = spans
        .iter()
        .map(|s| s.0)
        .min()
        .expect("at least one thread");
    let last = spans
        .iter()
        .map(|s| s.1)
        .max()
        .expect("at least one thread");
    (last - first).as_secs_f64()
}

/// Pairs per second across all threads, with each thread doing `iters`
/// pairs. Errors if the resource broke an invariant.
pub fn throughput(res: Resource, threads: usize, iters: usize) -> Result<f64, BenchError> {
    let secs = match res {
        Resource::CompletionQueue => {
            let q = CompletionQueue::new(1 << 16);
            timed(threads, |t| {
                for i in 0..iters {
                    let mut st = Status::done(Rank(t as u32), Tag(i as u32), None, 0, 0);
                    while let Err(back) = q.push(st) {
                        st = back;
                        std::thread::yield_now();
                    }
                    while q.try_pop().is_none() {
                        std::hint::spin_loop();
                    }
                }
            })
        }
        Resource::MatchingEngine => {
            let engine = MatchingEngine::<usize>::new();
            let failures = std::sync::atomic::AtomicUsize::new(0);
            let secs = timed(threads, |t| {
                for i in 0..iters {
                    let key = make_key(
                        Rank(t as u32),
                        Tag((i & 1023) as u32),
                        MatchingPolicy::RankTag,
                    );
                    engine.insert(key, EntryKind::Send, i);
                    if engine.insert(key, EntryKind::Recv, i) != Some(i) {
                        failures.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    }
                }
            });
            let failures = failures.into_inner();
            if failures > 0 || !engine.is_empty() {
                return Err(BenchError::Verify(format!(
                    "{failures} mismatched pairs in matching engine"
                )));
            }
            secs
        }
        Resource::PacketPool => {
            let count = 64 * threads;
            let pool = PacketPool::new(count, 64);
            let secs = timed(threads, |_| {
                for _ in 0..iters {
                    match pool.get() {
                        Some(p) => pool.put(p),
                        None => std::thread::yield_now(),
                    }
                }
            });
            if pool.census() != count || pool.ownership_violations() != 0 {
                return Err(BenchError::Verify(format!(
                    "packet census {} of {count}, {} ownership violations",
                    pool.census(),
                    pool.ownership_violations()
                )));
            }
            secs
        }
    };
    Ok((threads * iters) as f64 / secs.max(1e-9))
}

pub fn run(cfg: &BenchConfig) -> Result<Report, BenchError> {
    cfg.validate()?;
    let mut report = Report::default();
    for res in ALL {
        for &threads in &cfg.threads {
            // Warm up once, untimed.
            throughput(
                res,
                threads,
                ((cfg.iterations as f64 * cfg.warmup) as usize).max(1),
            )?;
            let samples = (0..cfg.reps)
                .map(|_| throughput(res, threads, cfg.iterations))
                .collect::<Result<Vec<_>, _>>()?;
            report.rows.push(Row {
                benchmark: cfg.benchmark.to_string(),
                mode: "thread".into(),
                resource_mode: "-".into(),
                resource: res.to_string(),
                threads,
                size: 0,
                reps: samples.len(),
                rate: Summary::of(&samples),
                bandwidth: Summary::default(),
            });
        }
    }
    Ok(report)
}
