//! Ping-pong message rate and bandwidth.

use std::time::{Duration, Instant};

use lcr::{Config, Device, Rank, Runtime, Tag};

use crate::config::{BenchConfig, Benchmark, Mode, ResourceMode};
use crate::report::{Report, Row, Summary};
use crate::world::{complete, fill_pattern, finalize_world, make_world, post_until_accepted};
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairResult {
    /// Time for the iterations after warmup.
    pub elapsed: Duration,
    pub sent: u64,
    pub received: u64,
    /// Received messages whose size or bytes were wrong (only checked with
    /// verification on, sizes always).
    pub corrupt: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct PairSpec {
    pub size: usize,
    pub iters: usize,
    pub warmup: usize,
    pub verify: bool,
}

fn seed(tag: Tag, from_initiator: bool, i: usize) -> u64 {
    ((tag.0 as u64) << 40) | ((from_initiator as u64) << 32) | i as u64
}

/// One side of a ping-pong pair. The initiator sends first.
pub fn pingpong(
    rt: &Runtime,
    dev: &Device,
    peer: Rank,
    tag: Tag,
    initiator: bool,
    spec: PairSpec,
) -> lcr::Result<PairResult> {
    let scq = rt.alloc_cq();
    let rcq = rt.alloc_cq();
    let mut sbuf = vec![0u8; spec.size];
    let mut rbuf = Vec::with_capacity(spec.size);
    let mut expect = vec![0u8; if spec.verify { spec.size } else { 0 }];
    let mut res = PairResult::default();
    let mut start = Instant::now();
    for i in 0..spec.iters {
        if i == spec.warmup {
            start = Instant::now();
        }
        for step in 0..2 {
            if (step == 0) == initiator {
                if spec.verify {
                    fill_pattern(&mut sbuf, seed(tag, initiator, i));
                }
                let st = post_until_accepted(rt, dev, sbuf, |b| {
                    rt.post_send(peer, b, &scq).tag(tag).device(dev).call()
                })?;
                let st = complete(rt, dev, &scq, st)?;
                sbuf = st.buffer.unwrap_or_default();
                res.sent += 1;
            } else {
                let st = post_until_accepted(rt, dev, rbuf, |b| {
                    rt.post_recv(peer, b, &rcq).tag(tag).device(dev).call()
                })?;
                let st = complete(rt, dev, &rcq, st)?;
                let buf = st.buffer.unwrap_or_default();
                let mut ok = st.size == spec.size && st.rank == peer && st.tag == tag;
                if spec.verify {
                    fill_pattern(&mut expect, seed(tag, !initiator, i));
                    ok &= buf == expect;
                }
                res.corrupt += !ok as u64;
                res.received += 1;
                rbuf = buf;
            }
        }
    }
    res.elapsed = start.elapsed();
    Ok(res)
}

/// Combine one repetition's initiator results into a unidirectional rate.
pub fn rate(initiators: &[PairResult], timed_iters: usize) -> f64 {
    let slowest = initiators
        .iter()
        .map(|r| r.elapsed)
        .max()
        .unwrap_or_default();
    let msgs = (timed_iters * initiators.len()) as f64;
    msgs / slowest.as_secs_f64().max(1e-9)
}

fn row(cfg: &BenchConfig, threads: usize, size: usize, samples: &[f64]) -> Row {
    let rate = Summary::of(samples);
    let bw: Vec<f64> = samples.iter().map(|r| r * size as f64).collect();
    Row {
        benchmark: cfg.benchmark.to_string(),
        mode: cfg.mode.to_string(),
        resource_mode: if cfg.mode == Mode::Process {
            "-".into()
        } else {
            cfg.resource_mode.to_string()
        },
        resource: String::new(),
        threads,
        size,
        reps: samples.len(),
        rate,
        bandwidth: Summary::of(&bw),
    }
}

/// Check the per-repetition message audit.
pub fn audit(results: &[PairResult], iters: usize) -> Result<(), BenchError> {
    let corrupt: u64 = results.iter().map(|r| r.corrupt).sum();
    if corrupt > 0 {
        return Err(BenchError::Verify(format!("{corrupt} corrupted messages")));
    }
    for r in results {
        if r.sent != iters as u64 || r.received != iters as u64 {
            return Err(BenchError::Verify(format!(
                "worker sent {} and received {} of {iters} messages",
                r.sent, r.received
            )));
        }
    }
    Ok(())
}

/// Thread mode: a 2-rank world in this process with `threads` ping-pong
/// pairs across it.
pub fn run_threads(cfg: &BenchConfig, rcfg: &Config) -> Result<Report, BenchError> {
    cfg.validate()?;
    let mut report = Report::default();
    let spec_for = |size| PairSpec {
        size,
        iters: cfg.iterations,
        warmup: cfg.warmup_iters(),
        verify: cfg.verify,
    };
    for &threads in &cfg.threads {
        let rts = make_world(cfg.backend, 2, rcfg)?;
        let mut devs = Vec::new();
        for rt in &rts {
            let mut v = Vec::new();
            for _ in 0..threads {
                v.push(match cfg.resource_mode {
                    ResourceMode::Dedicated => rt.alloc_device()?,
                    ResourceMode::Shared => rt.default_device().clone(),
                });
            }
            devs.push(v);
        }
        for &size in &cfg.sizes {
            let spec = spec_for(size);
            let mut samples = Vec::new();
            for _ in 0..cfg.reps {
                let results = std::thread::scope(|s| {
                    let mut hs = Vec::new();
                    for (r, rt) in rts.iter().enumerate() {
                        for (w, dev) in devs[r].iter().enumerate() {
                            let peer = Rank(1 - r as u32);
                            hs.push(s.spawn(move || {
                                pingpong(rt, dev, peer, Tag(w as u32), r == 0, spec)
                            }));
                        }
                    }
                    hs.into_iter()
                        .map(|h| h.join().expect("worker"))
                        .collect::<lcr::Result<Vec<_>>>()
                })?;
                audit(&results, cfg.iterations)?;
                samples.push(rate(&results[..threads], cfg.iterations - spec.warmup));
            }
            report.rows.push(row(cfg, threads, size, &samples));
        }
        finalize_world(rts)?;
    }
    Ok(report)
}

/// One result line printed by a process-mode rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankLine {
    pub size: usize,
    pub rep: usize,
    pub initiator: bool,
    pub result: PairResult,
}

impl RankLine {
    pub fn encode(&self) -> String {
        format!(
            "pingpong {} {} {} {} {} {} {}",
            self.size,
            self.rep,
            self.initiator as u8,
            self.result.elapsed.as_nanos(),
            self.result.sent,
            self.result.received,
            self.result.corrupt
        )
    }

    pub fn decode(line: &str) -> Option<RankLine> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 || f[0] != "pingpong" {
            return None;
        }
        let n = |i: usize| f[i].parse::<u64>().ok();
        Some(RankLine {
            size: n(1)? as usize,
            rep: n(2)? as usize,
            initiator: n(3)? == 1,
            result: PairResult {
                elapsed: Duration::from_nanos(n(4)?),
                sent: n(5)?,
                received: n(6)?,
                corrupt: n(7)?,
            },
        })
    }
}

/// Body of one process-mode rank: pair with the rank half a world away.
pub fn process_rank(cfg: &BenchConfig, rt: &Runtime) -> Result<Vec<RankLine>, BenchError> {
    let world = rt.rank_n();
    let me = rt.rank_me().0;
    let half = world / 2;
    let peer = Rank((me + half) % world);
    let initiator = me < half;
    let dev = rt.default_device().clone();
    let mut out = Vec::new();
    for &size in &cfg.sizes {
        let spec = PairSpec {
            size,
            iters: cfg.iterations,
            warmup: cfg.warmup_iters(),
            verify: cfg.verify,
        };
        for rep in 0..cfg.reps {
            let result = pingpong(rt, &dev, peer, Tag(0), initiator, spec)?;
            out.push(RankLine {
                size,
                rep,
                initiator,
                result,
            });
        }
    }
    Ok(out)
}

/// Aggregate all ranks' lines of one process-mode run.
pub fn aggregate(
    cfg: &BenchConfig,
    pairs: usize,
    lines: &[RankLine],
) -> Result<Report, BenchError> {
    let mut report = Report::default();
    let all: Vec<PairResult> = lines.iter().map(|l| l.result).collect();
    audit(&all, cfg.iterations)?;
    for &size in &cfg.sizes {
        let mut samples = Vec::new();
        for rep in 0..cfg.reps {
            let init: Vec<PairResult> = lines
                .iter()
                .filter(|l| l.size == size && l.rep == rep && l.initiator)
                .map(|l| l.result)
                .collect();
            if init.len() != pairs {
                return Err(BenchError::Verify(format!(
                    "expected {pairs} initiator results for size {size}, got {}",
                    init.len()
                )));
            }
            samples.push(rate(&init, cfg.iterations - cfg.warmup_iters()));
        }
        report.rows.push(row(cfg, pairs, size, &samples));
    }
    Ok(report)
}

pub fn is_pingpong(b: Benchmark) -> bool {
    matches!(b, Benchmark::Msgrate | Benchmark::Bandwidth)
}
