//! In-process worlds and small helpers for driving posts to completion.

use std::time::{Duration, Instant};

use lcr::backend::tcp::{Bootstrap, TcpConfig};
use lcr::{Comp, Config, Device, Result, Runtime, Status};

use crate::config::Backend;

/// All ranks of a world inside this process. TCP ranks bootstrap through
/// a temporary rendezvous file, each on its own thread.
pub fn make_world(backend: Backend, world: u32, config: &Config) -> Result<Vec<Runtime>> {
    match backend {
        Backend::Loopback => Runtime::loopback_world(world, config.clone()),
        Backend::Tcp => {
            let dir = tempfile::tempdir()?;
            let file = dir.path().join("ranks");
            std::thread::scope(|s| {
                let hs: Vec<_> = (0..world)
                    .map(|r| {
                        let file = file.clone();
                        s.spawn(move || {
                            let tcp = TcpConfig::new(r, world, Bootstrap::RendezvousFile(file));
                            Runtime::tcp(config.clone(), &tcp)
                        })
                    })
                    .collect();
                hs.into_iter()
                    .map(|h| h.join().expect("bootstrap thread"))
                    .collect()
            })
        }
    }
}

/// Finalize every rank concurrently (finalize is collective).
pub fn finalize_world(rts: Vec<Runtime>) -> Result<()> {
    std::thread::scope(|s| {
        let hs: Vec<_> = rts.iter().map(|rt| s.spawn(move || rt.fina())).collect();
        hs.into_iter()
            .try_for_each(|h| h.join().expect("fina thread"))
    })
}

const STUCK: Duration = Duration::from_secs(120);

/// Keep resubmitting `post` while it asks for a retry, progressing `dev`
/// in between. `post` receives the buffer handed back by the last retry.
pub fn post_until_accepted(
    rt: &Runtime,
    dev: &Device,
    mut buf: Vec<u8>,
    mut post: impl FnMut(Vec<u8>) -> Result<Status>,
) -> Result<Status> {
    let start = Instant::now();
    loop {
        let mut st = post(buf)?;
        if !st.is_retry() {
            return Ok(st);
        }
        buf = st.take_buffer().unwrap_or_default();
        rt.progress_device(dev)?;
        if start.elapsed() > STUCK {
            return Err(lcr::Error::fatal("post kept asking for a retry"));
        }
    }
}

/// Progress `dev` until `cq` yields a status.
pub fn wait_cq(rt: &Runtime, dev: &Device, cq: &Comp) -> Result<Status> {
    let q = cq.as_queue().expect("completion queue");
    let start = Instant::now();
    loop {
        if let Some(s) = q.try_pop() {
            return Ok(s);
        }
        if rt.progress_device(dev)? == 0 {
            std::thread::yield_now();
        }
        if start.elapsed() > STUCK {
            return Err(lcr::Error::fatal("no completion arrived"));
        }
    }
}

/// Wait for a post's outcome: DONE returns at once, POSTED waits on `cq`.
pub fn complete(rt: &Runtime, dev: &Device, cq: &Comp, st: Status) -> Result<Status> {
    if st.is_done() {
        Ok(st)
    } else {
        wait_cq(rt, dev, cq)
    }
}

/// 64-bit FNV-1a.
pub fn checksum(data: &[u8]) -> u64 {
    data.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Deterministic payload for `(seed, len)`.
pub fn fill_pattern(buf: &mut [u8], seed: u64) {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    for b in buf.iter_mut() {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        *b = x as u8;
    }
}

pub fn pattern(len: usize, seed: u64) -> Vec<u8> {
    let mut v = vec![0; len];
    fill_pattern(&mut v, seed);
    v
}
