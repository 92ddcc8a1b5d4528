//! Microbenchmarks and an RPC demo for the `lcr` runtime.

pub mod config;
pub mod demo;
pub mod launcher;
pub mod pingpong;
pub mod report;
pub mod resource;
pub mod world;

use std::ffi::OsString;

use config::{BenchConfig, Benchmark, Mode};
use report::Report;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("{0}")]
    Rank(String),
    #[error(transparent)]
    Runtime(#[from] lcr::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BenchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Ranks in a demo world.
pub const DEMO_RANKS: u32 = 2;

/// Runtime configuration from the `LCR_*` environment, with the backend
/// chosen on the command line.
pub fn runtime_config(cfg: &BenchConfig) -> Result<lcr::Config, BenchError> {
    let mut c = lcr::Config::from_env().map_err(|e| BenchError::Usage(e.to_string()))?;
    c.backend = cfg.backend.into();
    Ok(c)
}

pub fn run_msgrate(cfg: &BenchConfig) -> Result<Report, BenchError> {
    pingpong::run_threads(cfg, &runtime_config(cfg)?)
}

pub fn run_bandwidth(cfg: &BenchConfig) -> Result<Report, BenchError> {
    pingpong::run_threads(cfg, &runtime_config(cfg)?)
}

pub fn run_resource(cfg: &BenchConfig) -> Result<Report, BenchError> {
    resource::run(cfg)
}

/// Thread-mode demo: all ranks in this process, `cfg.threads[0]` threads
/// each, `cfg.iterations` RPCs to every peer.
pub fn run_demo(cfg: &BenchConfig) -> Result<demo::DemoSummary, BenchError> {
    cfg.validate()?;
    let threads = cfg.threads[0];
    let rts = world::make_world(cfg.backend, DEMO_RANKS, &runtime_config(cfg)?)?;
    let sums = std::thread::scope(|s| {
        let hs: Vec<_> = rts
            .into_iter()
            .map(|rt| {
                s.spawn(move || -> lcr::Result<_> {
                    let b = demo::RpcBackend::global_init(rt)?;
                    let sum = demo::run_rank(&b, threads, cfg.iterations)?;
                    b.global_fina()?;
                    Ok(sum)
                })
            })
            .collect();
        hs.into_iter()
            .map(|h| h.join().expect("demo rank"))
            .collect::<lcr::Result<Vec<_>>>()
    })?;
    let expected = cfg.iterations as u64 * (DEMO_RANKS as u64 - 1);
    let mut total = demo::DemoSummary::default();
    for s in &sums {
        s.check(expected, expected)?;
        total = add(total, *s);
    }
    Ok(total)
}

fn add(a: demo::DemoSummary, b: demo::DemoSummary) -> demo::DemoSummary {
    demo::DemoSummary {
        sent: a.sent + b.sent,
        freed: a.freed + b.freed,
        double_frees: a.double_frees + b.double_frees,
        received: a.received + b.received,
        duplicates: a.duplicates + b.duplicates,
        corrupt: a.corrupt + b.corrupt,
    }
}

/// What a run printed: a benchmark report or a demo summary.
#[derive(Debug)]
pub enum Outcome {
    Report(Report),
    Demo(demo::DemoSummary),
}

/// Run `cfg` in the current process (thread mode).
pub fn run(cfg: &BenchConfig) -> Result<Outcome, BenchError> {
    match cfg.benchmark {
        Benchmark::Msgrate => run_msgrate(cfg).map(Outcome::Report),
        Benchmark::Bandwidth => run_bandwidth(cfg).map(Outcome::Report),
        Benchmark::Resource => run_resource(cfg).map(Outcome::Report),
        Benchmark::Demo => run_demo(cfg).map(Outcome::Demo),
    }
}

/// Process mode, parent side: one TCP rank per worker (two per pair for
/// ping-pong), then aggregate what the ranks printed. `args` are passed to
/// every rank unchanged.
pub fn run_processes(cfg: &BenchConfig, args: &[OsString]) -> Result<Outcome, BenchError> {
    cfg.validate()?;
    match cfg.benchmark {
        Benchmark::Msgrate | Benchmark::Bandwidth => {
            let mut report = Report::default();
            for &pairs in &cfg.threads {
                let outs = launcher::launch(2 * pairs as u32, args)?;
                let lines: Vec<_> = outs
                    .iter()
                    .flat_map(|o| o.lines())
                    .filter_map(pingpong::RankLine::decode)
                    .collect();
                report
                    .rows
                    .extend(pingpong::aggregate(cfg, pairs, &lines)?.rows);
            }
            Ok(Outcome::Report(report))
        }
        Benchmark::Demo => {
            let outs = launcher::launch(DEMO_RANKS, args)?;
            let expected = cfg.iterations as u64 * (DEMO_RANKS as u64 - 1);
            let mut total = demo::DemoSummary::default();
            let mut seen = 0;
            for s in outs
                .iter()
                .flat_map(|o| o.lines())
                .filter_map(demo::DemoSummary::decode)
            {
                s.check(expected, expected)?;
                total = add(total, s);
                seen += 1;
            }
            if seen != DEMO_RANKS {
                return Err(BenchError::Verify(format!(
                    "{seen} of {DEMO_RANKS} ranks reported"
                )));
            }
            Ok(Outcome::Demo(total))
        }
        Benchmark::Resource => Err(BenchError::Usage(
            "the resource benchmark runs in thread mode only".into(),
        )),
    }
}

/// Process mode, rank side. Prints this rank's result lines on stdout.
pub fn run_rank(cfg: &BenchConfig, env: &launcher::RankEnv) -> Result<(), BenchError> {
    use lcr::backend::tcp::{Bootstrap, TcpConfig};
    let mut rcfg = runtime_config(cfg)?;
    rcfg.backend = lcr::BackendKind::Tcp;
    let tcp = TcpConfig::new(
        env.rank,
        env.world,
        Bootstrap::RendezvousFile(env.rendezvous.clone()),
    );
    let rt = lcr::Runtime::tcp(rcfg, &tcp)?;
    match cfg.benchmark {
        Benchmark::Msgrate | Benchmark::Bandwidth => {
            let lines = pingpong::process_rank(cfg, &rt)?;
            rt.fina()?;
            for l in lines {
                println!("{}", l.encode());
            }
        }
        Benchmark::Demo => {
            let b = demo::RpcBackend::global_init(rt)?;
            let sum = demo::run_rank(&b, cfg.threads[0], cfg.iterations)?;
            b.global_fina()?;
            println!("{}", sum.encode());
        }
        Benchmark::Resource => {
            return Err(BenchError::Usage(
                "the resource benchmark runs in thread mode only".into(),
            ))
        }
    }
    Ok(())
}

/// True when `cfg` asks for separate processes.
pub fn is_process_mode(cfg: &BenchConfig) -> bool {
    cfg.mode == Mode::Process
}
