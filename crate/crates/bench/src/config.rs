use std::fmt;
use std::str::FromStr;

use lcr::BackendKind;

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    Msgrate,
    Bandwidth,
    Resource,
    Demo,
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Benchmark::Msgrate => "msgrate",
            Benchmark::Bandwidth => "bandwidth",
            Benchmark::Resource => "resource",
            Benchmark::Demo => "demo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Mode {
    /// One process; ranks and workers are threads.
    #[default]
    Thread,
    /// One TCP rank per worker, spawned as local processes.
    Process,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum ResourceMode {
    /// Each worker owns a device.
    #[default]
    Dedicated,
    /// All workers go through the runtime's default device.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Output {
    #[default]
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Backend {
    #[default]
    Loopback,
    Tcp,
}

impl From<Backend> for BackendKind {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Loopback => BackendKind::Loopback,
            Backend::Tcp => BackendKind::Tcp,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Thread => "thread",
            Mode::Process => "process",
        })
    }
}

impl fmt::Display for ResourceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResourceMode::Dedicated => "dedicated",
            ResourceMode::Shared => "shared",
        })
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Loopback => "loopback",
            Backend::Tcp => "tcp",
        })
    }
}

impl FromStr for Backend {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        match s {
            "loopback" => Ok(Backend::Loopback),
            "tcp" => Ok(Backend::Tcp),
            _ => Err(BenchError::Usage(format!("unknown backend {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub benchmark: Benchmark,
    pub mode: Mode,
    pub resource_mode: ResourceMode,
    /// Worker counts; one run per entry.
    pub threads: Vec<usize>,
    pub iterations: usize,
    pub sizes: Vec<usize>,
    /// Fraction of iterations excluded from timing.
    pub warmup: f64,
    pub reps: usize,
    pub output: Output,
    pub backend: Backend,
    pub verify: bool,
}

impl BenchConfig {
    pub fn new(benchmark: Benchmark) -> Self {
        BenchConfig {
            benchmark,
            mode: Mode::Thread,
            resource_mode: ResourceMode::Dedicated,
            threads: vec![1],
            iterations: 1000,
            sizes: match benchmark {
                Benchmark::Bandwidth => bandwidth_sweep(),
                _ => vec![8],
            },
            warmup: 0.1,
            reps: 3,
            output: Output::Table,
            backend: Backend::Loopback,
            verify: false,
        }
    }

    pub fn warmup_iters(&self) -> usize {
        (self.iterations as f64 * self.warmup) as usize
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let usage = |m: &str| Err(BenchError::Usage(m.into()));
        if self.threads.is_empty() || self.threads.contains(&0) {
            return usage("thread counts must be positive");
        }
        if self.iterations == 0 {
            return usage("iterations must be positive");
        }
        if self.sizes.is_empty() {
            return usage("at least one message size is needed");
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return usage("warmup must be a fraction in [0, 1)");
        }
        if self.reps < 3 {
            return usage("at least 3 repetitions are needed for a standard deviation");
        }
        if self.iterations - self.warmup_iters() == 0 {
            return usage("warmup leaves no timed iterations");
        }
        Ok(())
    }
}

/// Powers of two from 16 B to 1 MiB.
pub fn bandwidth_sweep() -> Vec<usize> {
    (4..=20).map(|p| 1usize << p).collect()
}

/// Parse `8,64,4K,1M` style lists. `K` and `M` are binary multiples.
pub fn parse_sizes(s: &str) -> Result<Vec<usize>, BenchError> {
    s.split(',')
        .map(|t| {
            let t = t.trim();
            let (num, mul) = match t.chars().last() {
                Some('k' | 'K') => (&t[..t.len() - 1], 1 << 10),
                Some('m' | 'M') => (&t[..t.len() - 1], 1 << 20),
                _ => (t, 1),
            };
            num.parse::<usize>()
                .map(|n| n * mul)
                .map_err(|_| BenchError::Usage(format!("bad size {t:?}")))
        })
        .collect()
}

pub fn parse_counts(s: &str) -> Result<Vec<usize>, BenchError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| BenchError::Usage(format!("bad count {t:?}")))
        })
        .collect()
}
