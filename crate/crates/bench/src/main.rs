use std::ffi::OsString;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use lcr_bench::config::{
    parse_counts, parse_sizes, Backend, BenchConfig, Benchmark, Mode, Output, ResourceMode,
};
use lcr_bench::{launcher, BenchError, Outcome};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// 8-byte ping-pong message rate.
    Msgrate,
    /// Ping-pong bandwidth over a size sweep.
    Bandwidth,
    /// Throughput of completion queues, matching engines and packet pools.
    Resource,
    /// Active-message RPC library demo with a send/free/receive audit.
    Demo,
}

#[derive(Debug, Parser)]
#[command(
    name = "bench",
    about = "Microbenchmarks for the lcr communication runtime"
)]
struct Args {
    command: Command,
    #[arg(long, value_enum, default_value_t = Mode::Thread)]
    mode: Mode,
    #[arg(long, value_enum, default_value_t = ResourceMode::Dedicated)]
    resource_mode: ResourceMode,
    /// Worker counts, comma separated. In process mode, ping-pong pairs.
    #[arg(long)]
    threads: Option<String>,
    /// Iterations per worker (ping-pongs, resource op pairs, or RPCs per peer).
    #[arg(long)]
    iters: Option<usize>,
    /// Message sizes, comma separated, with optional K/M suffix.
    #[arg(long)]
    sizes: Option<String>,
    /// Also run eager_threshold - 1 and eager_threshold + 1.
    #[arg(long)]
    boundary: bool,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    #[arg(long, value_enum, default_value_t = Output::Table)]
    output: Output,
    #[arg(long)]
    reps: Option<usize>,
    /// Fraction of iterations excluded from timing.
    #[arg(long)]
    warmup: Option<f64>,
    /// Check payload bytes of every message.
    #[arg(long)]
    verify: bool,
}

fn config(a: &Args) -> Result<BenchConfig, BenchError> {
    let benchmark = match a.command {
        Command::Msgrate => Benchmark::Msgrate,
        Command::Bandwidth => Benchmark::Bandwidth,
        Command::Resource => Benchmark::Resource,
        Command::Demo => Benchmark::Demo,
    };
    let mut c = BenchConfig::new(benchmark);
    c.mode = a.mode;
    c.resource_mode = a.resource_mode;
    c.output = a.output;
    c.verify = a.verify;
    if benchmark == Benchmark::Resource {
        c.threads = vec![1, 2, 4, 8];
        c.iterations = 100_000;
    }
    if let Some(t) = &a.threads {
        c.threads = parse_counts(t)?;
    }
    if let Some(n) = a.iters {
        c.iterations = n;
    }
    if let Some(s) = &a.sizes {
        c.sizes = parse_sizes(s)?;
    }
    if a.boundary {
        let t = lcr::Config::from_env()
            .map_err(|e| BenchError::Usage(e.to_string()))?
            .eager_threshold;
        c.sizes.extend([t - 1, t + 1]);
        c.sizes.sort_unstable();
        c.sizes.dedup();
    }
    if let Some(r) = a.reps {
        c.reps = r;
    }
    if let Some(w) = a.warmup {
        c.warmup = w;
    }
    c.backend = match (a.backend, a.mode) {
        (Some(b), _) => b,
        (None, Mode::Process) => Backend::Tcp,
        (None, Mode::Thread) => Backend::Loopback,
    };
    if c.mode == Mode::Process && c.backend != Backend::Tcp {
        return Err(BenchError::Usage(
            "process mode needs the tcp backend".into(),
        ));
    }
    c.validate()?;
    Ok(c)
}

fn run(a: &Args) -> Result<(), BenchError> {
    let cfg = config(a)?;
    if let Some(env) = launcher::rank_env()? {
        return lcr_bench::run_rank(&cfg, &env);
    }
    let outcome = if lcr_bench::is_process_mode(&cfg) {
        let args: Vec<OsString> = std::env::args_os().skip(1).collect();
        lcr_bench::run_processes(&cfg, &args)?
    } else {
        lcr_bench::run(&cfg)?
    };
    match outcome {
        Outcome::Report(r) => print!("{}", r.render(cfg.output)),
        Outcome::Demo(s) => println!(
            "demo ok: {} sent, {} freed, {} received, 0 duplicates, 0 corrupt",
            s.sent, s.freed, s.received
        ),
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
