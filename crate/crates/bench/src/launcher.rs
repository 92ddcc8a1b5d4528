//! Process mode: the parent re-executes its own binary once per rank.
//! Children find their rank, world size and the rendezvous file in the
//! environment and print result lines on stdout.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use crate::BenchError;

pub const ENV_RANK: &str = "LCR_BENCH_RANK";
pub const ENV_WORLD: &str = "LCR_BENCH_WORLD";
pub const ENV_RENDEZVOUS: &str = "LCR_BENCH_RENDEZVOUS";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankEnv {
    pub rank: u32,
    pub world: u32,
    pub rendezvous: PathBuf,
}

/// The rank this process plays, if it was started by a launcher.
pub fn rank_env() -> Result<Option<RankEnv>, BenchError> {
    let Ok(rank) = std::env::var(ENV_RANK) else {
        return Ok(None);
    };
    let parse = |k: &str, v: String| {
        v.parse::<u32>()
            .map_err(|_| BenchError::Usage(format!("{k}={v:?}")))
    };
    let rank = parse(ENV_RANK, rank)?;
    let world = parse(
        ENV_WORLD,
        std::env::var(ENV_WORLD)
            .map_err(|_| BenchError::Usage(format!("{ENV_WORLD} is not set")))?,
    )?;
    let rendezvous = std::env::var_os(ENV_RENDEZVOUS)
        .map(PathBuf::from)
        .ok_or_else(|| BenchError::Usage(format!("{ENV_RENDEZVOUS} is not set")))?;
    if rank >= world {
        return Err(BenchError::Usage(format!(
            "rank {rank} outside world {world}"
        )));
    }
    Ok(Some(RankEnv {
        rank,
        world,
        rendezvous,
    }))
}

/// Start `world` copies of this executable with `args` and collect each
/// rank's stdout. Any failing rank fails the launch with its exit code.
pub fn launch(world: u32, args: &[OsString]) -> Result<Vec<String>, BenchError> {
    let exe = std::env::current_exe()?;
    let dir = tempfile::tempdir()?;
    let file = dir.path().join("ranks");
    let children = (0..world)
        .map(|r| {
            Command::new(&exe)
                .args(args)
                .env(ENV_RANK, r.to_string())
                .env(ENV_WORLD, world.to_string())
                .env(ENV_RENDEZVOUS, &file)
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut outs = Vec::new();
    let mut failed = None;
    for (r, c) in children.into_iter().enumerate() {
        let out = c.wait_with_output()?;
        if !out.status.success() && failed.is_none() {
            failed = Some((r, out.status.code()));
        }
        outs.push(String::from_utf8_lossy(&out.stdout).into_owned());
    }
    match failed {
        None => Ok(outs),
        Some((r, Some(1))) => Err(BenchError::Verify(format!("rank {r} failed verification"))),
        Some((r, code)) => Err(BenchError::Rank(format!("rank {r} exited with {code:?}"))),
    }
}
