use std::str::FromStr;

use crate::backend::DEFAULT_SEND_QUEUE_DEPTH;
use crate::completion::DEFAULT_CQ_CAPACITY;
use crate::error::{Error, Result};
use crate::matching::DEFAULT_BUCKETS;
use crate::packet::{DEFAULT_PACKET_CAPACITY, DEFAULT_PACKET_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackendKind {
    #[default]
    Loopback,
    Tcp,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "loopback" => Ok(BackendKind::Loopback),
            "tcp" => Ok(BackendKind::Tcp),
            _ => Err(Error::invalid(format!("unknown backend {s:?}"))),
        }
    }
}

/// Runtime configuration. Every field can be overridden from the
/// environment, see [`Config::apply_env`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    /// Largest send or active message completed by the inject path.
    pub max_inject_size: usize,
    /// Largest message sent eagerly; bigger ones use rendezvous. At most
    /// `packet_size`.
    pub eager_threshold: usize,
    /// Payload bytes per packet.
    pub packet_size: usize,
    pub packet_count: usize,
    /// Receives each device keeps pre-posted.
    pub prepost_count: usize,
    /// Backend events handled per progress call.
    pub progress_batch: usize,
    pub cq_capacity: usize,
    pub send_queue_depth: usize,
    pub matching_buckets: usize,
    pub inline_matching: bool,
    /// Loopback only: permute delivery order.
    pub reorder: bool,
    pub backend: BackendKind,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            max_inject_size: 64,
            eager_threshold: DEFAULT_PACKET_CAPACITY,
            packet_size: DEFAULT_PACKET_CAPACITY,
            packet_count: DEFAULT_PACKET_COUNT,
            prepost_count: 256,
            progress_batch: 16,
            cq_capacity: DEFAULT_CQ_CAPACITY,
            send_queue_depth: DEFAULT_SEND_QUEUE_DEPTH,
            matching_buckets: DEFAULT_BUCKETS,
            inline_matching: false,
            reorder: false,
            backend: BackendKind::Loopback,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("{key}={v:?} is not valid")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("{key}={v:?} is not a boolean"))),
    }
}

impl Config {
    /// Defaults with environment overrides applied.
    pub fn from_env() -> Result<Config> {
        let mut c = Config::default();
        c.apply_env(|k| std::env::var(k).ok())?;
        Ok(c)
    }

    /// Override fields from `LCR_*` variables looked up through `get`.
    /// Setting `LCR_PACKET_SIZE` alone also moves the eager threshold.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        macro_rules! num {
            ($key:literal, $field:ident) => {
                if let Some(v) = get($key) {
                    self.$field = parse($key, &v)?;
                }
            };
        }
        if let Some(v) = get("LCR_PACKET_SIZE") {
            self.packet_size = parse("LCR_PACKET_SIZE", &v)?;
            self.eager_threshold = self.packet_size;
        }
        num!("LCR_MAX_INJECT_SIZE", max_inject_size);
        num!("LCR_EAGER_THRESHOLD", eager_threshold);
        num!("LCR_PACKET_COUNT", packet_count);
        num!("LCR_PREPOST_COUNT", prepost_count);
        num!("LCR_PROGRESS_BATCH", progress_batch);
        num!("LCR_CQ_CAPACITY", cq_capacity);
        num!("LCR_SEND_QUEUE_DEPTH", send_queue_depth);
        num!("LCR_MATCHING_BUCKETS", matching_buckets);
        if let Some(v) = get("LCR_INLINE_MATCHING") {
            self.inline_matching = parse_bool("LCR_INLINE_MATCHING", &v)?;
        }
        if let Some(v) = get("LCR_REORDER") {
            self.reorder = parse_bool("LCR_REORDER", &v)?;
        }
        if let Some(v) = get("LCR_BACKEND") {
            self.backend = v.parse()?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eager_threshold > self.packet_size {
            return Err(Error::invalid("eager threshold exceeds the packet size"));
        }
        if self.max_inject_size > self.eager_threshold {
            return Err(Error::invalid("inject size exceeds the eager threshold"));
        }
        if self.progress_batch == 0 || self.send_queue_depth == 0 || self.cq_capacity == 0 {
            return Err(Error::invalid(
                "batch, queue depth and CQ capacity must be positive",
            ));
        }
        Ok(())
    }
}
