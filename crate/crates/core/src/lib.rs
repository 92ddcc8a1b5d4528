//! A lightweight communication runtime for asynchronous multithreaded
//! message passing.
//!
//! One posting operation covers send/receive, active messages, put and
//! get; the paradigm follows from its options. Completions are delivered
//! through counters, synchronizers, completion queues, handlers or graph
//! nodes, and progress is driven explicitly per device.
//!
//! ```
//! use lcr::{Config, Rank, Runtime};
//!
//! let rts = Runtime::loopback_world(2, Config::default())?;
//! let (a, b) = (&rts[0], &rts[1]);
//! let scq = a.alloc_cq();
//! let rcq = b.alloc_cq();
//!
//! b.post_recv(Rank(0), Vec::new(), &rcq).tag(7).call()?;
//! let st = a.post_send(Rank(1), b"hello".to_vec(), &scq).tag(7).call()?;
//! assert!(st.is_done());
//!
//! let msg = loop {
//!     a.progress()?;
//!     b.progress()?;
//!     if let Some(s) = rcq.as_queue().unwrap().try_pop() {
//!         break s;
//!     }
//! };
//! assert_eq!(msg.buffer.as_deref(), Some(&b"hello"[..]));
//! # Ok::<(), lcr::Error>(())
//! ```

pub mod backend;
pub mod backlog;
pub mod completion;
pub mod error;
pub mod matching;
pub mod packet;
pub mod protocol;
pub mod registry;
pub mod types;

pub use backend::MemoryToken;
pub use completion::{Comp, CompKind, CompletionQueue, Graph, GraphAction, GraphState, NodeId};
pub use error::{Error, ErrorCode, Result};
pub use packet::PacketPool;
pub use protocol::{
    BackendKind, Config, Device, MatchingEngineHandle, Post, Runtime, StatsSnapshot,
};
pub use registry::RcompId;
pub use types::{
    Direction, MatchingPolicy, Paradigm, PostOptions, Rank, RemoteBuffer, RetryReason, State,
    Status, Tag,
};
