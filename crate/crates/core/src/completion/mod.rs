//! Completion objects: signal sinks receiving one [`Status`] per completed
//! operation.

mod graph;
mod queue;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::types::Status;

pub use graph::{Graph, GraphAction, GraphNode, GraphState, NodeId};
pub use queue::{CompletionQueue, DEFAULT_CQ_CAPACITY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompKind {
    Counter,
    Synchronizer,
    Queue,
    Handler,
    Graph,
}

/// Handle to a completion object. Cloning shares the object.
#[derive(Clone)]
pub enum Comp {
    Counter(Arc<Counter>),
    Synchronizer(Arc<Synchronizer>),
    Queue(Arc<CompletionQueue>),
    Handler(Arc<Handler>),
    Graph(GraphNode),
}

impl Comp {
    pub fn counter() -> Comp {
        Comp::Counter(Arc::new(Counter::default()))
    }

    pub fn synchronizer(expected: usize) -> Comp {
        Comp::Synchronizer(Arc::new(Synchronizer::new(expected)))
    }

    pub fn queue(capacity: usize) -> Comp {
        Comp::Queue(Arc::new(CompletionQueue::new(capacity)))
    }

    pub fn handler(f: impl Fn(Status) + Send + Sync + 'static) -> Comp {
        Comp::Handler(Arc::new(Handler::new(f)))
    }

    pub fn kind(&self) -> CompKind {
        match self {
            Comp::Counter(_) => CompKind::Counter,
            Comp::Synchronizer(_) => CompKind::Synchronizer,
            Comp::Queue(_) => CompKind::Queue,
            Comp::Handler(_) => CompKind::Handler,
            Comp::Graph(_) => CompKind::Graph,
        }
    }

    /// Deliver a completion. A full queue hands the status back so the
    /// caller can park it and retry.
    pub fn signal(&self, status: Status) -> Result<(), Status> {
        match self {
            Comp::Counter(c) => {
                c.signal();
                Ok(())
            }
            Comp::Synchronizer(s) => {
                s.signal(status);
                Ok(())
            }
            Comp::Queue(q) => q.push(status),
            Comp::Handler(h) => {
                h.invoke(status);
                Ok(())
            }
            Comp::Graph(n) => {
                n.signal(status);
                Ok(())
            }
        }
    }

    pub fn as_queue(&self) -> Option<&Arc<CompletionQueue>> {
        match self {
            Comp::Queue(q) => Some(q),
            _ => None,
        }
    }

    pub fn as_counter(&self) -> Option<&Arc<Counter>> {
        match self {
            Comp::Counter(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_synchronizer(&self) -> Option<&Arc<Synchronizer>> {
        match self {
            Comp::Synchronizer(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Debug for Comp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Comp::{:?}", self.kind())
    }
}

impl From<Arc<CompletionQueue>> for Comp {
    fn from(q: Arc<CompletionQueue>) -> Self {
        Comp::Queue(q)
    }
}

impl From<Arc<Counter>> for Comp {
    fn from(c: Arc<Counter>) -> Self {
        Comp::Counter(c)
    }
}

impl From<Arc<Synchronizer>> for Comp {
    fn from(s: Arc<Synchronizer>) -> Self {
        Comp::Synchronizer(s)
    }
}

/// Counts signals; the statuses themselves are dropped.
#[derive(Debug, Default)]
pub struct Counter {
    count: AtomicU64,
}

impl Counter {
    pub fn signal(&self) {
        self.count.fetch_add(1, Ordering::AcqRel);
    }

    pub fn get(&self) -> u64 {
        self.count.load(Ordering::Acquire)
    }
}

/// Becomes ready after exactly `expected` signals and keeps their statuses.
pub struct Synchronizer {
    expected: usize,
    claimed: AtomicUsize,
    filled: AtomicUsize,
    slots: Box<[Mutex<Option<Status>>]>,
}

impl Synchronizer {
    pub fn new(expected: usize) -> Self {
        let expected = expected.max(1);
        Synchronizer {
            expected,
            claimed: AtomicUsize::new(0),
            filled: AtomicUsize::new(0),
            slots: (0..expected).map(|_| Mutex::new(None)).collect(),
        }
    }

    pub fn expected(&self) -> usize {
        self.expected
    }

    pub fn signal(&self, status: Status) {
        let slot = self.claimed.fetch_add(1, Ordering::AcqRel);
        if slot >= self.expected {
            debug_assert!(
                false,
                "synchronizer signaled more than {} times",
                self.expected
            );
            return;
        }
        *self.slots[slot].lock() = Some(status);
        self.filled.fetch_add(1, Ordering::AcqRel);
    }

    pub fn is_ready(&self) -> bool {
        self.filled.load(Ordering::Acquire) == self.expected
    }

    /// Signals received so far.
    pub fn received(&self) -> usize {
        self.filled.load(Ordering::Acquire)
    }

    /// Statuses in slot order once ready. Taking them leaves the slots
    /// empty until [`reset`](Self::reset).
    pub fn take_statuses(&self) -> Option<Vec<Status>> {
        if !self.is_ready() {
            return None;
        }
        Some(self.slots.iter().filter_map(|s| s.lock().take()).collect())
    }

    /// Re-arm for another round. Only legal once ready.
    pub fn reset(&self) -> Result<()> {
        if !self.is_ready() {
            return Err(Error::invalid("synchronizer reset before ready"));
        }
        for s in self.slots.iter() {
            *s.lock() = None;
        }
        self.filled.store(0, Ordering::Release);
        self.claimed.store(0, Ordering::Release);
        Ok(())
    }
}

impl fmt::Debug for Synchronizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Synchronizer")
            .field("expected", &self.expected)
            .field("received", &self.received())
            .finish()
    }
}

thread_local! {
    static IN_HANDLER: Cell<bool> = const { Cell::new(false) };
}

/// True while the calling thread is running a completion handler.
pub fn in_handler() -> bool {
    IN_HANDLER.with(|c| c.get())
}

type HandlerFn = dyn Fn(Status) + Send + Sync;

/// Callable invoked inline by whoever signals it. Handlers must not block
/// and must not call progress.
pub struct Handler {
    f: Box<HandlerFn>,
}

impl Handler {
    pub fn new(f: impl Fn(Status) + Send + Sync + 'static) -> Self {
        Handler { f: Box::new(f) }
    }

    pub fn invoke(&self, status: Status) {
        let outer = IN_HANDLER.with(|c| c.replace(true));
        (self.f)(status);
        IN_HANDLER.with(|c| c.set(outer));
    }
}
