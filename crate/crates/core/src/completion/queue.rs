use std::cell::UnsafeCell;
use std::fmt;
use std::mem::MaybeUninit;
use std::sync::atomic::{AtomicUsize, Ordering};

use crossbeam_utils::{Backoff, CachePadded};

use crate::types::{RetryReason, Status};

pub const DEFAULT_CQ_CAPACITY: usize = 65536;

struct Slot {
    // `t` when free for push ticket `t`, `t + 1` once ticket `t` is published.
    seq: AtomicUsize,
    value: UnsafeCell<MaybeUninit<Status>>,
}

/// Bounded completion queue over a fixed slot array.
///
/// Producers and consumers take slot tickets with fetch-and-add. Two
/// counters keep the fast path non-blocking: `reserved` bounds occupancy so
/// a push fails with `CqFull` instead of wrapping onto a live slot, and
/// `available` lets a pop report `NothingToPop` instead of waiting on an
/// empty slot.
pub struct CompletionQueue {
    slots: Box<[Slot]>,
    tail: CachePadded<AtomicUsize>,
    head: CachePadded<AtomicUsize>,
    reserved: CachePadded<AtomicUsize>,
    available: CachePadded<AtomicUsize>,
}

unsafe impl Send for CompletionQueue {}
unsafe impl Sync for CompletionQueue {}

impl CompletionQueue {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        CompletionQueue {
            slots: (0..capacity)
                .map(|i| Slot {
                    seq: AtomicUsize::new(i),
                    value: UnsafeCell::new(MaybeUninit::uninit()),
                })
                .collect(),
            tail: CachePadded::new(AtomicUsize::new(0)),
            head: CachePadded::new(AtomicUsize::new(0)),
            reserved: CachePadded::new(AtomicUsize::new(0)),
            available: CachePadded::new(AtomicUsize::new(0)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Enqueue, or hand the status back when the queue is full.
    pub fn push(&self, status: Status) -> Result<(), Status> {
        let cap = self.slots.len();
        if self.reserved.fetch_add(1, Ordering::AcqRel) >= cap {
            self.reserved.fetch_sub(1, Ordering::AcqRel);
            return Err(status);
        }
        let t = self.tail.fetch_add(1, Ordering::AcqRel);
        let slot = &self.slots[t % cap];
        // A slow popper from the previous lap may still be reading.
        let backoff = Backoff::new();
        while slot.seq.load(Ordering::Acquire) != t {
            backoff.snooze();
            if backoff.is_completed() {
                std::thread::yield_now();
            }
        }
        unsafe { (*slot.value.get()).write(status) };
        slot.seq.store(t + 1, Ordering::Release);
        self.available.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    /// Dequeue one status, `None` when nothing is published.
    pub fn try_pop(&self) -> Option<Status> {
        let mut a = self.available.load(Ordering::Acquire);
        loop {
            if a == 0 {
                return None;
            }
            match self.available.compare_exchange_weak(
                a,
                a - 1,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => break,
                Err(cur) => a = cur,
            }
        }
        let cap = self.slots.len();
        let h = self.head.fetch_add(1, Ordering::AcqRel);
        let slot = &self.slots[h % cap];
        let backoff = Backoff::new();
        while slot.seq.load(Ordering::Acquire) != h + 1 {
            backoff.snooze();
            if backoff.is_completed() {
                std::thread::yield_now();
            }
        }
        let status = unsafe { (*slot.value.get()).assume_init_read() };
        slot.seq.store(h + cap, Ordering::Release);
        self.reserved.fetch_sub(1, Ordering::AcqRel);
        Some(status)
    }

    /// Status-returning pop: a `Done` status, or `Retry(NothingToPop)`.
    pub fn pop(&self) -> Status {
        self.try_pop()
            .unwrap_or_else(|| Status::retry(RetryReason::NothingToPop, None))
    }

    /// Published, unclaimed statuses.
    pub fn len(&self) -> usize {
        self.available.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Drop for CompletionQueue {
    fn drop(&mut self) {
        while self.try_pop().is_some() {}
    }
}

impl fmt::Debug for CompletionQueue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompletionQueue")
            .field("capacity", &self.capacity())
            .field("len", &self.len())
            .finish()
    }
}
