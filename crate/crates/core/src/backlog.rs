//! Per-device FIFO of work that hit a transient shortage and cannot be
//! bounced back to the user. Drained by progress.

use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use parking_lot::Mutex;

use crate::error::Result;

/// Outcome of one submission attempt during a flush.
pub enum Submitted<T> {
    Accepted,
    /// Not accepted this time; the item goes back to the head.
    Again(T),
}

pub struct Backlog<T> {
    queue: Mutex<VecDeque<T>>,
    nonempty: AtomicBool,
    flushing: Mutex<()>,
}

impl<T> Backlog<T> {
    pub fn new() -> Self {
        Backlog {
            queue: Mutex::new(VecDeque::new()),
            nonempty: AtomicBool::new(false),
            flushing: Mutex::new(()),
        }
    }

    pub fn push(&self, item: T) {
        let mut q = self.queue.lock();
        q.push_back(item);
        self.nonempty.store(true, Ordering::Release);
    }

    /// Cheap emptiness probe; may be stale under concurrency.
    pub fn is_empty(&self) -> bool {
        !self.nonempty.load(Ordering::Acquire)
    }

    pub fn len(&self) -> usize {
        self.queue.lock().len()
    }

    /// Submit items head-first until one is refused or the queue empties.
    /// Returns the number accepted. Another thread already flushing makes
    /// this a no-op returning 0.
    pub fn flush(&self, mut submit: impl FnMut(T) -> Result<Submitted<T>>) -> Result<usize> {
        if self.is_empty() {
            return Ok(0);
        }
        let Some(_guard) = self.flushing.try_lock() else {
            return Ok(0);
        };
        let mut n = 0;
        loop {
            let item = {
                let mut q = self.queue.lock();
                match q.pop_front() {
                    Some(item) => item,
                    None => {
                        self.nonempty.store(false, Ordering::Release);
                        return Ok(n);
                    }
                }
            };
            match submit(item)? {
                Submitted::Accepted => n += 1,
                Submitted::Again(item) => {
                    self.queue.lock().push_front(item);
                    return Ok(n);
                }
            }
        }
    }

    /// Remove everything without submitting.
    pub fn drain(&self) -> Vec<T> {
        let mut q = self.queue.lock();
        self.nonempty.store(false, Ordering::Release);
        q.drain(..).collect()
    }
}

impl<T> Default for Backlog<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Backlog<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backlog").field("len", &self.len()).finish()
    }
}
