//! Read-mostly growable array with wait-free reads, and the remote
//! completion handle type indexed into it.

use std::sync::atomic::{AtomicPtr, AtomicUsize, Ordering};
use std::sync::OnceLock;

use parking_lot::Mutex;

use crate::error::{Error, ErrorCode, Result};

pub const DEFAULT_ARRAY_CAPACITY: usize = 1024;

struct Segment<V> {
    slots: Box<[OnceLock<V>]>,
}

impl<V> Segment<V> {
    fn new(capacity: usize) -> Box<Self> {
        Box::new(Segment {
            slots: (0..capacity).map(|_| OnceLock::new()).collect(),
        })
    }
}

/// Append-only array: appends are serialized by a lock, reads are a pair
/// of atomic loads and never block.
///
/// A full segment is replaced by one of twice the capacity. The old segment
/// is retired, not freed, so a reader that loaded its pointer keeps seeing
/// valid slots; retired segments are dropped with the array.
pub struct MpmcArray<V> {
    current: AtomicPtr<Segment<V>>,
    len: AtomicUsize,
    // Guards appends; also owns the retired segments.
    writer: Mutex<Vec<*mut Segment<V>>>,
}

unsafe impl<V: Send + Sync> Send for MpmcArray<V> {}
unsafe impl<V: Send + Sync> Sync for MpmcArray<V> {}

impl<V: Clone> MpmcArray<V> {
    pub fn new() -> Self {
        Self::with_capacity(DEFAULT_ARRAY_CAPACITY)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        MpmcArray {
            current: AtomicPtr::new(Box::into_raw(Segment::new(capacity))),
            len: AtomicUsize::new(0),
            writer: Mutex::new(Vec::new()),
        }
    }

    /// Append `v`, returning its index. Indices are handed out strictly
    /// increasing.
    pub fn append(&self, v: V) -> usize {
        let mut retired = self.writer.lock();
        let idx = self.len.load(Ordering::Relaxed);
        let mut seg_ptr = self.current.load(Ordering::Relaxed);
        // SAFETY: the current segment is only replaced under `writer`.
        let cap = unsafe { (&*seg_ptr).slots.len() };
        if idx == cap {
            let grown = Segment::new(cap * 2);
            // SAFETY: as above; old slots [0, idx) are all initialized.
            let old = unsafe { &*seg_ptr };
            for (dst, src) in grown.slots.iter().zip(old.slots.iter()) {
                if let Some(val) = src.get() {
                    let _ = dst.set(val.clone());
                }
            }
            let grown = Box::into_raw(grown);
            self.current.store(grown, Ordering::Release);
            retired.push(seg_ptr);
            seg_ptr = grown;
        }
        // SAFETY: segment pointer is live; slot idx has never been set.
        let _ = unsafe { (*seg_ptr).slots[idx].set(v) };
        self.len.store(idx + 1, Ordering::Release);
        idx
    }

    /// Wait-free lookup.
    pub fn get(&self, i: usize) -> Option<&V> {
        if i >= self.len.load(Ordering::Acquire) {
            return None;
        }
        // The segment pointer is published before `len`, so this segment
        // holds index i. Segments live as long as `self`.
        let seg = unsafe { &*self.current.load(Ordering::Acquire) };
        seg.slots[i].get()
    }

    pub fn read(&self, i: usize) -> Result<V> {
        self.get(i)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("index {i} out of range (len {})", self.len())))
    }

    pub fn len(&self) -> usize {
        self.len.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        unsafe { (&*self.current.load(Ordering::Acquire)).slots.len() }
    }

    pub fn retired_segments(&self) -> usize {
        self.writer.lock().len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &V> + '_ {
        (0..self.len()).filter_map(move |i| self.get(i))
    }
}

impl<V: Clone> Default for MpmcArray<V> {
    fn default() -> Self {
        Self::new()
    }
}

impl<V> Drop for MpmcArray<V> {
    fn drop(&mut self) {
        let retired = std::mem::take(self.writer.get_mut());
        for p in retired {
            drop(unsafe { Box::from_raw(p) });
        }
        drop(unsafe { Box::from_raw(*self.current.get_mut()) });
    }
}

/// Index of a registered completion object. Ids agree across ranks when
/// every rank registers in the same order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RcompId(pub u32);

/// Registered remote-completion targets, ids sequential from 0.
pub struct RcompRegistry<C> {
    entries: MpmcArray<C>,
}

impl<C: Clone> RcompRegistry<C> {
    pub fn new() -> Self {
        RcompRegistry {
            entries: MpmcArray::new(),
        }
    }

    pub fn register(&self, c: C) -> RcompId {
        let idx = self.entries.append(c);
        RcompId(idx as u32)
    }

    pub fn lookup(&self, id: RcompId) -> Result<&C> {
        self.entries.get(id.0 as usize).ok_or_else(|| {
            Error::new(
                ErrorCode::UnregisteredRcomp,
                format!(
                    "rcomp {} not registered ({} known)",
                    id.0,
                    self.entries.len()
                ),
            )
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<C: Clone> Default for RcompRegistry<C> {
    fn default() -> Self {
        Self::new()
    }
}
