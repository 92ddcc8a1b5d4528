//! Hashtable matching of incoming sends against posted receives.
//!
//! Keys are built from (rank, tag) according to a matching policy. Both
//! sides of a communication must use the same policy: a `RankTag` send and
//! a `TagOnly` receive produce different keys and never match.

use std::collections::VecDeque;

use parking_lot::Mutex;
use smallvec::SmallVec;

use crate::types::{MatchingPolicy, Rank, Tag};

pub const DEFAULT_BUCKETS: usize = 65536;

const RANK_LANE_BITS: u32 = 30;
pub const MAX_MATCH_RANK: u32 = (1 << RANK_LANE_BITS) - 1;

/// 64-bit key: `policy:2 | rank:30 | tag:32`. The policy bits keep keys of
/// different policies apart; a dropped lane is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MatchKey(pub u64);

pub fn make_key(rank: Rank, tag: Tag, policy: MatchingPolicy) -> MatchKey {
    let p = policy.to_wire() as u64;
    let r = (rank.0 & MAX_MATCH_RANK) as u64;
    let t = tag.0 as u64;
    let (r, t) = match policy {
        MatchingPolicy::RankTag => (r, t),
        MatchingPolicy::RankOnly => (r, 0),
        MatchingPolicy::TagOnly => (0, t),
    };
    MatchKey((p << 62) | (r << 32) | t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryKind {
    Send,
    Recv,
}

impl EntryKind {
    pub fn complement(self) -> EntryKind {
        match self {
            EntryKind::Send => EntryKind::Recv,
            EntryKind::Recv => EntryKind::Send,
        }
    }
}

struct ListQueue<T> {
    key: MatchKey,
    kind: EntryKind,
    entries: VecDeque<T>,
}

struct InlineQueue<T> {
    key: MatchKey,
    kind: EntryKind,
    entries: SmallVec<[T; 2]>,
}

enum Bucket<T> {
    List(Vec<ListQueue<T>>),
    Inline(SmallVec<[InlineQueue<T>; 3]>),
}

impl<T> Bucket<T> {
    fn insert(&mut self, key: MatchKey, kind: EntryKind, value: T) -> Option<(T, T)> {
        match self {
            Bucket::List(queues) => {
                if let Some(pos) = queues.iter().position(|q| q.key == key) {
                    let q = &mut queues[pos];
                    if q.kind == kind {
                        q.entries.push_back(value);
                        return None;
                    }
                    let matched = q.entries.pop_front().expect("queues are never left empty");
                    if q.entries.is_empty() {
                        queues.swap_remove(pos);
                    }
                    return Some((value, matched));
                }
                queues.push(ListQueue {
                    key,
                    kind,
                    entries: VecDeque::from([value]),
                });
                None
            }
            Bucket::Inline(queues) => {
                if let Some(pos) = queues.iter().position(|q| q.key == key) {
                    let q = &mut queues[pos];
                    if q.kind == kind {
                        q.entries.push(value);
                        return None;
                    }
                    let matched = q.entries.remove(0);
                    if q.entries.is_empty() {
                        queues.swap_remove(pos);
                    }
                    return Some((value, matched));
                }
                let mut entries = SmallVec::new();
                entries.push(value);
                queues.push(InlineQueue { key, kind, entries });
                None
            }
        }
    }

    fn len(&self) -> usize {
        match self {
            Bucket::List(q) => q.iter().map(|q| q.entries.len()).sum(),
            Bucket::Inline(q) => q.iter().map(|q| q.entries.len()).sum(),
        }
    }

    fn drain_into(&mut self, out: &mut Vec<(MatchKey, EntryKind, T)>) {
        match self {
            Bucket::List(qs) => {
                for q in qs.drain(..) {
                    out.extend(q.entries.into_iter().map(|e| (q.key, q.kind, e)));
                }
            }
            Bucket::Inline(qs) => {
                for q in qs.drain(..) {
                    out.extend(q.entries.into_iter().map(|e| (q.key, q.kind, e)));
                }
            }
        }
    }
}

/// Buckets of per-key FIFO queues, each bucket under its own lock.
pub struct MatchingEngine<T> {
    buckets: Box<[Mutex<Bucket<T>>]>,
    shift: u32,
}

impl<T> MatchingEngine<T> {
    pub fn new() -> Self {
        Self::with_config(DEFAULT_BUCKETS, false)
    }

    /// `buckets` is rounded up to a power of two. `inline` selects
    /// small-array storage for buckets and queues instead of growable lists.
    pub fn with_config(buckets: usize, inline: bool) -> Self {
        let n = buckets.max(2).next_power_of_two();
        let shift = 64 - n.trailing_zeros();
        let buckets = (0..n)
            .map(|_| {
                Mutex::new(if inline {
                    Bucket::Inline(SmallVec::new())
                } else {
                    Bucket::List(Vec::new())
                })
            })
            .collect();
        MatchingEngine { buckets, shift }
    }

    fn bucket(&self, key: MatchKey) -> &Mutex<Bucket<T>> {
        let h = key.0.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> self.shift;
        &self.buckets[h as usize]
    }

    /// Store `value` under `key`, unless an entry of the complementary kind
    /// is waiting there: then the oldest such entry is removed and returned.
    pub fn insert(&self, key: MatchKey, kind: EntryKind, value: T) -> Option<T> {
        self.insert_or_match(key, kind, value)
            .map(|(_, matched)| matched)
    }

    /// Like [`insert`](Self::insert), but a match hands back the rejected
    /// `value` too, as `(value, matched)`.
    pub fn insert_or_match(&self, key: MatchKey, kind: EntryKind, value: T) -> Option<(T, T)> {
        self.bucket(key).lock().insert(key, kind, value)
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    /// Entries currently stored. Not a snapshot under concurrency.
    pub fn len(&self) -> usize {
        self.buckets.iter().map(|b| b.lock().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Remove every stored entry.
    pub fn drain(&self) -> Vec<(MatchKey, EntryKind, T)> {
        let mut out = Vec::new();
        for b in self.buckets.iter() {
            b.lock().drain_into(&mut out);
        }
        out
    }
}

impl<T> Default for MatchingEngine<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// Sequential two-list oracle with per-key FIFO.
    #[derive(Default)]
    struct Oracle {
        sends: HashMap<MatchKey, VecDeque<u32>>,
        recvs: HashMap<MatchKey, VecDeque<u32>>,
    }

    impl Oracle {
        fn insert(&mut self, key: MatchKey, kind: EntryKind, v: u32) -> Option<u32> {
            let (mine, other) = match kind {
                EntryKind::Send => (&mut self.sends, &mut self.recvs),
                EntryKind::Recv => (&mut self.recvs, &mut self.sends),
            };
            if let Some(q) = other.get_mut(&key) {
                if let Some(m) = q.pop_front() {
                    return Some(m);
                }
            }
            mine.entry(key).or_default().push_back(v);
            None
        }
    }

    #[test]
    fn key_lanes() {
        let rt = MatchingPolicy::RankTag;
        assert_ne!(make_key(Rank(3), Tag(7), rt), make_key(Rank(4), Tag(7), rt));
        let to = MatchingPolicy::TagOnly;
        assert_eq!(make_key(Rank(3), Tag(7), to), make_key(Rank(9), Tag(7), to));
        let ro = MatchingPolicy::RankOnly;
        assert_eq!(make_key(Rank(3), Tag(7), ro), make_key(Rank(3), Tag(9), ro));
        // Different policies never share a key.
        assert_ne!(make_key(Rank(0), Tag(7), rt), make_key(Rank(0), Tag(7), to));
        assert_ne!(make_key(Rank(3), Tag(0), rt), make_key(Rank(3), Tag(0), ro));
    }

    #[test]
    fn send_then_recv_matches() {
        for inline in [false, true] {
            let me = MatchingEngine::with_config(64, inline);
            let k = make_key(Rank(1), Tag(2), MatchingPolicy::RankTag);
            assert_eq!(me.insert(k, EntryKind::Send, "s1"), None);
            assert_eq!(me.insert(k, EntryKind::Recv, "r1"), Some("s1"));
            assert!(me.is_empty());
        }
    }

    #[test]
    fn fifo_within_key() {
        for inline in [false, true] {
            let me = MatchingEngine::with_config(64, inline);
            let k = make_key(Rank(1), Tag(2), MatchingPolicy::RankTag);
            me.insert(k, EntryKind::Send, 1);
            me.insert(k, EntryKind::Send, 2);
            me.insert(k, EntryKind::Send, 3);
            assert_eq!(me.insert(k, EntryKind::Recv, 10), Some(1));
            assert_eq!(me.insert(k, EntryKind::Recv, 11), Some(2));
            assert_eq!(me.len(), 1);
        }
    }

    #[test]
    fn colliding_keys_stay_separate() {
        // Two buckets force collisions.
        let me = MatchingEngine::with_config(2, false);
        for t in 0..50 {
            me.insert(
                make_key(Rank(0), Tag(t), MatchingPolicy::RankTag),
                EntryKind::Send,
                t,
            );
        }
        for t in (0..50).rev() {
            let got = me.insert(
                make_key(Rank(0), Tag(t), MatchingPolicy::RankTag),
                EntryKind::Recv,
                0,
            );
            assert_eq!(got, Some(t));
        }
        assert!(me.is_empty());
    }

    proptest! {
        #[test]
        fn matches_sequential_oracle(
            ops in proptest::collection::vec((0u32..4, 0u32..4, any::<bool>()), 0..300),
            inline in any::<bool>(),
        ) {
            let me = MatchingEngine::with_config(8, inline);
            let mut oracle = Oracle::default();
            for (i, (r, t, is_send)) in ops.into_iter().enumerate() {
                let k = make_key(Rank(r), Tag(t), MatchingPolicy::RankTag);
                let kind = if is_send { EntryKind::Send } else { EntryKind::Recv };
                prop_assert_eq!(me.insert(k, kind, i as u32), oracle.insert(k, kind, i as u32));
            }
        }

        #[test]
        fn rank_tag_key_is_injective(r1 in 0..MAX_MATCH_RANK, t1: u32, r2 in 0..MAX_MATCH_RANK, t2: u32) {
            let a = make_key(Rank(r1), Tag(t1), MatchingPolicy::RankTag);
            let b = make_key(Rank(r2), Tag(t2), MatchingPolicy::RankTag);
            prop_assert_eq!(a == b, (r1, t1) == (r2, t2));
        }
    }
}
