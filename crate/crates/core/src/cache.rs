//! LRU feature and prediction caches.
//!
//! Keys embed the model id and version, so a version swap leaves old entries
//! unreachable; swaps and rollbacks also purge them explicitly.

use std::borrow::Borrow;
use std::hash::{BuildHasher, Hash};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use hashbrown::HashTable;
use parking_lot::Mutex;
use rustc_hash::{FxBuildHasher, FxHashMap, FxHashSet};
use serde::Serialize;

use crate::model::Item;

const NIL: u32 = u32::MAX;

/// Keys resolved per pass of a batched lookup.
const BATCH: usize = 64;

/// One cache line for the common key and value sizes.
#[repr(align(64))]
struct Node<K, V> {
    key: K,
    value: V,
}

/// Table entry: slot number plus hash bits that rule out most mismatches
/// without reading the slot.
#[derive(Clone, Copy)]
struct Slot {
    idx: u32,
    tag: u32,
}

fn tag(hash: u64) -> u32 {
    (hash >> 25) as u32
}

#[derive(Clone, Copy)]
struct Link {
    prev: u32,
    next: u32,
}

/// Fixed-capacity map evicting the least-recently-used key.
///
/// Entries live in a slab indexed by a hash table of slot numbers; a doubly
/// linked recency list, most recent at `head`, runs through a separate
/// array of links. Every operation is O(1), and reordering the list touches
/// only the compact link array.
pub struct LruCache<K, V> {
    capacity: usize,
    hasher: FxBuildHasher,
    table: HashTable<Slot>,
    nodes: Vec<Node<K, V>>,
    hashes: Vec<u64>,
    links: Vec<Link>,
    free: Vec<u32>,
    head: u32,
    tail: u32,
}

impl<K: Hash + Eq + Clone, V> LruCache<K, V> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "cache capacity must be positive");
        assert!(capacity < NIL as usize, "cache capacity must fit in u32");
        LruCache {
            capacity,
            hasher: FxBuildHasher,
            table: HashTable::with_capacity(capacity.min(1 << 16)),
            nodes: Vec::new(),
            hashes: Vec::new(),
            links: Vec::new(),
            free: Vec::new(),
            head: NIL,
            tail: NIL,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    fn find<Q>(&self, hash: u64, key: &Q) -> Option<u32>
    where
        K: Borrow<Q>,
        Q: Eq + ?Sized,
    {
        let (nodes, t) = (&self.nodes, tag(hash));
        self.table
            .find(hash, |s| s.tag == t && nodes[s.idx as usize].key.borrow() == key)
            .map(|s| s.idx)
    }

    fn unlink(&mut self, idx: u32) {
        let Link { prev, next } = self.links[idx as usize];
        if prev == NIL {
            self.head = next;
        } else {
            self.links[prev as usize].next = next;
        }
        if next == NIL {
            self.tail = prev;
        } else {
            self.links[next as usize].prev = prev;
        }
    }

    fn push_front(&mut self, idx: u32) {
        self.links[idx as usize] = Link {
            prev: NIL,
            next: self.head,
        };
        if self.head != NIL {
            self.links[self.head as usize].prev = idx;
        }
        self.head = idx;
        if self.tail == NIL {
            self.tail = idx;
        }
    }

    fn touch(&mut self, idx: u32) {
        if self.head != idx {
            self.unlink(idx);
            self.push_front(idx);
        }
    }

    fn unindex(&mut self, idx: u32) {
        match self.table.find_entry(self.hashes[idx as usize], |s| s.idx == idx) {
            Ok(entry) => {
                entry.remove();
            }
            Err(_) => unreachable!("live slot missing from the table"),
        }
        self.unlink(idx);
    }

    /// Look up and mark as most recently used.
    pub fn get<Q>(&mut self, key: &Q) -> Option<&V>
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ?Sized,
    {
        let idx = self.find(self.hasher.hash_one(key), key)?;
        self.touch(idx);
        Some(&self.nodes[idx as usize].value)
    }

    /// Same result and recency order as calling `get` on each key in turn.
    /// Slots are resolved from table data first, so the entry reads that
    /// follow are independent of each other and can overlap.
    pub fn get_batch(&mut self, keys: &[K]) -> Vec<Option<V>>
    where
        V: Clone,
    {
        let mut out = Vec::with_capacity(keys.len());
        for chunk in keys.chunks(BATCH) {
            self.get_batch_into(chunk, &mut out);
        }
        out
    }

    /// `get_batch` appending to `out`; at most `BATCH` keys.
    fn get_batch_into(&mut self, keys: &[K], out: &mut Vec<Option<V>>)
    where
        V: Clone,
    {
        debug_assert!(keys.len() <= BATCH);
        let mut candidates = [(0u64, NIL); BATCH];
        for (c, k) in candidates.iter_mut().zip(keys) {
            let hash = self.hasher.hash_one(k);
            let t = tag(hash);
            *c = (hash, self.table.find(hash, |s| s.tag == t).map_or(NIL, |s| s.idx));
        }
        for (key, &(hash, candidate)) in keys.iter().zip(&candidates) {
            let idx = if candidate == NIL {
                None
            } else if self.nodes[candidate as usize].key == *key {
                Some(candidate)
            } else {
                // Tag collision: probe properly.
                self.find(hash, key)
            };
            out.push(idx.map(|i| {
                self.touch(i);
                self.nodes[i as usize].value.clone()
            }));
        }
    }

    /// Look up without changing recency.
    pub fn peek<Q>(&self, key: &Q) -> Option<&V>
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ?Sized,
    {
        let idx = self.find(self.hasher.hash_one(key), key)?;
        Some(&self.nodes[idx as usize].value)
    }

    pub fn contains<Q>(&self, key: &Q) -> bool
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ?Sized,
    {
        self.find(self.hasher.hash_one(key), key).is_some()
    }

    /// Insert or overwrite; returns the evicted entry when the cache was full.
    pub fn insert(&mut self, key: K, value: V) -> Option<(K, V)> {
        let hash = self.hasher.hash_one(&key);
        if let Some(idx) = self.find(hash, &key) {
            self.nodes[idx as usize].value = value;
            self.touch(idx);
            return None;
        }
        let node = Node { key, value };
        let mut evicted = None;
        let idx = if self.table.len() == self.capacity {
            let idx = self.tail;
            self.unindex(idx);
            let old = std::mem::replace(&mut self.nodes[idx as usize], node);
            self.hashes[idx as usize] = hash;
            evicted = Some((old.key, old.value));
            idx
        } else if let Some(idx) = self.free.pop() {
            self.nodes[idx as usize] = node;
            self.hashes[idx as usize] = hash;
            idx
        } else {
            self.nodes.push(node);
            self.hashes.push(hash);
            self.links.push(Link { prev: NIL, next: NIL });
            (self.nodes.len() - 1) as u32
        };
        let hashes = &self.hashes;
        self.table
            .insert_unique(hash, Slot { idx, tag: tag(hash) }, |s| hashes[s.idx as usize]);
        self.push_front(idx);
        evicted
    }

    pub fn remove<Q>(&mut self, key: &Q) -> Option<V>
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ?Sized,
        V: Default,
    {
        let idx = self.find(self.hasher.hash_one(key), key)?;
        self.unindex(idx);
        self.free.push(idx);
        Some(std::mem::take(&mut self.nodes[idx as usize].value))
    }

    /// Keys from most to least recently used.
    pub fn keys(&self) -> Vec<K> {
        let mut out = Vec::with_capacity(self.len());
        let mut idx = self.head;
        while idx != NIL {
            out.push(self.nodes[idx as usize].key.clone());
            idx = self.links[idx as usize].next;
        }
        out
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&K) -> bool)
    where
        V: Default,
    {
        let doomed: Vec<u32> = self
            .table
            .iter()
            .map(|s| s.idx)
            .filter(|&i| !keep(&self.nodes[i as usize].key))
            .collect();
        for idx in doomed {
            self.unindex(idx);
            self.free.push(idx);
            self.nodes[idx as usize].value = V::default();
        }
    }

    pub fn clear(&mut self) {
        self.table.clear();
        self.nodes.clear();
        self.hashes.clear();
        self.links.clear();
        self.free.clear();
        self.head = NIL;
        self.tail = NIL;
    }
}

/// Process-local id of a registered model, embedded in cache keys.
pub type ModelId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FeatureKey {
    pub model: ModelId,
    pub version: u64,
    pub item: Item,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PredictionKey {
    pub model: ModelId,
    pub version: u64,
    pub uid: u64,
    pub item: Item,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CacheConfig {
    pub enabled: bool,
    pub prediction_capacity: usize,
    pub feature_capacity: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            enabled: true,
            prediction_capacity: 100_000,
            feature_capacity: 50_000,
        }
    }
}

#[derive(Default)]
struct Counters {
    hits: AtomicU64,
    misses: AtomicU64,
}

impl Counters {
    fn record(&self, hit: bool) {
        if hit {
            self.hits.fetch_add(1, Ordering::Relaxed);
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn stats(&self, len: usize) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            len,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub len: usize,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

pub struct FeatureCache {
    lru: Mutex<LruCache<FeatureKey, Arc<[f64]>>>,
    counters: Counters,
}

impl FeatureCache {
    pub fn new(capacity: usize) -> Self {
        FeatureCache {
            lru: Mutex::new(LruCache::new(capacity)),
            counters: Counters::default(),
        }
    }

    pub fn get(&self, key: &FeatureKey) -> Option<Arc<[f64]>> {
        let hit = self.lru.lock().get(key).cloned();
        self.counters.record(hit.is_some());
        hit
    }

    pub fn insert(&self, key: FeatureKey, value: Arc<[f64]>) {
        self.lru.lock().insert(key, value);
    }

    pub fn items_for(&self, model: ModelId, version: u64) -> Vec<Item> {
        let lru = self.lru.lock();
        lru.keys()
            .into_iter()
            .rev()
            .filter(|k| k.model == model && k.version == version)
            .map(|k| k.item)
            .collect()
    }

    pub fn purge(&self, model: ModelId, keep_version: Option<u64>) {
        self.lru
            .lock()
            .retain(|k| k.model != model || Some(k.version) == keep_version);
    }

    pub fn stats(&self) -> CacheStats {
        let len = self.lru.lock().len();
        self.counters.stats(len)
    }

    pub fn reset_stats(&self) {
        self.counters.hits.store(0, Ordering::Relaxed);
        self.counters.misses.store(0, Ordering::Relaxed);
    }
}

struct PredictionInner {
    lru: LruCache<PredictionKey, f64>,
    /// (model, uid) → cached (version, item) pairs, for per-user purges.
    by_user: FxHashMap<(ModelId, u64), FxHashSet<(u64, Item)>>,
}

impl PredictionInner {
    fn unindex(&mut self, key: &PredictionKey) {
        let user = (key.model, key.uid);
        if let Some(set) = self.by_user.get_mut(&user) {
            set.remove(&(key.version, key.item.clone()));
            if set.is_empty() {
                self.by_user.remove(&user);
            }
        }
    }

    fn insert(&mut self, key: PredictionKey, value: f64) {
        self.by_user
            .entry((key.model, key.uid))
            .or_default()
            .insert((key.version, key.item.clone()));
        if let Some((old, _)) = self.lru.insert(key, value) {
            self.unindex(&old);
        }
    }
}

pub struct PredictionCache {
    inner: Mutex<PredictionInner>,
    counters: Counters,
}

impl PredictionCache {
    pub fn new(capacity: usize) -> Self {
        PredictionCache {
            inner: Mutex::new(PredictionInner {
                lru: LruCache::new(capacity),
                by_user: FxHashMap::default(),
            }),
            counters: Counters::default(),
        }
    }

    pub fn get(&self, key: &PredictionKey) -> Option<f64> {
        let hit = self.inner.lock().lru.get(key).copied();
        self.counters.record(hit.is_some());
        hit
    }

    /// Batch lookup under one lock acquisition.
    pub fn get_many(&self, model: ModelId, version: u64, uid: u64, items: &[Item]) -> Vec<Option<f64>> {
        let mut out = Vec::with_capacity(items.len());
        let mut keys = Vec::with_capacity(BATCH);
        let mut inner = self.inner.lock();
        for chunk in items.chunks(BATCH) {
            keys.clear();
            keys.extend(chunk.iter().map(|item| PredictionKey {
                model,
                version,
                uid,
                item: item.clone(),
            }));
            inner.lru.get_batch_into(&keys, &mut out);
        }
        drop(inner);
        let hits = out.iter().filter(|v| v.is_some()).count() as u64;
        self.counters.hits.fetch_add(hits, Ordering::Relaxed);
        self.counters
            .misses
            .fetch_add(items.len() as u64 - hits, Ordering::Relaxed);
        out
    }

    pub fn insert(&self, key: PredictionKey, value: f64) {
        self.inner.lock().insert(key, value);
    }

    pub fn insert_many(&self, entries: impl IntoIterator<Item = (PredictionKey, f64)>) {
        let mut inner = self.inner.lock();
        for (k, v) in entries {
            inner.insert(k, v);
        }
    }

    /// Drop every cached prediction of one user, across versions.
    pub fn purge_user(&self, model: ModelId, uid: u64) {
        let mut inner = self.inner.lock();
        if let Some(entries) = inner.by_user.remove(&(model, uid)) {
            for (version, item) in entries {
                inner.lru.remove(&PredictionKey {
                    model,
                    version,
                    uid,
                    item,
                });
            }
        }
    }

    pub fn keys_for(&self, model: ModelId, version: u64) -> Vec<(u64, Item)> {
        let inner = self.inner.lock();
        inner
            .lru
            .keys()
            .into_iter()
            .rev()
            .filter(|k| k.model == model && k.version == version)
            .map(|k| (k.uid, k.item))
            .collect()
    }

    pub fn purge(&self, model: ModelId, keep_version: Option<u64>) {
        let mut inner = self.inner.lock();
        let doomed: Vec<PredictionKey> = inner
            .lru
            .keys()
            .into_iter()
            .filter(|k| k.model == model && Some(k.version) != keep_version)
            .collect();
        for k in doomed {
            inner.lru.remove(&k);
            inner.unindex(&k);
        }
    }

    pub fn stats(&self) -> CacheStats {
        let len = self.inner.lock().lru.len();
        self.counters.stats(len)
    }

    pub fn reset_stats(&self) {
        self.counters.hits.store(0, Ordering::Relaxed);
        self.counters.misses.store(0, Ordering::Relaxed);
    }
}

/// The process-wide cache pair shared by all models.
pub struct Caches {
    pub config: CacheConfig,
    pub features: FeatureCache,
    pub predictions: PredictionCache,
}

impl Caches {
    pub fn new(config: CacheConfig) -> Self {
        Caches {
            features: FeatureCache::new(config.feature_capacity.max(1)),
            predictions: PredictionCache::new(config.prediction_capacity.max(1)),
            config,
        }
    }

    pub fn enabled(&self) -> bool {
        self.config.enabled
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn evicts_least_recently_used() {
        let mut c = LruCache::new(2);
        assert_eq!(c.insert(1, "a"), None);
        assert_eq!(c.insert(2, "b"), None);
        assert_eq!(c.get(&1), Some(&"a"));
        assert_eq!(c.insert(3, "c"), Some((2, "b")));
        assert!(!c.contains(&2));
        assert_eq!(c.keys(), vec![3, 1]);
        assert_eq!(c.insert(1, "A"), None);
        assert_eq!(c.peek(&1), Some(&"A"));
        assert_eq!(c.keys(), vec![1, 3]);
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn remove_and_reuse_slots() {
        let mut c: LruCache<u32, u32> = LruCache::new(3);
        for k in 0..3 {
            c.insert(k, k * 10);
        }
        assert_eq!(c.remove(&1), Some(10));
        assert_eq!(c.remove(&1), None);
        c.insert(7, 70);
        c.insert(8, 80);
        assert_eq!(c.keys(), vec![8, 7, 2]);
        c.retain(|k| k % 2 == 0);
        assert_eq!(c.keys(), vec![8, 2]);
        c.clear();
        assert!(c.is_empty());
        c.insert(1, 1);
        assert_eq!(c.keys(), vec![1]);
    }

    #[test]
    fn capacity_one() {
        let mut c = LruCache::new(1);
        c.insert("x", 1);
        assert_eq!(c.insert("y", 2), Some(("x", 1)));
        assert_eq!(c.keys(), vec!["y"]);
    }

    #[test]
    fn prediction_purge_by_user() {
        let cache = PredictionCache::new(10);
        let key = |uid, item, version| PredictionKey {
            model: 1,
            version,
            uid,
            item: Item::Id(item),
        };
        cache.insert(key(1, 10, 1), 1.0);
        cache.insert(key(1, 11, 2), 2.0);
        cache.insert(key(2, 10, 1), 3.0);
        cache.purge_user(1, 1);
        assert_eq!(cache.get(&key(1, 10, 1)), None);
        assert_eq!(cache.get(&key(1, 11, 2)), None);
        assert_eq!(cache.get(&key(2, 10, 1)), Some(3.0));
        let stats = cache.stats();
        assert_eq!((stats.hits, stats.misses, stats.len), (1, 2, 1));

        cache.insert(key(3, 1, 5), 1.0);
        cache.purge(1, Some(5));
        assert_eq!(cache.keys_for(1, 5), vec![(3, Item::Id(1))]);
    }

    #[test]
    fn eviction_keeps_user_index_consistent() {
        let cache = PredictionCache::new(2);
        let key = |uid, item| PredictionKey {
            model: 0,
            version: 0,
            uid,
            item: Item::Id(item),
        };
        cache.insert(key(1, 1), 1.0);
        cache.insert(key(1, 2), 2.0);
        cache.insert(key(2, 3), 3.0); // evicts (1, 1)
        assert_eq!(cache.inner.lock().by_user[&(0, 1)].len(), 1);
        cache.purge_user(0, 1);
        assert_eq!(cache.stats().len, 1);
        assert!(!cache.inner.lock().by_user.contains_key(&(0, 1)));
    }

    #[derive(Clone, Debug)]
    enum Op {
        Get(u8),
        Insert(u8, u16),
        Remove(u8),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..32).prop_map(Op::Get),
            (0u8..32, any::<u16>()).prop_map(|(k, v)| Op::Insert(k, v)),
            (0u8..32).prop_map(Op::Remove),
        ]
    }

    proptest! {
        /// Against a recency-ordered vector model.
        #[test]
        fn matches_reference_model(cap in 1usize..12, ops in proptest::collection::vec(op(), 0..300)) {
            let mut lru = LruCache::new(cap);
            let mut model: Vec<(u8, u16)> = Vec::new(); // most recent last
            for op in ops {
                match op {
                    Op::Get(k) => {
                        let expected = model.iter().position(|(mk, _)| *mk == k).map(|p| {
                            let e = model.remove(p);
                            model.push(e);
                            e.1
                        });
                        prop_assert_eq!(lru.get(&k).copied(), expected);
                    }
                    Op::Insert(k, v) => {
                        let evicted = lru.insert(k, v);
                        let mut expected = None;
                        if let Some(p) = model.iter().position(|(mk, _)| *mk == k) {
                            model.remove(p);
                        } else if model.len() == cap {
                            expected = Some(model.remove(0));
                        }
                        model.push((k, v));
                        prop_assert_eq!(evicted, expected);
                    }
                    Op::Remove(k) => {
                        let expected = model.iter().position(|(mk, _)| *mk == k).map(|p| model.remove(p).1);
                        prop_assert_eq!(lru.remove(&k), expected);
                    }
                }
                prop_assert!(lru.len() <= cap);
                let keys: Vec<u8> = model.iter().rev().map(|(k, _)| *k).collect();
                prop_assert_eq!(lru.keys(), keys);
            }
        }
    }
}
