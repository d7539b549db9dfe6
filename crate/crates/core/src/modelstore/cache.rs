use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::modelstore::fgts::NamedTensors;

pub const DEFAULT_CACHE_BYTES: usize = 256 << 20;

struct Entry {
    tensors: Arc<NamedTensors>,
    bytes: usize,
    tick: u64,
}

/// Byte-bounded LRU of decoded model states, keyed by `(model, version)`.
pub struct ModelCache {
    capacity: usize,
    inner: Mutex<Inner>,
    blob_reads: AtomicU64,
    hits: AtomicU64,
}

#[derive(Default)]
struct Inner {
    entries: HashMap<(String, String), Entry>,
    used: usize,
    tick: u64,
}

impl Default for ModelCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_BYTES)
    }
}

impl std::fmt::Debug for ModelCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelCache")
            .field("capacity", &self.capacity)
            .field("blob_reads", &self.blob_reads())
            .finish()
    }
}

impl ModelCache {
    pub fn new(capacity: usize) -> Self {
        ModelCache {
            capacity,
            inner: Mutex::new(Inner::default()),
            blob_reads: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        }
    }

    /// Number of state blobs fetched from the store.
    pub fn blob_reads(&self) -> u64 {
        self.blob_reads.load(Ordering::SeqCst)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn used_bytes(&self) -> usize {
        self.inner.lock().used
    }

    pub(crate) fn note_blob_read(&self) {
        self.blob_reads.fetch_add(1, Ordering::SeqCst);
    }

    pub fn get(&self, model: &str, version: &str) -> Option<Arc<NamedTensors>> {
        let mut g = self.inner.lock();
        g.tick += 1;
        let tick = g.tick;
        let e = g.entries.get_mut(&(model.to_owned(), version.to_owned()))?;
        e.tick = tick;
        self.hits.fetch_add(1, Ordering::SeqCst);
        Some(e.tensors.clone())
    }

    pub fn insert(&self, model: &str, version: &str, tensors: Arc<NamedTensors>) {
        let bytes: usize = tensors.iter().map(|(n, t)| n.len() + t.len() * 4).sum();
        if bytes > self.capacity {
            return;
        }
        let mut g = self.inner.lock();
        g.tick += 1;
        let tick = g.tick;
        let key = (model.to_owned(), version.to_owned());
        if let Some(old) = g.entries.remove(&key) {
            g.used -= old.bytes;
        }
        while g.used + bytes > self.capacity {
            let victim = g
                .entries
                .iter()
                .min_by_key(|(_, e)| e.tick)
                .map(|(k, _)| k.clone())
                .expect("used > 0 implies entries");
            let e = g.entries.remove(&victim).expect("present");
            g.used -= e.bytes;
        }
        g.used += bytes;
        g.entries.insert(key, Entry { tensors, bytes, tick });
    }
}
