//! Server-side state machine. Every public operation is one atomic store
//! transaction; dataset, model and workflow bookkeeping lives in `__sys/`
//! entries serialized as JSON.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::store::{BlobWriter, Store};

#[derive(Debug, Clone)]
pub struct EngineOptions {
    /// Leases granted before a task is declared dead.
    pub max_attempts: u32,
    /// Notifications consumed per `master_step`.
    pub master_batch: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            max_attempts: 3,
            master_batch: 256,
        }
    }
}

pub struct Engine {
    pub(crate) store: Arc<Store>,
    pub(crate) opts: EngineOptions,
    uploads: Mutex<HashMap<u64, BlobWriter>>,
    next_upload: AtomicU64,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("store", &self.store).finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(store: Arc<Store>, opts: EngineOptions) -> Self {
        Engine {
            store,
            opts,
            uploads: Mutex::new(HashMap::new()),
            next_upload: AtomicU64::new(1),
        }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn options(&self) -> &EngineOptions {
        &self.opts
    }

    pub fn now_ms(&self) -> u64 {
        self.store.clock().now_ms()
    }

    pub fn blob_begin(&self, chunk_size: u32, codec_id: u8) -> Result<u64> {
        let w = self.store.begin_blob(chunk_size, codec_id)?;
        let id = self.next_upload.fetch_add(1, Ordering::SeqCst);
        self.uploads.lock().insert(id, w);
        Ok(id)
    }

    pub fn blob_chunk(&self, upload: u64, index: u32, raw_len: u32, data: Vec<u8>) -> Result<()> {
        let mut w = self
            .uploads
            .lock()
            .remove(&upload)
            .ok_or_else(|| Error::NotFound(format!("upload {upload}")))?;
        match self.store.blob_write_encoded(&mut w, index, raw_len, data) {
            Ok(()) => {
                self.uploads.lock().insert(upload, w);
                Ok(())
            }
            Err(e) => {
                if !self.store.is_crashed() {
                    self.store.abort_blob(w);
                }
                Err(e)
            }
        }
    }

    pub fn blob_finish(&self, upload: u64) -> Result<crate::store::BlobPointer> {
        let w = self
            .uploads
            .lock()
            .remove(&upload)
            .ok_or_else(|| Error::NotFound(format!("upload {upload}")))?;
        self.store.finish_blob(w)
    }

    /// Uploads begun but neither finished nor aborted.
    pub fn open_uploads(&self) -> usize {
        self.uploads.lock().len()
    }

    pub fn blob_abort(&self, upload: u64) {
        if let Some(w) = self.uploads.lock().remove(&upload) {
            self.store.abort_blob(w);
        }
    }
}

/// Hex-encodes a user key so it can be embedded as one `/`-free component
/// of a system key.
pub(crate) fn part(s: &str) -> String {
    hex::encode(s.as_bytes())
}

pub(crate) fn unpart(s: &str) -> Option<String> {
    String::from_utf8(hex::decode(s).ok()?).ok()
}
