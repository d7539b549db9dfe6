//! Dataset views, persisted batch cursors and stream controllers.
//!
//! A view is only a named query; membership is evaluated at read time.
//! Stream controllers track a watermark over the store's commit sequence:
//! every document committed after the watermark that matches the view is
//! pending, and a trigger dispatches exactly the range
//! `(watermark, max pending seq]` as one task.

pub mod sample;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{part, Engine};
use crate::error::{Error, Result};
use crate::store::{Document, ScanRequest, ScanStrategy, Txn, SYS_PREFIX};
use crate::tagquery::TagQuery;
use crate::workflow::{self, Task, TaskSpec, TaskTemplate};

pub const DEFAULT_THRESHOLD: u64 = 32;
pub const DEFAULT_MAX_AGE_MS: u64 = 5000;
pub const MIN_MAX_AGE_MS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetView {
    pub view_key: String,
    pub query: TagQuery,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCursor {
    pub cursor_id: String,
    pub view_key: String,
    /// Last consumed key; the next batch starts strictly after it.
    pub position: Option<String>,
    pub batch_size: u32,
    /// Restricts the cursor to documents with `lo < seq <= hi`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_range: Option<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRead {
    pub docs: Vec<Document>,
    pub cursor: BatchCursor,
    pub end: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamController {
    pub view_key: String,
    pub threshold: u64,
    pub max_age_ms: u64,
    pub template: TaskTemplate,
    /// Highest commit seq already dispatched.
    pub watermark: u64,
    /// Largest key among dispatched documents.
    pub watermark_key: Option<String>,
    pub dispatched_tasks: u64,
    pub attached_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamStatus {
    pub controller: StreamController,
    pub pending_count: u64,
    pub oldest_pending_at: Option<u64>,
}

pub(crate) fn view_key(view: &str) -> String {
    format!("{SYS_PREFIX}view/{}", part(view))
}

fn cursor_key(id: &str) -> String {
    format!("{SYS_PREFIX}cursor/{}", part(id))
}

pub(crate) fn stream_key(view: &str) -> String {
    format!("{SYS_PREFIX}stream/{}", part(view))
}

pub(crate) const STREAM_PREFIX: &str = "__sys/stream/";

/// Deterministic id of the task dispatching `(lo, hi]` of `view`.
pub fn dispatch_task_id(view: &str, lo: u64, hi: u64) -> String {
    let mut h = Sha256::new();
    h.update((view.len() as u64).to_le_bytes());
    h.update(view.as_bytes());
    h.update(lo.to_le_bytes());
    h.update(hi.to_le_bytes());
    format!("stream-{}", &hex::encode(h.finalize())[..16])
}

pub(crate) fn load_view(t: &Txn<'_>, view: &str) -> Result<DatasetView> {
    t.sys_get_json(&view_key(view))?
        .ok_or_else(|| Error::ViewNotFound(view.to_owned()))
}

pub(crate) fn view_exists(t: &Txn<'_>, view: &str) -> bool {
    t.sys_get(&view_key(view)).is_some()
}

impl Engine {
    pub fn define_view(&self, view: &str, query: TagQuery) -> Result<DatasetView> {
        if view.is_empty() {
            return Err(Error::InvalidArgument("view key is empty".into()));
        }
        query.validate()?;
        self.store.transact(|t| {
            if view_exists(t, view) {
                return Err(Error::DuplicateKey(view.to_owned()));
            }
            let v = DatasetView {
                view_key: view.to_owned(),
                query,
                created_at: t.now_ms(),
            };
            t.sys_put_json(&view_key(view), &v)?;
            Ok(v)
        })
    }

    pub fn get_view(&self, view: &str) -> Result<DatasetView> {
        self.store
            .sys_get_json(&view_key(view))?
            .ok_or_else(|| Error::ViewNotFound(view.to_owned()))
    }

    pub fn list_views(&self) -> Result<Vec<DatasetView>> {
        self.store
            .sys_range(&format!("{SYS_PREFIX}view/"))
            .into_iter()
            .map(|(_, v)| Ok(serde_json::from_slice(&v)?))
            .collect()
    }

    /// Number of documents currently matching `view`.
    pub fn count_view(&self, view: &str) -> Result<u64> {
        let v = self.get_view(view)?;
        Ok(self.store.scan_all(&v.query)?.len() as u64)
    }

    /// Creates the cursor, or returns the persisted one so a restarted
    /// reader resumes where it stopped.
    pub fn open_cursor(
        &self,
        cursor_id: &str,
        view: &str,
        batch_size: u32,
        seq_range: Option<(u64, u64)>,
    ) -> Result<BatchCursor> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        self.store.transact(|t| {
            load_view(t, view)?;
            if let Some(c) = t.sys_get_json::<BatchCursor>(&cursor_key(cursor_id))? {
                return Ok(c);
            }
            let c = BatchCursor {
                cursor_id: cursor_id.to_owned(),
                view_key: view.to_owned(),
                position: None,
                batch_size,
                seq_range,
            };
            t.sys_put_json(&cursor_key(cursor_id), &c)?;
            Ok(c)
        })
    }

    pub fn get_cursor(&self, cursor_id: &str) -> Result<BatchCursor> {
        self.store
            .sys_get_json(&cursor_key(cursor_id))?
            .ok_or_else(|| Error::NotFound(format!("cursor `{cursor_id}`")))
    }

    /// Moves the cursor back to the start of its view.
    pub fn reset_cursor(&self, cursor_id: &str) -> Result<BatchCursor> {
        self.store.transact(|t| {
            let mut c: BatchCursor = t
                .sys_get_json(&cursor_key(cursor_id))?
                .ok_or_else(|| Error::NotFound(format!("cursor `{cursor_id}`")))?;
            c.position = None;
            t.sys_put_json(&cursor_key(cursor_id), &c)?;
            Ok(c)
        })
    }

    pub fn delete_cursor(&self, cursor_id: &str) -> Result<()> {
        self.store.transact(|t| {
            t.sys_delete(&cursor_key(cursor_id));
            Ok(())
        })
    }

    /// Next batch in ascending key order; the advanced position is persisted
    /// in the same record. Blob payloads are returned as pointers and
    /// resolved by the caller's transport.
    pub fn read_batch(&self, cursor_id: &str) -> Result<BatchRead> {
        self.store.transact(|t| {
            let mut c: BatchCursor = t
                .sys_get_json(&cursor_key(cursor_id))?
                .ok_or_else(|| Error::NotFound(format!("cursor `{cursor_id}`")))?;
            let v = load_view(t, &c.view_key)?;
            let mut req = ScanRequest::new(&v.query, c.batch_size as usize);
            req.after = c.position.as_deref();
            req.seq_range = c.seq_range;
            let out = t.scan(&req)?;
            let docs: Vec<Document> = out.hits.iter().map(|h| (*h.doc).clone()).collect();
            if let Some(last) = docs.last() {
                c.position = Some(last.key.clone());
                t.sys_put_json(&cursor_key(cursor_id), &c)?;
            }
            Ok(BatchRead {
                docs,
                cursor: c,
                end: !out.more,
            })
        })
    }

    pub fn attach_stream(
        &self,
        view: &str,
        threshold: u64,
        max_age_ms: u64,
        template: TaskTemplate,
    ) -> Result<StreamController> {
        if threshold == 0 {
            return Err(Error::InvalidArgument("threshold must be >= 1".into()));
        }
        if max_age_ms < MIN_MAX_AGE_MS {
            return Err(Error::InvalidArgument(format!(
                "max_age must be >= {MIN_MAX_AGE_MS} ms"
            )));
        }
        self.store.transact(|t| {
            load_view(t, view)?;
            if t.sys_get(&stream_key(view)).is_some() {
                return Err(Error::AlreadyAttached(view.to_owned()));
            }
            workflow::check_refs(t, template.kind.needs_refs(), view, &template.model_key)?;
            let c = StreamController {
                view_key: view.to_owned(),
                threshold,
                max_age_ms,
                template,
                watermark: 0,
                watermark_key: None,
                dispatched_tasks: 0,
                attached_at: t.now_ms(),
            };
            t.sys_put_json(&stream_key(view), &c)?;
            Ok(c)
        })
    }

    pub fn stream_status(&self, view: &str) -> Result<StreamStatus> {
        let c: StreamController = self
            .store
            .sys_get_json(&stream_key(view))?
            .ok_or_else(|| Error::NotFound(format!("stream on `{view}`")))?;
        let v = self.get_view(view)?;
        let mut req = ScanRequest::new(&v.query, usize::MAX);
        req.seq_range = Some((c.watermark, u64::MAX));
        req.strategy = ScanStrategy::Linear;
        let out = self.store.scan_documents(&req)?;
        Ok(StreamStatus {
            pending_count: out.hits.len() as u64,
            oldest_pending_at: out.hits.iter().map(|h| h.written_at).min(),
            controller: c,
        })
    }

    pub fn list_streams(&self) -> Result<Vec<StreamController>> {
        self.store
            .sys_range(STREAM_PREFIX)
            .into_iter()
            .map(|(_, v)| Ok(serde_json::from_slice(&v)?))
            .collect()
    }

    /// Evaluates the trigger and, if it fires, submits the task and moves
    /// the watermark in one atomic record.
    pub fn poll_stream(&self, view: &str) -> Result<Option<Task>> {
        let max_attempts = self.opts.max_attempts;
        self.store.transact(|t| poll_stream_in(t, view, max_attempts))
    }
}

pub(crate) fn poll_stream_in(t: &mut Txn<'_>, view: &str, max_attempts: u32) -> Result<Option<Task>> {
    let mut c: StreamController = t
        .sys_get_json(&stream_key(view))?
        .ok_or_else(|| Error::NotFound(format!("stream on `{view}`")))?;
    let v = load_view(t, view)?;
    let mut req = ScanRequest::new(&v.query, usize::MAX);
    req.seq_range = Some((c.watermark, u64::MAX));
    let out = t.scan(&req)?;
    let count = out.hits.len() as u64;
    if count == 0 {
        return Ok(None);
    }
    let oldest = out.hits.iter().map(|h| h.written_at).min().unwrap_or(0);
    let now = t.now_ms();
    if count < c.threshold && now.saturating_sub(oldest) < c.max_age_ms {
        return Ok(None);
    }
    let hi = out.hits.iter().map(|h| h.seq).max().expect("non-empty");
    let lo = c.watermark;
    let spec = TaskSpec {
        task_id: dispatch_task_id(view, lo, hi),
        kind: c.template.kind.clone(),
        input_dataset: view.to_owned(),
        model_key: c.template.model_key.clone(),
        output_dataset: c.template.output_dataset.clone(),
        params: c.template.params.clone(),
        input_range: Some((lo, hi)),
        depends_on: Vec::new(),
    };
    let task = workflow::submit_in(t, spec, None, false, max_attempts)?;
    let max_key = out.hits.iter().map(|h| h.doc.key.as_str()).max().map(str::to_owned);
    c.watermark = hi;
    c.watermark_key = max_key.max(c.watermark_key.take());
    c.dispatched_tasks += 1;
    t.sys_put_json(&stream_key(view), &c)?;
    Ok(Some(task))
}
