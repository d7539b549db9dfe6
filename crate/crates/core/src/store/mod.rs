//! Durable document store with tag indexes and a chunked blob store.
//!
//! Every mutation is one log record appended (and synced) before the
//! in-memory state changes, so a crash leaves each record either fully
//! applied or absent. Reads take a shared lock and see the state as of the
//! last applied record; writes are serialized through [`Store::transact`].
//!
//! Directory layout:
//!
//! ```text
//! MANIFEST                 format version, inline threshold, segments, indexes
//! LOCK                     held exclusively by the writable process
//! log-<id>.seg             append-only record segments
//! index-<hex tag>.idx      index snapshots
//! blobs/<blob_id>.<n>      encoded blob chunks
//! ```

pub mod blob;
pub mod document;
pub mod fault;
pub mod index;
pub mod log;
pub mod manifest;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File};
use std::ops::Bound;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::clock::{system_clock, SharedClock};
use crate::codec::Encode;
use crate::error::{Error, Result};
use crate::tagquery::TagQuery;

pub use blob::{BlobWriter, Codec, DEFAULT_CHUNK, MAX_CHUNK, MIN_CHUNK};
pub use document::{
    BlobPointer, Document, DocumentKey, IndexKey, Payload, TagMap, TagValue, Variant, SYS_PREFIX,
};
pub use fault::{FaultInjector, FaultPoint};
pub use index::TagIndex;
use log::{Op, Record, SegmentWriter};
use manifest::Manifest;

pub const DEFAULT_INLINE_THRESHOLD: usize = 16 * 1024;
const LOCK_FILE: &str = "LOCK";

#[derive(Clone)]
pub struct StoreOptions {
    /// Largest inline payload accepted by `put_document`.
    pub inline_threshold: usize,
    /// fsync every record and chunk before acknowledging it.
    pub sync: bool,
    /// Cap on encoded blob bytes held on disk; `None` is unbounded.
    pub max_blob_bytes: Option<u64>,
    /// Roll to a new segment once the active one exceeds this size.
    pub segment_max_bytes: u64,
    /// Compact once this many bytes of the log are superseded.
    pub compact_garbage_bytes: u64,
    pub clock: SharedClock,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            inline_threshold: DEFAULT_INLINE_THRESHOLD,
            sync: true,
            max_blob_bytes: None,
            segment_max_bytes: 64 << 20,
            compact_garbage_bytes: 64 << 20,
            clock: system_clock(),
        }
    }
}

impl std::fmt::Debug for StoreOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StoreOptions")
            .field("inline_threshold", &self.inline_threshold)
            .field("sync", &self.sync)
            .field("max_blob_bytes", &self.max_blob_bytes)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DocEntry {
    pub doc: Arc<Document>,
    pub seq: u64,
    pub written_at: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct SysEntry {
    pub value: Arc<Vec<u8>>,
    pub blob_refs: Vec<String>,
}

/// In-memory image of the log.
#[derive(Debug, Default)]
pub(crate) struct State {
    pub docs: BTreeMap<String, DocEntry>,
    pub by_seq: BTreeSet<(u64, String)>,
    pub staged: HashMap<String, BTreeMap<String, Arc<Document>>>,
    pub committed_groups: HashSet<String>,
    pub sys: BTreeMap<String, SysEntry>,
    pub indexes: BTreeMap<String, TagIndex>,
    pub variant_counts: HashMap<String, [u64; 4]>,
    pub blob_refs: HashMap<String, u64>,
    pub last_seq: u64,
    pub garbage_bytes: u64,
}

/// Position for the next page of a scan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ScanCursor {
    /// Last key returned (exclusive lower bound for the next page).
    pub after: String,
    /// Sequence number of the snapshot the scan started from.
    pub snapshot: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPage {
    pub keys: Vec<DocumentKey>,
    pub next: Option<ScanCursor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanStrategy {
    /// Use the most selective covering index, else scan linearly.
    #[default]
    Auto,
    Linear,
}

#[derive(Debug, Clone)]
pub struct ScanRequest<'a> {
    pub query: &'a TagQuery,
    pub after: Option<&'a str>,
    /// Only documents whose seq is at or below this.
    pub snapshot: Option<u64>,
    /// Only documents with `lo < seq <= hi`.
    pub seq_range: Option<(u64, u64)>,
    pub limit: usize,
    pub strategy: ScanStrategy,
}

impl<'a> ScanRequest<'a> {
    pub fn new(query: &'a TagQuery, limit: usize) -> Self {
        ScanRequest {
            query,
            after: None,
            snapshot: None,
            seq_range: None,
            limit,
            strategy: ScanStrategy::Auto,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScanHit {
    pub doc: Arc<Document>,
    pub seq: u64,
    pub written_at: u64,
}

#[derive(Debug, Clone)]
pub struct ScanOutput {
    pub hits: Vec<ScanHit>,
    pub more: bool,
    pub used_index: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct StoreStats {
    pub documents: u64,
    pub system_entries: u64,
    pub referenced_blobs: u64,
    pub last_seq: u64,
    pub log_bytes: u64,
    pub blob_bytes: u64,
}

impl State {
    fn add_ref(&mut self, id: &str) {
        *self.blob_refs.entry(id.to_owned()).or_default() += 1;
    }

    fn drop_ref(&mut self, id: &str) {
        if let Some(n) = self.blob_refs.get_mut(id) {
            *n -= 1;
            if *n == 0 {
                self.blob_refs.remove(id);
            }
        }
    }

    fn insert_visible(&mut self, doc: Arc<Document>, seq: u64, written_at: u64) {
        for (name, value) in &doc.tags {
            self.variant_counts.entry(name.clone()).or_default()[value.variant().index()] += 1;
            if let Some(idx) = self.indexes.get_mut(name) {
                idx.insert(value, &doc.key);
            }
        }
        if let Some(id) = doc.blob_id() {
            let id = id.to_owned();
            self.add_ref(&id);
        }
        self.by_seq.insert((seq, doc.key.clone()));
        self.docs.insert(
            doc.key.clone(),
            DocEntry {
                doc,
                seq,
                written_at,
            },
        );
    }

    fn remove_visible(&mut self, key: &str) {
        let Some(entry) = self.docs.remove(key) else {
            return;
        };
        self.by_seq.remove(&(entry.seq, key.to_owned()));
        for (name, value) in &entry.doc.tags {
            if let Some(c) = self.variant_counts.get_mut(name) {
                c[value.variant().index()] -= 1;
                if c.iter().all(|n| *n == 0) {
                    self.variant_counts.remove(name);
                }
            }
            if let Some(idx) = self.indexes.get_mut(name) {
                idx.remove(value, key);
            }
        }
        if let Some(id) = entry.doc.blob_id() {
            let id = id.to_owned();
            self.drop_ref(&id);
        }
        self.garbage_bytes += approx_doc_size(&entry.doc);
    }

    fn apply(&mut self, rec: Record) {
        let Record {
            seq,
            written_at,
            ops,
        } = rec;
        for op in ops {
            match op {
                Op::PutDoc(doc) => self.insert_visible(Arc::new(doc), seq, written_at),
                Op::StageDoc { group, doc } => {
                    if let Some(id) = doc.blob_id() {
                        let id = id.to_owned();
                        self.add_ref(&id);
                    }
                    let key = doc.key.clone();
                    let old = self
                        .staged
                        .entry(group)
                        .or_default()
                        .insert(key, Arc::new(doc));
                    if let Some(old) = old {
                        if let Some(id) = old.blob_id() {
                            let id = id.to_owned();
                            self.drop_ref(&id);
                        }
                        self.garbage_bytes += approx_doc_size(&old);
                    }
                }
                Op::ClearGroup(group) => {
                    if let Some(docs) = self.staged.remove(&group) {
                        for d in docs.values() {
                            if let Some(id) = d.blob_id() {
                                let id = id.to_owned();
                                self.drop_ref(&id);
                            }
                            self.garbage_bytes += approx_doc_size(d);
                        }
                    }
                }
                Op::CommitGroup(group) => {
                    if let Some(docs) = self.staged.remove(&group) {
                        for d in docs.into_values() {
                            // The staged reference moves to the visible doc.
                            if let Some(id) = d.blob_id() {
                                let id = id.to_owned();
                                self.drop_ref(&id);
                            }
                            self.insert_visible(d, seq, written_at);
                        }
                    }
                    self.committed_groups.insert(group);
                }
                Op::DeleteDoc(key) => self.remove_visible(&key),
                Op::PutSys {
                    key,
                    value,
                    blob_refs,
                } => {
                    for id in &blob_refs {
                        self.add_ref(id);
                    }
                    let old = self.sys.insert(
                        key,
                        SysEntry {
                            value: Arc::new(value),
                            blob_refs,
                        },
                    );
                    if let Some(old) = old {
                        for id in &old.blob_refs {
                            self.drop_ref(id);
                        }
                        self.garbage_bytes += old.value.len() as u64;
                    }
                }
                Op::DeleteSys(key) => {
                    if let Some(old) = self.sys.remove(&key) {
                        for id in &old.blob_refs {
                            self.drop_ref(id);
                        }
                        self.garbage_bytes += old.value.len() as u64;
                    }
                }
            }
        }
        self.last_seq = self.last_seq.max(seq);
    }

    /// Rejects the query if any visible document holds a queried tag in a
    /// different variant. Index and linear scans therefore fail identically.
    fn type_check(&self, query: &TagQuery) -> Result<()> {
        for p in &query.predicates {
            if let Some(counts) = self.variant_counts.get(&p.tag) {
                let want = p.test.variant();
                for v in Variant::ALL {
                    if v != want && counts[v.index()] > 0 {
                        return Err(p.mismatch(v));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn scan(&self, req: &ScanRequest<'_>) -> Result<ScanOutput> {
        self.type_check(req.query)?;
        let limit = req.limit.max(1);
        let admit = |e: &DocEntry| -> bool {
            if let Some(s) = req.snapshot {
                if e.seq > s {
                    return false;
                }
            }
            if let Some((lo, hi)) = req.seq_range {
                if e.seq <= lo || e.seq > hi {
                    return false;
                }
            }
            // Types were checked up front, so evaluation cannot fail.
            req.query.evaluate(&e.doc.tags).unwrap_or(false)
        };
        let hit = |e: &DocEntry| ScanHit {
            doc: e.doc.clone(),
            seq: e.seq,
            written_at: e.written_at,
        };

        let mut hits = Vec::new();
        let mut more = false;
        let mut used_index = None;

        let candidates: Option<Vec<&String>> = if let Some((lo, hi)) = req.seq_range {
            Some(
                self.by_seq
                    .range((Bound::Excluded((lo, String::new())), Bound::Unbounded))
                    .take_while(|(s, _)| *s <= hi)
                    .map(|(_, k)| k)
                    .collect(),
            )
        } else if req.strategy == ScanStrategy::Auto {
            self.best_index(req.query).map(|(name, sets)| {
                used_index = Some(name.to_owned());
                sets.into_iter().flatten().collect()
            })
        } else {
            None
        };

        match candidates {
            Some(mut keys) => {
                keys.sort_unstable();
                keys.dedup();
                let start = match req.after {
                    Some(a) => keys.partition_point(|k| k.as_str() <= a),
                    None => 0,
                };
                for k in &keys[start..] {
                    let Some(e) = self.docs.get(*k) else { continue };
                    if admit(e) {
                        if hits.len() == limit {
                            more = true;
                            break;
                        }
                        hits.push(hit(e));
                    }
                }
            }
            None => {
                let lower = match req.after {
                    Some(a) => Bound::Excluded(a.to_owned()),
                    None => Bound::Unbounded,
                };
                for (_, e) in self.docs.range((lower, Bound::Unbounded)) {
                    if admit(e) {
                        if hits.len() == limit {
                            more = true;
                            break;
                        }
                        hits.push(hit(e));
                    }
                }
            }
        }
        Ok(ScanOutput {
            hits,
            more,
            used_index,
        })
    }

    fn best_index<'s>(&'s self, query: &TagQuery) -> Option<(&'s str, Vec<&'s BTreeSet<String>>)> {
        let mut best: Option<(&str, Vec<&BTreeSet<String>>, usize)> = None;
        for p in &query.predicates {
            let Some(idx) = self.indexes.get(&p.tag) else {
                continue;
            };
            let Some(sets) = idx.candidates(p) else {
                continue;
            };
            let n: usize = sets.iter().map(|s| s.len()).sum();
            if best.as_ref().is_none_or(|(_, _, m)| n < *m) {
                best = Some((idx.tag_name.as_str(), sets, n));
            }
        }
        best.map(|(name, sets, _)| (name, sets))
    }

    fn sys_range<'s>(&'s self, prefix: &'s str) -> impl Iterator<Item = (&'s String, &'s SysEntry)> + 's {
        self.sys
            .range::<str, _>((Bound::Included(prefix), Bound::Unbounded))
            .take_while(move |(k, _)| k.starts_with(prefix))
    }
}

fn approx_doc_size(d: &Document) -> u64 {
    let payload = match &d.payload {
        Payload::Inline(b) => b.len(),
        Payload::Blob(p) => p.blob_id.len() + 56,
    };
    (d.key.len() + payload + d.tags.len() * 16 + 16) as u64
}

struct WriterState {
    segment: SegmentWriter,
    manifest: Manifest,
    log_bytes: u64,
}

/// A handle to an open store directory.
pub struct Store {
    dir: PathBuf,
    opts: StoreOptions,
    state: RwLock<State>,
    writer: Mutex<WriterState>,
    lock_file: Mutex<Option<File>>,
    crashed: AtomicBool,
    faults: FaultInjector,
    blob_bytes: AtomicU64,
    fresh_blobs: Mutex<HashSet<String>>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("dir", &self.dir).finish_non_exhaustive()
    }
}

impl Store {
    /// Opens (creating if needed) a store directory for writing.
    pub fn open(dir: impl AsRef<Path>, opts: StoreOptions) -> Result<Store> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join(blob::BLOB_DIR))?;
        let lock = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(dir.join(LOCK_FILE))?;
        if lock.try_lock().is_err() {
            return Err(Error::Locked(dir.display().to_string()));
        }

        let manifest = match Manifest::load(&dir)? {
            Some(m) => m,
            None => {
                let m = Manifest::new(opts.inline_threshold as u32);
                SegmentWriter::create(&dir, 1, opts.sync)?;
                m.store(&dir, opts.sync)?;
                m
            }
        };
        let mut opts = opts;
        opts.inline_threshold = manifest.inline_threshold as usize;

        // Segments unknown to the manifest are leftovers of an interrupted
        // compaction or roll.
        let listed: HashSet<u32> = manifest.segments.iter().copied().collect();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            if let Some(id) = entry.file_name().to_str().and_then(log::parse_segment_name) {
                if !listed.contains(&id) {
                    fs::remove_file(entry.path())?;
                }
            }
        }

        let mut state = State::default();
        for name in &manifest.indexes {
            state.indexes.insert(name.clone(), TagIndex::new(name.clone()));
        }
        let mut log_bytes = 0;
        let mut tail_len = 0;
        let last = *manifest.segments.last().expect("manifest lists a segment");
        for &id in &manifest.segments {
            let path = log::segment_path(&dir, id);
            let replay = if path.exists() {
                log::read_segment(&path)?
            } else if id == last {
                log::Replay {
                    records: Vec::new(),
                    valid_len: 0,
                    torn: false,
                }
            } else {
                return Err(Error::Corrupt(format!("missing segment {id}")));
            };
            if replay.torn && id != last {
                return Err(Error::Corrupt(format!("segment {id} is damaged")));
            }
            for rec in replay.records {
                state.apply(rec);
            }
            log_bytes += replay.valid_len;
            if id == last {
                tail_len = replay.valid_len;
            }
        }
        // Replay rebuilt the indexes in place; reuse an up-to-date
        // snapshot only when the rebuild would be identical anyway.
        for name in manifest.indexes.clone() {
            if let Ok(Some((snap, seq))) = TagIndex::load(&dir, &name) {
                if seq == state.last_seq && state.indexes.get(&name) == Some(&snap) {
                    continue;
                }
            }
            let rebuilt = build_index(&state, &name);
            rebuilt.save(&dir, state.last_seq)?;
            state.indexes.insert(name, rebuilt);
        }
        state.garbage_bytes = 0;

        let segment = SegmentWriter::reopen(&dir, last, tail_len, opts.sync)?;
        let blob_bytes = dir_size(&dir.join(blob::BLOB_DIR));
        Ok(Store {
            dir,
            opts,
            state: RwLock::new(state),
            writer: Mutex::new(WriterState {
                segment,
                manifest,
                log_bytes: log_bytes.max(tail_len),
            }),
            lock_file: Mutex::new(Some(lock)),
            crashed: AtomicBool::new(false),
            faults: FaultInjector::default(),
            blob_bytes: AtomicU64::new(blob_bytes),
            fresh_blobs: Mutex::new(HashSet::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn options(&self) -> &StoreOptions {
        &self.opts
    }

    pub fn clock(&self) -> &SharedClock {
        &self.opts.clock
    }

    pub fn inline_threshold(&self) -> usize {
        self.opts.inline_threshold
    }

    pub fn faults(&self) -> &FaultInjector {
        &self.faults
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed.load(Ordering::SeqCst)
    }

    fn check_alive(&self) -> Result<()> {
        if self.is_crashed() {
            Err(Error::Crashed("store handle is dead".into()))
        } else {
            Ok(())
        }
    }

    fn crash(&self, point: FaultPoint) -> Error {
        self.crashed.store(true, Ordering::SeqCst);
        // A dead process releases its lock.
        if let Some(f) = self.lock_file.lock().take() {
            let _ = f.unlock();
        }
        Error::Crashed(point.name())
    }

    pub fn last_seq(&self) -> u64 {
        self.state.read().last_seq
    }

    pub fn stats(&self) -> StoreStats {
        let st = self.state.read();
        let w = self.writer.lock();
        StoreStats {
            documents: st.docs.len() as u64,
            system_entries: st.sys.len() as u64,
            referenced_blobs: st.blob_refs.len() as u64,
            last_seq: st.last_seq,
            log_bytes: w.log_bytes,
            blob_bytes: self.blob_bytes.load(Ordering::SeqCst),
        }
    }

    /// Runs `f` as one atomic, durable write. Nothing is persisted if `f`
    /// fails; otherwise all of its operations land in a single log record.
    pub fn transact<R>(&self, f: impl FnOnce(&mut Txn<'_>) -> Result<R>) -> Result<R> {
        let mut w = self.writer.lock();
        self.check_alive()?;
        let (out, ops) = {
            let st = self.state.read();
            let mut txn = Txn::new(self, &st);
            let out = f(&mut txn)?;
            (out, txn.ops)
        };
        if ops.is_empty() {
            return Ok(out);
        }
        let seq = self.state.read().last_seq + 1;
        let rec = Record {
            seq,
            written_at: self.opts.clock.now_ms(),
            ops,
        };
        let framed = rec.frame();
        if framed.len() > log::MAX_RECORD {
            return Err(Error::InvalidArgument("write batch too large".into()));
        }
        match self.faults.check(FaultPoint::BeforeAppend) {
            Some(FaultPoint::BeforeAppend) => return Err(self.crash(FaultPoint::BeforeAppend)),
            Some(p @ FaultPoint::TornAppend { keep_per_mille }) => {
                let keep = framed.len() * keep_per_mille as usize / 1000;
                let _ = w.segment.append_torn(&framed, keep.min(framed.len() - 1));
                return Err(self.crash(p));
            }
            Some(FaultPoint::AfterAppend) => {
                w.segment.append(&framed)?;
                return Err(self.crash(FaultPoint::AfterAppend));
            }
            _ => {}
        }
        if let Err(e) = w.segment.append(&framed) {
            // The on-disk tail is now unknown; refuse further writes.
            self.crashed.store(true, Ordering::SeqCst);
            return Err(e);
        }
        w.log_bytes += framed.len() as u64;
        {
            // Once referenced, a blob's lifetime follows its references.
            let mut fresh = self.fresh_blobs.lock();
            if !fresh.is_empty() {
                for op in &rec.ops {
                    match op {
                        Op::PutDoc(d) | Op::StageDoc { doc: d, .. } => {
                            if let Some(id) = d.blob_id() {
                                fresh.remove(id);
                            }
                        }
                        Op::PutSys { blob_refs, .. } => {
                            for id in blob_refs {
                                fresh.remove(id);
                            }
                        }
                        _ => {}
                    }
                }
            }
        }
        self.state.write().apply(rec);

        if w.segment.len() > self.opts.segment_max_bytes {
            self.roll_segment(&mut w)?;
        }
        let garbage = self.state.read().garbage_bytes;
        if garbage > self.opts.compact_garbage_bytes && garbage * 2 > w.log_bytes {
            self.compact_locked(&mut w)?;
        }
        Ok(out)
    }

    fn roll_segment(&self, w: &mut WriterState) -> Result<()> {
        let id = w.segment.id + 1;
        let seg = SegmentWriter::create(&self.dir, id, self.opts.sync)?;
        let mut m = w.manifest.clone();
        m.segments.push(id);
        m.store(&self.dir, self.opts.sync)?;
        w.manifest = m;
        w.segment = seg;
        Ok(())
    }

    // ---- documents -------------------------------------------------------

    pub fn put_document(&self, doc: Document) -> Result<DocumentKey> {
        let key = doc.key.clone();
        self.transact(|t| t.put_doc(doc))?;
        Ok(key)
    }

    /// Writes many documents as one atomic record.
    pub fn put_documents(&self, docs: Vec<Document>) -> Result<Vec<DocumentKey>> {
        let keys = docs.iter().map(|d| d.key.clone()).collect();
        self.transact(|t| {
            for d in docs {
                t.put_doc(d)?;
            }
            Ok(())
        })?;
        Ok(keys)
    }

    pub fn get_document(&self, key: &str) -> Result<Document> {
        self.check_alive()?;
        self.state
            .read()
            .docs
            .get(key)
            .map(|e| (*e.doc).clone())
            .ok_or_else(|| Error::NotFound(format!("document `{key}`")))
    }

    pub fn contains_document(&self, key: &str) -> bool {
        self.state.read().docs.contains_key(key)
    }

    /// Tombstones a document; its blob becomes collectable once unreferenced.
    pub fn delete_document(&self, key: &str) -> Result<()> {
        self.transact(|t| t.delete_doc(key))
    }

    pub fn document_count(&self) -> usize {
        self.state.read().docs.len()
    }

    // ---- indexes ---------------------------------------------------------

    /// Builds (once) and thereafter maintains an index on `tag_name`.
    pub fn create_index(&self, tag_name: &str) -> Result<()> {
        document::validate_tag_name(tag_name)?;
        let mut w = self.writer.lock();
        self.check_alive()?;
        if w.manifest.indexes.iter().any(|n| n == tag_name) {
            return Ok(());
        }
        let mut st = self.state.write();
        let idx = build_index(&st, tag_name);
        idx.save(&self.dir, st.last_seq)?;
        let mut m = w.manifest.clone();
        m.indexes.push(tag_name.to_owned());
        m.store(&self.dir, self.opts.sync)?;
        w.manifest = m;
        st.indexes.insert(tag_name.to_owned(), idx);
        Ok(())
    }

    /// Index an `Auto` scan of `query` would use.
    pub fn best_index_for(&self, query: &TagQuery) -> Option<String> {
        self.state.read().best_index(query).map(|(n, _)| n.to_owned())
    }

    pub fn indexes(&self) -> Vec<String> {
        self.writer.lock().manifest.indexes.clone()
    }

    /// Keys currently filed under `value` in the index on `tag_name`.
    pub fn index_lookup(&self, tag_name: &str, value: &TagValue) -> Option<BTreeSet<String>> {
        let st = self.state.read();
        let idx = st.indexes.get(tag_name)?;
        Some(idx.lookup(value).cloned().unwrap_or_default())
    }

    // ---- scans -----------------------------------------------------------

    /// One page of keys matching `query`, ascending. Pass the returned
    /// cursor to continue; all pages together reflect the store as of the
    /// first page.
    pub fn scan(
        &self,
        query: &TagQuery,
        cursor: Option<&ScanCursor>,
        limit: usize,
    ) -> Result<ScanPage> {
        self.scan_with(query, cursor, limit, ScanStrategy::Auto)
    }

    pub fn scan_with(
        &self,
        query: &TagQuery,
        cursor: Option<&ScanCursor>,
        limit: usize,
        strategy: ScanStrategy,
    ) -> Result<ScanPage> {
        if limit == 0 {
            return Err(Error::InvalidArgument("scan limit must be positive".into()));
        }
        self.check_alive()?;
        let st = self.state.read();
        let snapshot = cursor.map(|c| c.snapshot).unwrap_or(st.last_seq);
        let mut req = ScanRequest::new(query, limit);
        req.after = cursor.map(|c| c.after.as_str());
        req.snapshot = Some(snapshot);
        req.strategy = strategy;
        let out = st.scan(&req)?;
        let keys: Vec<String> = out.hits.iter().map(|h| h.doc.key.clone()).collect();
        let next = if out.more {
            Some(ScanCursor {
                after: keys.last().cloned().expect("non-empty page"),
                snapshot,
            })
        } else {
            None
        };
        Ok(ScanPage { keys, next })
    }

    /// Full-featured scan returning documents.
    pub fn scan_documents(&self, req: &ScanRequest<'_>) -> Result<ScanOutput> {
        self.check_alive()?;
        self.state.read().scan(req)
    }

    /// Every matching key, following pages internally.
    pub fn scan_all(&self, query: &TagQuery) -> Result<Vec<DocumentKey>> {
        let mut out = Vec::new();
        let mut cursor = None;
        loop {
            let page = self.scan(query, cursor.as_ref(), 4096)?;
            out.extend(page.keys);
            match page.next {
                Some(c) => cursor = Some(c),
                None => return Ok(out),
            }
        }
    }

    // ---- system entries --------------------------------------------------

    pub fn sys_get(&self, key: &str) -> Option<Arc<Vec<u8>>> {
        self.state.read().sys.get(key).map(|e| e.value.clone())
    }

    pub fn sys_get_json<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.sys_get(key) {
            Some(v) => Ok(Some(serde_json::from_slice(&v)?)),
            None => Ok(None),
        }
    }

    pub fn sys_range(&self, prefix: &str) -> Vec<(String, Arc<Vec<u8>>)> {
        self.state
            .read()
            .sys_range(prefix)
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect()
    }

    pub fn group_committed(&self, group: &str) -> bool {
        self.state.read().committed_groups.contains(group)
    }

    pub fn staged_keys(&self, group: &str) -> Vec<String> {
        self.state
            .read()
            .staged
            .get(group)
            .map(|g| g.keys().cloned().collect())
            .unwrap_or_default()
    }

    // ---- blobs -----------------------------------------------------------

    pub fn begin_blob(&self, chunk_size: u32, codec_id: u8) -> Result<BlobWriter> {
        self.check_alive()?;
        BlobWriter::new(&self.dir, chunk_size, codec_id, self.opts.sync)
    }

    fn write_chunk(&self, w: &mut BlobWriter, index: u32, encoded: &[u8]) -> Result<()> {
        if let Some(max) = self.opts.max_blob_bytes {
            let used = self.blob_bytes.load(Ordering::SeqCst);
            if used + encoded.len() as u64 > max {
                return Err(Error::StorageFull(format!(
                    "blob store holds {used} of {max} bytes"
                )));
            }
        }
        w.write_chunk(index, encoded)?;
        self.blob_bytes
            .fetch_add(encoded.len() as u64, Ordering::SeqCst);
        if self.faults.check(FaultPoint::BlobChunk).is_some() {
            return Err(self.crash(FaultPoint::BlobChunk));
        }
        Ok(())
    }

    /// Appends raw bytes to an upload, writing every completed chunk.
    pub fn blob_write(&self, w: &mut BlobWriter, data: &[u8]) -> Result<()> {
        self.check_alive()?;
        for (i, enc) in w.push_raw(data) {
            self.write_chunk(w, i, &enc)?;
        }
        Ok(())
    }

    /// Appends one pre-encoded chunk to an upload.
    pub fn blob_write_encoded(
        &self,
        w: &mut BlobWriter,
        index: u32,
        raw_len: u32,
        encoded: Vec<u8>,
    ) -> Result<()> {
        self.check_alive()?;
        let (i, enc) = w.push_encoded(index, raw_len, encoded)?;
        self.write_chunk(w, i, &enc)
    }

    pub fn finish_blob(&self, mut w: BlobWriter) -> Result<BlobPointer> {
        self.check_alive()?;
        if let Some((i, enc)) = w.flush_tail() {
            self.write_chunk(&mut w, i, &enc)?;
        }
        let ptr = w.pointer()?;
        self.fresh_blobs.lock().insert(ptr.blob_id.clone());
        Ok(ptr)
    }

    pub fn abort_blob(&self, w: BlobWriter) {
        let written = w.written_bytes();
        w.abort();
        self.blob_bytes.fetch_sub(written, Ordering::SeqCst);
    }

    /// Stores `data` as a chunked blob and returns its pointer.
    pub fn put_blob(&self, data: &[u8], chunk_size: u32, codec_id: u8) -> Result<BlobPointer> {
        if data.is_empty() {
            return Err(Error::EmptyBlob);
        }
        let mut w = self.begin_blob(chunk_size, codec_id)?;
        let res = self.blob_write(&mut w, data);
        match res {
            Ok(()) => self.finish_blob(w),
            Err(e @ Error::Crashed(_)) => Err(e),
            Err(e) => {
                self.abort_blob(w);
                Err(e)
            }
        }
    }

    /// Reads and verifies a whole blob.
    pub fn get_blob(&self, ptr: &BlobPointer) -> Result<Vec<u8>> {
        self.check_alive()?;
        blob::read_blob(&self.dir, ptr)
    }

    pub fn read_chunk_encoded(&self, ptr: &BlobPointer, index: u32) -> Result<Vec<u8>> {
        self.check_alive()?;
        blob::read_chunk_encoded(&self.dir, ptr, index)
    }

    pub fn blob_refcount(&self, blob_id: &str) -> u64 {
        self.state
            .read()
            .blob_refs
            .get(blob_id)
            .copied()
            .unwrap_or(0)
    }

    // ---- compaction ------------------------------------------------------

    /// Rewrites the live state into a fresh segment and drops old segments
    /// and unreferenced blobs.
    pub fn compact(&self) -> Result<()> {
        let mut w = self.writer.lock();
        self.check_alive()?;
        self.compact_locked(&mut w)
    }

    fn compact_locked(&self, w: &mut WriterState) -> Result<()> {
        let new_id = w.segment.id + 1;
        let mut seg = SegmentWriter::create(&self.dir, new_id, false)?;
        let mut bytes = 0u64;
        {
            let st = self.state.read();
            // Visible documents keep their original seq and timestamp.
            let mut batch: Vec<Op> = Vec::new();
            let mut batch_seq = None;
            let mut batch_at = 0;
            let mut flush = |seq: u64, at: u64, ops: &mut Vec<Op>, seg: &mut SegmentWriter| -> Result<()> {
                if ops.is_empty() {
                    return Ok(());
                }
                let rec = Record {
                    seq,
                    written_at: at,
                    ops: std::mem::take(ops),
                };
                let f = rec.frame();
                bytes += f.len() as u64;
                seg.append(&f)
            };
            for (seq, key) in &st.by_seq {
                let e = &st.docs[key];
                if batch_seq != Some(*seq) || batch.len() >= 1024 {
                    if let Some(s) = batch_seq {
                        flush(s, batch_at, &mut batch, &mut seg)?;
                    }
                    batch_seq = Some(*seq);
                    batch_at = e.written_at;
                }
                batch.push(Op::PutDoc((*e.doc).clone()));
            }
            if let Some(s) = batch_seq {
                flush(s, batch_at, &mut batch, &mut seg)?;
            }
            let now = self.opts.clock.now_ms();
            let mut ops = Vec::new();
            for (key, e) in &st.sys {
                ops.push(Op::PutSys {
                    key: key.clone(),
                    value: (*e.value).clone(),
                    blob_refs: e.blob_refs.clone(),
                });
                if ops.len() >= 1024 {
                    flush(st.last_seq, now, &mut ops, &mut seg)?;
                }
            }
            for group in &st.committed_groups {
                ops.push(Op::CommitGroup(group.clone()));
                if ops.len() >= 1024 {
                    flush(st.last_seq, now, &mut ops, &mut seg)?;
                }
            }
            for (group, docs) in &st.staged {
                for d in docs.values() {
                    ops.push(Op::StageDoc {
                        group: group.clone(),
                        doc: (**d).clone(),
                    });
                    if ops.len() >= 1024 {
                        flush(st.last_seq, now, &mut ops, &mut seg)?;
                    }
                }
            }
            // Always end with a record carrying last_seq so it survives.
            ops.push(Op::DeleteSys(format!("{SYS_PREFIX}compaction-marker")));
            flush(st.last_seq, now, &mut ops, &mut seg)?;
        }
        seg.sync()?;
        if self.faults.check(FaultPoint::CompactBeforeManifest).is_some() {
            return Err(self.crash(FaultPoint::CompactBeforeManifest));
        }
        let mut m = w.manifest.clone();
        let old = std::mem::replace(&mut m.segments, vec![new_id]);
        m.store(&self.dir, true)?;
        w.manifest = m;
        w.segment = seg;
        w.log_bytes = bytes + 8;
        self.state.write().garbage_bytes = 0;
        if self.faults.check(FaultPoint::CompactAfterManifest).is_some() {
            return Err(self.crash(FaultPoint::CompactAfterManifest));
        }
        for id in old {
            let _ = fs::remove_file(log::segment_path(&self.dir, id));
        }
        self.collect_blobs()?;
        let st = self.state.read();
        for idx in st.indexes.values() {
            idx.save(&self.dir, st.last_seq)?;
        }
        Ok(())
    }

    fn collect_blobs(&self) -> Result<()> {
        let st = self.state.read();
        let fresh = self.fresh_blobs.lock();
        let mut freed = 0u64;
        for entry in fs::read_dir(self.dir.join(blob::BLOB_DIR))? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            let Some((id, _)) = blob::parse_chunk_name(name) else {
                continue;
            };
            if !st.blob_refs.contains_key(id) && !fresh.contains(id) {
                freed += entry.metadata().map(|m| m.len()).unwrap_or(0);
                let _ = fs::remove_file(entry.path());
            }
        }
        self.blob_bytes.fetch_sub(
            freed.min(self.blob_bytes.load(Ordering::SeqCst)),
            Ordering::SeqCst,
        );
        Ok(())
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        if self.is_crashed() {
            return;
        }
        let st = self.state.read();
        for idx in st.indexes.values() {
            let _ = idx.save(&self.dir, st.last_seq);
        }
        let _ = self.writer.lock().segment.sync();
    }
}

fn build_index(state: &State, tag_name: &str) -> TagIndex {
    let mut idx = TagIndex::new(tag_name);
    for (key, e) in &state.docs {
        if let Some(v) = e.doc.tags.get(tag_name) {
            idx.insert(v, key);
        }
    }
    idx
}

fn dir_size(dir: &Path) -> u64 {
    fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter_map(|e| e.metadata().ok())
                .map(|m| m.len())
                .sum()
        })
        .unwrap_or(0)
}

/// A write transaction. Reads see the committed state plus this
/// transaction's own pending writes.
pub struct Txn<'a> {
    store: &'a Store,
    state: &'a State,
    ops: Vec<Op>,
    sys_overlay: BTreeMap<String, Option<Arc<Vec<u8>>>>,
    new_docs: HashSet<String>,
    deleted_docs: HashSet<String>,
    staged_overlay: HashMap<String, Option<BTreeSet<String>>>,
    committed_overlay: HashSet<String>,
}

impl<'a> Txn<'a> {
    fn new(store: &'a Store, state: &'a State) -> Self {
        Txn {
            store,
            state,
            ops: Vec::new(),
            sys_overlay: BTreeMap::new(),
            new_docs: HashSet::new(),
            deleted_docs: HashSet::new(),
            staged_overlay: HashMap::new(),
            committed_overlay: HashSet::new(),
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.store.opts.clock.now_ms()
    }

    /// Seq the record produced by this transaction will carry.
    pub fn next_seq(&self) -> u64 {
        self.state.last_seq + 1
    }

    pub fn last_seq(&self) -> u64 {
        self.state.last_seq
    }

    pub fn has_pending_writes(&self) -> bool {
        !self.ops.is_empty()
    }

    pub fn doc_exists(&self, key: &str) -> bool {
        if self.new_docs.contains(key) {
            return true;
        }
        !self.deleted_docs.contains(key) && self.state.docs.contains_key(key)
    }

    fn check_doc(&self, doc: &Document) -> Result<()> {
        doc.validate()?;
        if let Payload::Inline(b) = &doc.payload {
            if b.len() > self.store.opts.inline_threshold {
                return Err(Error::PayloadTooLarge {
                    size: b.len(),
                    limit: self.store.opts.inline_threshold,
                });
            }
        }
        Ok(())
    }

    pub fn put_doc(&mut self, doc: Document) -> Result<()> {
        self.check_doc(&doc)?;
        if self.doc_exists(&doc.key) {
            return Err(Error::DuplicateKey(doc.key));
        }
        self.new_docs.insert(doc.key.clone());
        self.ops.push(Op::PutDoc(doc));
        Ok(())
    }

    pub fn delete_doc(&mut self, key: &str) -> Result<()> {
        if !self.doc_exists(key) {
            return Err(Error::NotFound(format!("document `{key}`")));
        }
        self.new_docs.remove(key);
        self.deleted_docs.insert(key.to_owned());
        self.ops.push(Op::DeleteDoc(key.to_owned()));
        Ok(())
    }

    pub fn group_committed(&self, group: &str) -> bool {
        self.committed_overlay.contains(group) || self.state.committed_groups.contains(group)
    }

    pub fn staged_keys(&self, group: &str) -> BTreeSet<String> {
        match self.staged_overlay.get(group) {
            Some(Some(keys)) => keys.clone(),
            Some(None) => BTreeSet::new(),
            None => self
                .state
                .staged
                .get(group)
                .map(|g| g.keys().cloned().collect())
                .unwrap_or_default(),
        }
    }

    /// Stages `doc` under `group`, replacing a staged doc with the same key.
    pub fn stage_doc(&mut self, group: &str, doc: Document) -> Result<()> {
        self.check_doc(&doc)?;
        if self.group_committed(group) {
            return Err(Error::InvalidArgument(format!(
                "group `{group}` is already committed"
            )));
        }
        if self.doc_exists(&doc.key) {
            return Err(Error::DuplicateKey(doc.key));
        }
        let mut keys = self.staged_keys(group);
        keys.insert(doc.key.clone());
        self.staged_overlay.insert(group.to_owned(), Some(keys));
        self.ops.push(Op::StageDoc {
            group: group.to_owned(),
            doc,
        });
        Ok(())
    }

    pub fn clear_group(&mut self, group: &str) {
        if self.staged_keys(group).is_empty() {
            return;
        }
        self.staged_overlay.insert(group.to_owned(), None);
        self.ops.push(Op::ClearGroup(group.to_owned()));
    }

    /// Makes every staged doc of `group` visible in this record.
    pub fn commit_group(&mut self, group: &str) -> Result<Vec<String>> {
        if self.group_committed(group) {
            return Ok(Vec::new());
        }
        let keys = self.staged_keys(group);
        for k in &keys {
            if self.doc_exists(k) {
                return Err(Error::DuplicateKey(k.clone()));
            }
        }
        for k in &keys {
            self.new_docs.insert(k.clone());
        }
        self.staged_overlay.insert(group.to_owned(), None);
        self.committed_overlay.insert(group.to_owned());
        self.ops.push(Op::CommitGroup(group.to_owned()));
        Ok(keys.into_iter().collect())
    }

    pub fn sys_get(&self, key: &str) -> Option<Arc<Vec<u8>>> {
        match self.sys_overlay.get(key) {
            Some(v) => v.clone(),
            None => self.state.sys.get(key).map(|e| e.value.clone()),
        }
    }

    pub fn sys_get_json<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.sys_get(key) {
            Some(v) => Ok(Some(serde_json::from_slice(&v)?)),
            None => Ok(None),
        }
    }

    pub fn sys_put(&mut self, key: &str, value: Vec<u8>, blob_refs: Vec<String>) {
        debug_assert!(key.starts_with(SYS_PREFIX));
        self.sys_overlay
            .insert(key.to_owned(), Some(Arc::new(value.clone())));
        self.ops.push(Op::PutSys {
            key: key.to_owned(),
            value,
            blob_refs,
        });
    }

    pub fn sys_put_json<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.sys_put(key, serde_json::to_vec(value)?, Vec::new());
        Ok(())
    }

    pub fn sys_delete(&mut self, key: &str) {
        if self.sys_get(key).is_none() {
            return;
        }
        self.sys_overlay.insert(key.to_owned(), None);
        self.ops.push(Op::DeleteSys(key.to_owned()));
    }

    /// Entries under `prefix` in key order, including pending writes.
    pub fn sys_range(&self, prefix: &str) -> Vec<(String, Arc<Vec<u8>>)> {
        let mut merged: BTreeMap<String, Arc<Vec<u8>>> = self
            .state
            .sys_range(prefix)
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect();
        for (k, v) in self
            .sys_overlay
            .range::<str, _>((Bound::Included(prefix), Bound::Unbounded))
            .take_while(|(k, _)| k.starts_with(prefix))
        {
            match v {
                Some(v) => {
                    merged.insert(k.clone(), v.clone());
                }
                None => {
                    merged.remove(k);
                }
            }
        }
        merged.into_iter().collect()
    }

    /// Scans committed documents (pending writes of this transaction are not
    /// included).
    pub fn scan(&self, req: &ScanRequest<'_>) -> Result<ScanOutput> {
        self.state.scan(req)
    }

    pub fn get_document(&self, key: &str) -> Option<Arc<Document>> {
        self.state.docs.get(key).map(|e| e.doc.clone())
    }

    pub fn blob_exists(&self, blob_id: &str) -> bool {
        blob::chunk_path(&self.store.dir, blob_id, 0).exists()
    }

    pub fn store(&self) -> &Store {
        self.store
    }
}

impl Encode for ScanCursor {
    fn encode(&self, w: &mut crate::codec::Writer) {
        w.str(&self.after).u64(self.snapshot);
    }
}

impl crate::codec::Decode for ScanCursor {
    fn decode(r: &mut crate::codec::Reader<'_>) -> Result<Self> {
        Ok(ScanCursor {
            after: r.string()?,
            snapshot: r.u64()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagquery::parse;

    fn open(dir: &Path) -> Store {
        Store::open(
            dir,
            StoreOptions {
                sync: false,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn minimal_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let s = open(dir.path());
        let d = Document::inline("s1", vec![1, 2, 3, 4]).with_tag("split", "train");
        assert_eq!(s.put_document(d.clone()).unwrap(), "s1");
        assert_eq!(s.get_document("s1").unwrap(), d);
        assert!(matches!(s.put_document(d), Err(Error::DuplicateKey(_))));
        assert!(matches!(s.get_document("missing"), Err(Error::NotFound(_))));
    }

    #[test]
    fn inline_threshold_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let s = open(dir.path());
        let big = Document::inline("big", vec![0u8; DEFAULT_INLINE_THRESHOLD + 1]);
        assert!(matches!(
            s.put_document(big),
            Err(Error::PayloadTooLarge { .. })
        ));
        let edge = Document::inline("edge", vec![0u8; DEFAULT_INLINE_THRESHOLD]);
        s.put_document(edge).unwrap();
    }

    #[test]
    fn reopen_restores_documents_and_indexes() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = open(dir.path());
            s.create_index("split").unwrap();
            for i in 0..10 {
                let split = if i % 2 == 0 { "train" } else { "test" };
                s.put_document(Document::inline(format!("k{i}"), vec![i]).with_tag("split", split))
                    .unwrap();
            }
        }
        let s = open(dir.path());
        assert_eq!(s.document_count(), 10);
        assert_eq!(s.indexes(), vec!["split".to_string()]);
        assert_eq!(
            s.index_lookup("split", &"train".into()).unwrap().len(),
            5
        );
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let _s = open(dir.path());
        let err = Store::open(dir.path(), StoreOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Locked(_)));
    }

    #[test]
    fn scan_pages_follow_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let s = open(dir.path());
        for i in 0..5 {
            s.put_document(Document::inline(format!("k{i}"), vec![])).unwrap();
        }
        let q = TagQuery::match_all();
        let p1 = s.scan(&q, None, 2).unwrap();
        assert_eq!(p1.keys, vec!["k0", "k1"]);
        // Written after the scan started: not part of this scan.
        s.put_document(Document::inline("k2a", vec![])).unwrap();
        let p2 = s.scan(&q, p1.next.as_ref(), 2).unwrap();
        assert_eq!(p2.keys, vec!["k2", "k3"]);
        let p3 = s.scan(&q, p2.next.as_ref(), 2).unwrap();
        assert_eq!(p3.keys, vec!["k4"]);
        assert!(p3.next.is_none());
    }

    #[test]
    fn scan_type_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let s = open(dir.path());
        s.put_document(Document::inline("a", vec![]).with_tag("step", "one"))
            .unwrap();
        let err = s.scan(&parse("step >= 1").unwrap(), None, 10).unwrap_err();
        assert!(matches!(err, Error::TypeMismatch { .. }));
    }

    #[test]
    fn staged_group_is_invisible_until_commit() {
        let dir = tempfile::tempdir().unwrap();
        let s = open(dir.path());
        s.transact(|t| {
            t.stage_doc("g", Document::inline("g/0", vec![1]))?;
            t.stage_doc("g", Document::inline("g/1", vec![2]))
        })
        .unwrap();
        assert!(s.scan_all(&TagQuery::match_all()).unwrap().is_empty());
        // A replayed attempt replaces the staged set.
        s.transact(|t| {
            t.clear_group("g");
            t.stage_doc("g", Document::inline("g/0", vec![9]))
        })
        .unwrap();
        s.transact(|t| t.commit_group("g").map(|_| ())).unwrap();
        assert_eq!(s.scan_all(&TagQuery::match_all()).unwrap(), vec!["g/0"]);
        assert_eq!(
            s.get_document("g/0").unwrap().payload,
            Payload::Inline(vec![9])
        );
        assert!(s
            .transact(|t| t.stage_doc("g", Document::inline("g/2", vec![])))
            .is_err());
    }

    #[test]
    fn failed_transaction_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let s = open(dir.path());
        s.put_document(Document::inline("a", vec![])).unwrap();
        let before = s.last_seq();
        let r = s.put_documents(vec![
            Document::inline("b", vec![]),
            Document::inline("a", vec![]),
        ]);
        assert!(matches!(r, Err(Error::DuplicateKey(_))));
        assert_eq!(s.last_seq(), before);
        assert!(!s.contains_document("b"));
    }

    #[test]
    fn blob_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let s = open(dir.path());
        let mib = vec![7u8; 1 << 20];
        let p = s.put_blob(&mib, 256 * 1024, 1).unwrap();
        assert_eq!(p.chunk_count, 4);
        assert_eq!(p.total_size, 1 << 20);
        let one = s.put_blob(&[42], DEFAULT_CHUNK, 0).unwrap();
        assert_eq!((one.chunk_count, one.total_size), (1, 1));
        assert_eq!(s.get_blob(&one).unwrap(), vec![42]);
        assert!(matches!(s.put_blob(&[], DEFAULT_CHUNK, 1), Err(Error::EmptyBlob)));
        assert!(s.put_blob(&[1], 100, 1).is_err());
    }

    #[test]
    fn storage_full() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(
            dir.path(),
            StoreOptions {
                sync: false,
                max_blob_bytes: Some(10_000),
                ..Default::default()
            },
        )
        .unwrap();
        let data: Vec<u8> = (0..20_000u32).map(|i| (i * 7919 % 256) as u8).collect();
        assert!(matches!(
            s.put_blob(&data, 4096, 0),
            Err(Error::StorageFull(_))
        ));
        // The partial upload was rolled back.
        assert_eq!(s.stats().blob_bytes, 0);
        s.put_blob(&data[..4000], 4096, 0).unwrap();
    }

    #[test]
    fn unknown_blob_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let s = open(dir.path());
        let mut p = s.put_blob(&[1, 2, 3], DEFAULT_CHUNK, 1).unwrap();
        p.blob_id = "nope".into();
        assert!(matches!(s.get_blob(&p), Err(Error::NotFound(_))));
    }

    #[test]
    fn compaction_preserves_state_and_collects_blobs() {
        let dir = tempfile::tempdir().unwrap();
        let keep;
        let orphan;
        {
            let s = open(dir.path());
            keep = s.put_blob(&[5; 5000], 4096, 1).unwrap();
            s.put_document(Document::blob("b", keep.clone()).with_tag("t", 1i64))
                .unwrap();
            orphan = s.put_blob(&[6; 5000], 4096, 1).unwrap();
            s.put_document(Document::blob("gone", orphan.clone())).unwrap();
            s.delete_document("gone").unwrap();
            s.transact(|t| {
                t.sys_put("__sys/a", b"1".to_vec(), vec![]);
                t.stage_doc("grp", Document::inline("grp/0", vec![]))
            })
            .unwrap();
            s.transact(|t| {
                t.sys_put("__sys/a", b"2".to_vec(), vec![]);
                Ok(())
            })
            .unwrap();
            let seq = s.last_seq();
            s.compact().unwrap();
            assert_eq!(s.last_seq(), seq);
        }
        let s = open(dir.path());
        assert_eq!(s.get_document("b").unwrap().blob_id(), Some(keep.blob_id.as_str()));
        assert!(s.get_blob(&keep).is_ok());
        assert!(matches!(s.get_blob(&orphan), Err(Error::NotFound(_))));
        assert_eq!(s.sys_get("__sys/a").unwrap().as_slice(), b"2");
        assert_eq!(s.staged_keys("grp"), vec!["grp/0"]);
        assert!(matches!(s.get_document("gone"), Err(Error::NotFound(_))));
    }
}
