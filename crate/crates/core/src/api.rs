//! Transport-neutral request/response surface.
//!
//! Every engine operation has one [`Request`] variant. [`Engine::handle`]
//! executes a request; a [`Backend`] carries requests to an engine, either
//! in-process ([`LocalBackend`]) or over the wire. The typed client methods
//! in [`Ops`] are written once against `Backend`, so both transports share
//! every code path above the transport, including blob chunking and model
//! state caching.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::compute::{NetworkSpec, NetworkState};
use crate::dataset::{BatchCursor, BatchRead, DatasetView, StreamController, StreamStatus};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::modelstore::{fgts, ModelCache, ModelEvent, ModelRecord, ModelVersion, VersionSelector};
use crate::store::blob::BlobAssembler;
use crate::store::{
    BlobPointer, Codec, Document, DocumentKey, Payload, ScanCursor, ScanPage, ScanStrategy,
    StoreStats, TagMap, DEFAULT_CHUNK,
};
use crate::workflow::{
    CompletionMessage, Lease, MasterActions, MasterState, Outcome, Plan, PlanReport, PlanSpec,
    Task, TaskSpec, TaskTemplate,
};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "args", rename_all = "snake_case")]
pub enum Request {
    Ping {},
    PutDocument { doc: Document },
    PutDocuments { docs: Vec<Document> },
    GetDocument { key: String },
    DeleteDocument { key: String },
    CreateIndex { tag: String },
    Scan {
        query: String,
        cursor: Option<ScanCursor>,
        limit: u32,
        #[serde(default)]
        linear: bool,
    },
    BlobBegin { chunk_size: u32, codec: u8 },
    /// `data` travels as the raw frame tail, not as JSON.
    BlobChunk {
        upload: u64,
        index: u32,
        raw_len: u32,
        #[serde(skip)]
        data: Vec<u8>,
    },
    BlobFinish { upload: u64 },
    BlobAbort { upload: u64 },
    ReadChunk { pointer: BlobPointer, index: u32 },
    Stats {},
    Compact {},

    DefineView { view: String, query: String },
    GetView { view: String },
    ListViews {},
    CountView { view: String },
    OpenCursor {
        cursor: String,
        view: String,
        batch_size: u32,
        seq_range: Option<(u64, u64)>,
    },
    ReadBatch { cursor: String },
    ResetCursor { cursor: String },
    AttachStream {
        view: String,
        threshold: u64,
        max_age_ms: u64,
        template: TaskTemplate,
    },
    PollStream { view: String },
    StreamStatus { view: String },
    ListStreams {},

    RegisterModel { model: String, spec: NetworkSpec },
    GetModel { model: String },
    ListModels {},
    CommitVersion {
        model: String,
        step: u64,
        state: BlobPointer,
        metrics: TagMap,
        parent: Option<String>,
        origin_task: Option<String>,
    },
    ListVersions { model: String },
    GetVersion { model: String, selector: VersionSelector },
    RecordEvents {
        model: String,
        events: Vec<(u64, String, f64)>,
        at: Option<u64>,
    },
    QueryEvents {
        model: String,
        name: Option<String>,
        lo: u64,
        hi: u64,
    },

    SubmitTask { spec: TaskSpec },
    GetTask { task: String },
    ListTasks {},
    LeaseTask {
        agent: String,
        ttl_ms: u64,
        kinds: Vec<String>,
    },
    Heartbeat {
        task: String,
        agent: String,
        attempt: u32,
        ttl_ms: u64,
    },
    StageOutputs {
        task: String,
        agent: String,
        attempt: u32,
        docs: Vec<(u32, Document)>,
    },
    CompleteTask {
        task: String,
        agent: String,
        attempt: u32,
        outcome: Outcome,
    },
    ReplayTask { task: String },
    ReadNotifications { from: u64, limit: u32 },
    SubmitPlan { plan: PlanSpec },
    GetPlan { plan: String },
    ListPlans {},
    MasterStep {
        master: String,
        ttl_ms: u64,
        max_messages: u32,
    },
    ReleaseMaster { master: String },
    MasterState {},
}

/// Opcode table; the position in this list is the wire opcode.
pub const OPS: &[&str] = &[
    "ping",
    "put_document",
    "put_documents",
    "get_document",
    "delete_document",
    "create_index",
    "scan",
    "blob_begin",
    "blob_chunk",
    "blob_finish",
    "blob_abort",
    "read_chunk",
    "stats",
    "compact",
    "define_view",
    "get_view",
    "list_views",
    "count_view",
    "open_cursor",
    "read_batch",
    "reset_cursor",
    "attach_stream",
    "poll_stream",
    "stream_status",
    "list_streams",
    "register_model",
    "get_model",
    "list_models",
    "commit_version",
    "list_versions",
    "get_version",
    "record_events",
    "query_events",
    "submit_task",
    "get_task",
    "list_tasks",
    "lease_task",
    "heartbeat",
    "stage_outputs",
    "complete_task",
    "replay_task",
    "read_notifications",
    "submit_plan",
    "get_plan",
    "list_plans",
    "master_step",
    "release_master",
    "master_state",
];

impl Request {
    pub fn name(&self) -> &'static str {
        OPS[self.opcode() as usize]
    }

    pub fn opcode(&self) -> u8 {
        use Request::*;
        match self {
            Ping {} => 0,
            PutDocument { .. } => 1,
            PutDocuments { .. } => 2,
            GetDocument { .. } => 3,
            DeleteDocument { .. } => 4,
            CreateIndex { .. } => 5,
            Scan { .. } => 6,
            BlobBegin { .. } => 7,
            BlobChunk { .. } => 8,
            BlobFinish { .. } => 9,
            BlobAbort { .. } => 10,
            ReadChunk { .. } => 11,
            Stats {} => 12,
            Compact {} => 13,
            DefineView { .. } => 14,
            GetView { .. } => 15,
            ListViews {} => 16,
            CountView { .. } => 17,
            OpenCursor { .. } => 18,
            ReadBatch { .. } => 19,
            ResetCursor { .. } => 20,
            AttachStream { .. } => 21,
            PollStream { .. } => 22,
            StreamStatus { .. } => 23,
            ListStreams {} => 24,
            RegisterModel { .. } => 25,
            GetModel { .. } => 26,
            ListModels {} => 27,
            CommitVersion { .. } => 28,
            ListVersions { .. } => 29,
            GetVersion { .. } => 30,
            RecordEvents { .. } => 31,
            QueryEvents { .. } => 32,
            SubmitTask { .. } => 33,
            GetTask { .. } => 34,
            ListTasks {} => 35,
            LeaseTask { .. } => 36,
            Heartbeat { .. } => 37,
            StageOutputs { .. } => 38,
            CompleteTask { .. } => 39,
            ReplayTask { .. } => 40,
            ReadNotifications { .. } => 41,
            SubmitPlan { .. } => 42,
            GetPlan { .. } => 43,
            ListPlans {} => 44,
            MasterStep { .. } => 45,
            ReleaseMaster { .. } => 46,
            MasterState {} => 47,
        }
    }

    /// Safe to resend after a lost connection: re-executing has no effect
    /// beyond the first execution. Everything else surfaces
    /// `ConnectionLost`.
    pub fn is_idempotent(&self) -> bool {
        use Request::*;
        matches!(
            self,
            Ping {}
                | GetDocument { .. }
                | CreateIndex { .. }
                | Scan { .. }
                | ReadChunk { .. }
                | Stats {}
                | GetView { .. }
                | ListViews {}
                | CountView { .. }
                | StreamStatus { .. }
                | ListStreams {}
                | GetModel { .. }
                | ListModels {}
                | ListVersions { .. }
                | GetVersion { .. }
                | QueryEvents { .. }
                | SubmitTask { .. }
                | GetTask { .. }
                | ListTasks {}
                | ReadNotifications { .. }
                | SubmitPlan { .. }
                | GetPlan { .. }
                | ListPlans {}
                | MasterState {}
        )
    }

    /// Splits the request into opcode, JSON arguments and raw tail bytes.
    pub fn into_parts(mut self) -> Result<(u8, serde_json::Value, Vec<u8>)> {
        let tail = match &mut self {
            Request::BlobChunk { data, .. } => std::mem::take(data),
            _ => Vec::new(),
        };
        let op = self.opcode();
        let mut v = serde_json::to_value(&self)?;
        let args = v
            .get_mut("args")
            .map(serde_json::Value::take)
            .unwrap_or_else(|| serde_json::json!({}));
        Ok((op, args, tail))
    }

    pub fn from_parts(opcode: u8, args: serde_json::Value, tail: Vec<u8>) -> Result<Request> {
        let name = OPS
            .get(opcode as usize)
            .ok_or_else(|| Error::Protocol(format!("unknown opcode {opcode}")))?;
        let mut req: Request = serde_json::from_value(serde_json::json!({ "op": name, "args": args }))
            .map_err(|e| Error::Protocol(format!("bad arguments for `{name}`: {e}")))?;
        match &mut req {
            Request::BlobChunk { data, .. } => *data = tail,
            _ if !tail.is_empty() => {
                return Err(Error::Protocol(format!("`{name}` takes no raw payload")))
            }
            _ => {}
        }
        Ok(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerInfo {
    pub protocol: u32,
    pub inline_threshold: usize,
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Response {
    Unit,
    Info(ServerInfo),
    Key(String),
    Keys(Vec<String>),
    Document(Document),
    Page {
        keys: Vec<String>,
        next: Option<ScanCursor>,
        used_index: Option<String>,
    },
    Upload(u64),
    Pointer(BlobPointer),
    /// `data` travels as the raw frame tail.
    Chunk {
        #[serde(skip)]
        data: Vec<u8>,
    },
    Stats(StoreStats),
    View(DatasetView),
    Views(Vec<DatasetView>),
    Count(u64),
    Cursor(BatchCursor),
    Batch {
        docs: Vec<Document>,
        cursor: BatchCursor,
        end: bool,
    },
    Stream(StreamController),
    Streams(Vec<StreamController>),
    StreamStatus(StreamStatus),
    Model(ModelRecord),
    Models(Vec<ModelRecord>),
    Version(ModelVersion),
    Versions(Vec<ModelVersion>),
    Events(Vec<ModelEvent>),
    Task(Task),
    MaybeTask(Option<Task>),
    Tasks(Vec<Task>),
    Lease(Lease),
    Note(CompletionMessage),
    Notes(Vec<CompletionMessage>),
    Plan(PlanReport),
    Plans(Vec<Plan>),
    Master(MasterActions),
    MasterState(MasterState),
}

impl Response {
    pub fn take_tail(&mut self) -> Vec<u8> {
        match self {
            Response::Chunk { data } => std::mem::take(data),
            _ => Vec::new(),
        }
    }

    pub fn set_tail(&mut self, tail: Vec<u8>) -> Result<()> {
        match self {
            Response::Chunk { data } => *data = tail,
            _ if !tail.is_empty() => {
                return Err(Error::Protocol("unexpected raw payload in response".into()))
            }
            _ => {}
        }
        Ok(())
    }
}

fn query(text: &str) -> Result<crate::tagquery::TagQuery> {
    crate::tagquery::parse(text)
}

impl Engine {
    pub fn server_info(&self) -> ServerInfo {
        ServerInfo {
            protocol: PROTOCOL_VERSION,
            inline_threshold: self.store.inline_threshold(),
            last_seq: self.store.last_seq(),
        }
    }

    /// Executes one request.
    pub fn handle(&self, req: Request) -> Result<Response> {
        use Request as Q;
        use Response as R;
        let s = &self.store;
        Ok(match req {
            Q::Ping {} => R::Info(self.server_info()),
            Q::PutDocument { doc } => R::Key(s.put_document(doc)?),
            Q::PutDocuments { docs } => R::Keys(s.put_documents(docs)?),
            Q::GetDocument { key } => R::Document(s.get_document(&key)?),
            Q::DeleteDocument { key } => {
                s.delete_document(&key)?;
                R::Unit
            }
            Q::CreateIndex { tag } => {
                s.create_index(&tag)?;
                R::Unit
            }
            Q::Scan {
                query: q,
                cursor,
                limit,
                linear,
            } => {
                let q = query(&q)?;
                let strategy = if linear {
                    ScanStrategy::Linear
                } else {
                    ScanStrategy::Auto
                };
                let ScanPage { keys, next } = s.scan_with(&q, cursor.as_ref(), limit as usize, strategy)?;
                let used_index = match strategy {
                    ScanStrategy::Auto => s.best_index_for(&q),
                    ScanStrategy::Linear => None,
                };
                R::Page {
                    keys,
                    next,
                    used_index,
                }
            }
            Q::BlobBegin { chunk_size, codec } => R::Upload(self.blob_begin(chunk_size, codec)?),
            Q::BlobChunk {
                upload,
                index,
                raw_len,
                data,
            } => {
                self.blob_chunk(upload, index, raw_len, data)?;
                R::Unit
            }
            Q::BlobFinish { upload } => R::Pointer(self.blob_finish(upload)?),
            Q::BlobAbort { upload } => {
                self.blob_abort(upload);
                R::Unit
            }
            Q::ReadChunk { pointer, index } => R::Chunk {
                data: s.read_chunk_encoded(&pointer, index)?,
            },
            Q::Stats {} => R::Stats(s.stats()),
            Q::Compact {} => {
                s.compact()?;
                R::Unit
            }

            Q::DefineView { view, query: q } => R::View(self.define_view(&view, query(&q)?)?),
            Q::GetView { view } => R::View(self.get_view(&view)?),
            Q::ListViews {} => R::Views(self.list_views()?),
            Q::CountView { view } => R::Count(self.count_view(&view)?),
            Q::OpenCursor {
                cursor,
                view,
                batch_size,
                seq_range,
            } => R::Cursor(self.open_cursor(&cursor, &view, batch_size, seq_range)?),
            Q::ReadBatch { cursor } => {
                let b = self.read_batch(&cursor)?;
                R::Batch {
                    docs: b.docs,
                    cursor: b.cursor,
                    end: b.end,
                }
            }
            Q::ResetCursor { cursor } => R::Cursor(self.reset_cursor(&cursor)?),
            Q::AttachStream {
                view,
                threshold,
                max_age_ms,
                template,
            } => R::Stream(self.attach_stream(&view, threshold, max_age_ms, template)?),
            Q::PollStream { view } => R::MaybeTask(self.poll_stream(&view)?),
            Q::StreamStatus { view } => R::StreamStatus(self.stream_status(&view)?),
            Q::ListStreams {} => R::Streams(self.list_streams()?),

            Q::RegisterModel { model, spec } => R::Model(self.register_model(&model, spec)?),
            Q::GetModel { model } => R::Model(self.get_model(&model)?),
            Q::ListModels {} => R::Models(self.list_models()?),
            Q::CommitVersion {
                model,
                step,
                state,
                metrics,
                parent,
                origin_task,
            } => R::Version(self.commit_version(&model, step, state, metrics, parent, origin_task)?),
            Q::ListVersions { model } => R::Versions(self.list_versions(&model)?),
            Q::GetVersion { model, selector } => R::Version(self.get_version(&model, &selector)?),
            Q::RecordEvents { model, events, at } => {
                if events.iter().any(|(_, n, _)| n.is_empty()) {
                    return Err(Error::InvalidArgument("event name is empty".into()));
                }
                R::Events(self.record_events(&model, &events, at)?)
            }
            Q::QueryEvents { model, name, lo, hi } => {
                R::Events(self.query_events(&model, name.as_deref(), lo, hi)?)
            }

            Q::SubmitTask { spec } => R::Key(self.submit_task(spec)?),
            Q::GetTask { task } => R::Task(self.get_task(&task)?),
            Q::ListTasks {} => R::Tasks(self.list_tasks()?),
            Q::LeaseTask {
                agent,
                ttl_ms,
                kinds,
            } => R::MaybeTask(self.lease_task(&agent, ttl_ms, &kinds)?),
            Q::Heartbeat {
                task,
                agent,
                attempt,
                ttl_ms,
            } => R::Lease(self.heartbeat(&task, &agent, attempt, ttl_ms)?),
            Q::StageOutputs {
                task,
                agent,
                attempt,
                docs,
            } => R::Keys(self.stage_outputs(&task, &agent, attempt, docs)?),
            Q::CompleteTask {
                task,
                agent,
                attempt,
                outcome,
            } => R::Note(self.complete_task(&task, &agent, attempt, outcome)?),
            Q::ReplayTask { task } => R::Task(self.replay_task(&task)?),
            Q::ReadNotifications { from, limit } => {
                R::Notes(self.read_notifications(from, limit as usize)?)
            }
            Q::SubmitPlan { plan } => R::Key(self.submit_plan(plan)?),
            Q::GetPlan { plan } => R::Plan(self.get_plan(&plan)?),
            Q::ListPlans {} => R::Plans(self.list_plans()?),
            Q::MasterStep {
                master,
                ttl_ms,
                max_messages,
            } => R::Master(self.master_step(&master, ttl_ms, max_messages as usize)?),
            Q::ReleaseMaster { master } => {
                self.release_master(&master)?;
                R::Unit
            }
            Q::MasterState {} => R::MasterState(self.master_state()?),
        })
    }
}

/// Carries requests to an engine.
pub trait Backend: Send + Sync {
    fn call(&self, req: Request) -> Result<Response>;

    /// Decoded model states fetched through this backend.
    fn cache(&self) -> &ModelCache;

    /// `"local"` or `"wire"`.
    fn transport(&self) -> &'static str;
}

/// In-process transport.
#[derive(Debug, Clone)]
pub struct LocalBackend {
    engine: Arc<Engine>,
    cache: Arc<ModelCache>,
}

impl LocalBackend {
    pub fn new(engine: Arc<Engine>) -> Self {
        LocalBackend {
            engine,
            cache: Arc::new(ModelCache::default()),
        }
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }
}

impl Backend for LocalBackend {
    fn call(&self, req: Request) -> Result<Response> {
        self.engine.handle(req)
    }

    fn cache(&self) -> &ModelCache {
        &self.cache
    }

    fn transport(&self) -> &'static str {
        "local"
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn call(&self, req: Request) -> Result<Response> {
        (**self).call(req)
    }

    fn cache(&self) -> &ModelCache {
        (**self).cache()
    }

    fn transport(&self) -> &'static str {
        (**self).transport()
    }
}

macro_rules! expect {
    ($resp:expr, $pat:pat => $out:expr) => {
        match $resp {
            $pat => Ok($out),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    };
}

/// Typed client operations, available on every [`Backend`].
pub trait Ops: Backend {
    fn ping(&self) -> Result<ServerInfo> {
        expect!(self.call(Request::Ping {})?, Response::Info(i) => i)
    }

    fn put_document(&self, doc: Document) -> Result<DocumentKey> {
        expect!(self.call(Request::PutDocument { doc })?, Response::Key(k) => k)
    }

    fn put_documents(&self, docs: Vec<Document>) -> Result<Vec<DocumentKey>> {
        expect!(self.call(Request::PutDocuments { docs })?, Response::Keys(k) => k)
    }

    /// Stores a sample, moving payloads above `inline_threshold` bytes into
    /// the blob store first.
    fn put_sample(&self, mut doc: Document, inline_threshold: usize) -> Result<DocumentKey> {
        if let Payload::Inline(bytes) = &doc.payload {
            if bytes.len() > inline_threshold {
                let ptr = self.put_blob(bytes)?;
                doc.payload = Payload::Blob(ptr);
            }
        }
        self.put_document(doc)
    }

    fn get_document(&self, key: &str) -> Result<Document> {
        expect!(self.call(Request::GetDocument { key: key.into() })?, Response::Document(d) => d)
    }

    fn delete_document(&self, key: &str) -> Result<()> {
        expect!(self.call(Request::DeleteDocument { key: key.into() })?, Response::Unit => ())
    }

    fn create_index(&self, tag: &str) -> Result<()> {
        expect!(self.call(Request::CreateIndex { tag: tag.into() })?, Response::Unit => ())
    }

    fn scan(&self, query: &str, cursor: Option<ScanCursor>, limit: u32) -> Result<ScanPage> {
        let req = Request::Scan {
            query: query.into(),
            cursor,
            limit,
            linear: false,
        };
        expect!(self.call(req)?, Response::Page { keys, next, .. } => ScanPage { keys, next })
    }

    /// Every matching key, following pages.
    fn scan_all(&self, query: &str) -> Result<Vec<DocumentKey>> {
        let mut out = Vec::new();
        let mut cursor = None;
        loop {
            let page = self.scan(query, cursor, 4096)?;
            out.extend(page.keys);
            match page.next {
                Some(c) => cursor = Some(c),
                None => return Ok(out),
            }
        }
    }

    fn stats(&self) -> Result<StoreStats> {
        expect!(self.call(Request::Stats {})?, Response::Stats(s) => s)
    }

    fn compact(&self) -> Result<()> {
        expect!(self.call(Request::Compact {})?, Response::Unit => ())
    }

    /// Uploads `data` chunk by chunk; chunks are compressed before they
    /// leave the client.
    fn put_blob(&self, data: &[u8]) -> Result<BlobPointer> {
        self.put_blob_with(data, DEFAULT_CHUNK, Codec::DEFAULT)
    }

    fn put_blob_with(&self, data: &[u8], chunk_size: u32, codec: Codec) -> Result<BlobPointer> {
        if data.is_empty() {
            return Err(Error::EmptyBlob);
        }
        crate::store::blob::validate_chunk_size(chunk_size)?;
        let upload = expect!(
            self.call(Request::BlobBegin { chunk_size, codec: codec.id() })?,
            Response::Upload(u) => u
        )?;
        let sent = data
            .chunks(chunk_size as usize)
            .enumerate()
            .try_for_each(|(i, raw)| {
                let req = Request::BlobChunk {
                    upload,
                    index: i as u32,
                    raw_len: raw.len() as u32,
                    data: codec.encode(raw),
                };
                expect!(self.call(req)?, Response::Unit => ())
            });
        if let Err(e) = sent {
            let _ = self.call(Request::BlobAbort { upload });
            return Err(e);
        }
        expect!(self.call(Request::BlobFinish { upload })?, Response::Pointer(p) => p)
    }

    /// Fetches and verifies a whole blob.
    fn get_blob(&self, ptr: &BlobPointer) -> Result<Vec<u8>> {
        let mut asm = BlobAssembler::new(ptr);
        for index in 0..ptr.chunk_count {
            let req = Request::ReadChunk {
                pointer: ptr.clone(),
                index,
            };
            let data = expect!(self.call(req)?, Response::Chunk { data } => data)?;
            asm.push_encoded(index, &data)?;
        }
        asm.finish()
    }

    /// Payload bytes of `doc`, fetching the blob if needed.
    fn payload(&self, doc: &Document) -> Result<Vec<u8>> {
        match &doc.payload {
            Payload::Inline(b) => Ok(b.clone()),
            Payload::Blob(p) => self.get_blob(p),
        }
    }

    fn define_view(&self, view: &str, query: &str) -> Result<DatasetView> {
        let req = Request::DefineView {
            view: view.into(),
            query: query.into(),
        };
        expect!(self.call(req)?, Response::View(v) => v)
    }

    fn get_view(&self, view: &str) -> Result<DatasetView> {
        expect!(self.call(Request::GetView { view: view.into() })?, Response::View(v) => v)
    }

    fn list_views(&self) -> Result<Vec<DatasetView>> {
        expect!(self.call(Request::ListViews {})?, Response::Views(v) => v)
    }

    fn count_view(&self, view: &str) -> Result<u64> {
        expect!(self.call(Request::CountView { view: view.into() })?, Response::Count(n) => n)
    }

    fn open_cursor(
        &self,
        cursor: &str,
        view: &str,
        batch_size: u32,
        seq_range: Option<(u64, u64)>,
    ) -> Result<BatchCursor> {
        let req = Request::OpenCursor {
            cursor: cursor.into(),
            view: view.into(),
            batch_size,
            seq_range,
        };
        expect!(self.call(req)?, Response::Cursor(c) => c)
    }

    /// Next batch as stored; blob payloads remain pointers.
    fn read_batch(&self, cursor: &str) -> Result<BatchRead> {
        let resp = self.call(Request::ReadBatch {
            cursor: cursor.into(),
        })?;
        expect!(resp, Response::Batch { docs, cursor, end } => BatchRead { docs, cursor, end })
    }

    /// Next batch with every blob payload fetched and inlined.
    fn read_batch_resolved(&self, cursor: &str) -> Result<BatchRead> {
        let mut b = self.read_batch(cursor)?;
        for d in &mut b.docs {
            if let Payload::Blob(p) = &d.payload {
                d.payload = Payload::Inline(self.get_blob(p)?);
            }
        }
        Ok(b)
    }

    fn reset_cursor(&self, cursor: &str) -> Result<BatchCursor> {
        expect!(self.call(Request::ResetCursor { cursor: cursor.into() })?, Response::Cursor(c) => c)
    }

    fn attach_stream(
        &self,
        view: &str,
        threshold: u64,
        max_age_ms: u64,
        template: TaskTemplate,
    ) -> Result<StreamController> {
        let req = Request::AttachStream {
            view: view.into(),
            threshold,
            max_age_ms,
            template,
        };
        expect!(self.call(req)?, Response::Stream(s) => s)
    }

    fn poll_stream(&self, view: &str) -> Result<Option<Task>> {
        expect!(self.call(Request::PollStream { view: view.into() })?, Response::MaybeTask(t) => t)
    }

    fn stream_status(&self, view: &str) -> Result<StreamStatus> {
        expect!(self.call(Request::StreamStatus { view: view.into() })?, Response::StreamStatus(s) => s)
    }

    fn list_streams(&self) -> Result<Vec<StreamController>> {
        expect!(self.call(Request::ListStreams {})?, Response::Streams(s) => s)
    }

    fn register_model(&self, model: &str, spec: NetworkSpec) -> Result<ModelRecord> {
        let req = Request::RegisterModel {
            model: model.into(),
            spec,
        };
        expect!(self.call(req)?, Response::Model(m) => m)
    }

    fn get_model(&self, model: &str) -> Result<ModelRecord> {
        expect!(self.call(Request::GetModel { model: model.into() })?, Response::Model(m) => m)
    }

    fn list_models(&self) -> Result<Vec<ModelRecord>> {
        expect!(self.call(Request::ListModels {})?, Response::Models(m) => m)
    }

    fn commit_version(
        &self,
        model: &str,
        step: u64,
        state: BlobPointer,
        metrics: TagMap,
        parent: Option<String>,
        origin_task: Option<String>,
    ) -> Result<ModelVersion> {
        let req = Request::CommitVersion {
            model: model.into(),
            step,
            state,
            metrics,
            parent,
            origin_task,
        };
        expect!(self.call(req)?, Response::Version(v) => v)
    }

    fn list_versions(&self, model: &str) -> Result<Vec<ModelVersion>> {
        expect!(self.call(Request::ListVersions { model: model.into() })?, Response::Versions(v) => v)
    }

    fn get_version(&self, model: &str, selector: VersionSelector) -> Result<ModelVersion> {
        let req = Request::GetVersion {
            model: model.into(),
            selector,
        };
        expect!(self.call(req)?, Response::Version(v) => v)
    }

    /// Serializes `state`, uploads it and publishes it as a new version
    /// whose parent is the current latest. The shapes are checked against
    /// the registered spec before anything is uploaded. The state's seed is
    /// kept in the `seed` metric.
    fn save_state(
        &self,
        model: &str,
        state: &NetworkState<f32>,
        mut metrics: TagMap,
        origin_task: Option<&str>,
    ) -> Result<ModelVersion> {
        let record = self.get_model(model)?;
        let expected = record.spec.validate()?.tensor_shapes();
        let named = state.to_named();
        let actual: std::collections::BTreeMap<String, Vec<usize>> = named
            .iter()
            .map(|(n, t)| (n.clone(), t.dims().to_vec()))
            .collect();
        if actual != expected {
            return Err(Error::ShapeMismatch(format!(
                "state {actual:?} does not fit model `{model}` {expected:?}"
            )));
        }
        let parent = match self.get_version(model, VersionSelector::Latest) {
            Ok(v) => Some(v.version_id),
            Err(Error::VersionNotFound(_)) => None,
            Err(e) => return Err(e),
        };
        let bytes = fgts::encode(&named)?;
        let ptr = self.put_blob(&bytes)?;
        metrics.insert("seed".into(), crate::store::TagValue::Int(state.seed as i64));
        self.commit_version(model, state.step, ptr, metrics, parent, origin_task.map(str::to_owned))
    }

    /// Loads a version's parameters, going through the backend's cache.
    fn load_state(
        &self,
        model: &str,
        selector: VersionSelector,
    ) -> Result<(ModelVersion, NetworkState<f32>)> {
        let v = self.get_version(model, selector)?;
        let tensors = match self.cache().get(model, &v.version_id) {
            Some(t) => t,
            None => {
                let bytes = self.get_blob(&v.state)?;
                self.cache().note_blob_read();
                let t = Arc::new(fgts::decode(&bytes)?);
                self.cache().insert(model, &v.version_id, t.clone());
                t
            }
        };
        let seed = v.metrics.get("seed").and_then(|s| s.as_i64()).unwrap_or(0) as u64;
        let state = NetworkState::from_named((*tensors).clone(), seed, v.step)?;
        Ok((v, state))
    }

    fn record_event(&self, model: &str, step: u64, name: &str, value: f64) -> Result<ModelEvent> {
        self.record_events(model, vec![(step, name.to_owned(), value)], None)
            .map(|mut v| v.remove(0))
    }

    fn record_events(
        &self,
        model: &str,
        events: Vec<(u64, String, f64)>,
        at: Option<u64>,
    ) -> Result<Vec<ModelEvent>> {
        let req = Request::RecordEvents {
            model: model.into(),
            events,
            at,
        };
        expect!(self.call(req)?, Response::Events(e) => e)
    }

    fn query_events(&self, model: &str, name: Option<&str>, lo: u64, hi: u64) -> Result<Vec<ModelEvent>> {
        let req = Request::QueryEvents {
            model: model.into(),
            name: name.map(str::to_owned),
            lo,
            hi,
        };
        expect!(self.call(req)?, Response::Events(e) => e)
    }

    fn submit_task(&self, spec: TaskSpec) -> Result<String> {
        expect!(self.call(Request::SubmitTask { spec })?, Response::Key(k) => k)
    }

    fn get_task(&self, task: &str) -> Result<Task> {
        expect!(self.call(Request::GetTask { task: task.into() })?, Response::Task(t) => t)
    }

    fn list_tasks(&self) -> Result<Vec<Task>> {
        expect!(self.call(Request::ListTasks {})?, Response::Tasks(t) => t)
    }

    fn lease_task(&self, agent: &str, ttl_ms: u64, kinds: &[String]) -> Result<Option<Task>> {
        let req = Request::LeaseTask {
            agent: agent.into(),
            ttl_ms,
            kinds: kinds.to_vec(),
        };
        expect!(self.call(req)?, Response::MaybeTask(t) => t)
    }

    fn heartbeat(&self, task: &str, agent: &str, attempt: u32, ttl_ms: u64) -> Result<Lease> {
        let req = Request::Heartbeat {
            task: task.into(),
            agent: agent.into(),
            attempt,
            ttl_ms,
        };
        expect!(self.call(req)?, Response::Lease(l) => l)
    }

    fn stage_outputs(
        &self,
        task: &str,
        agent: &str,
        attempt: u32,
        docs: Vec<(u32, Document)>,
    ) -> Result<Vec<String>> {
        let req = Request::StageOutputs {
            task: task.into(),
            agent: agent.into(),
            attempt,
            docs,
        };
        expect!(self.call(req)?, Response::Keys(k) => k)
    }

    fn complete_task(
        &self,
        task: &str,
        agent: &str,
        attempt: u32,
        outcome: Outcome,
    ) -> Result<CompletionMessage> {
        let req = Request::CompleteTask {
            task: task.into(),
            agent: agent.into(),
            attempt,
            outcome,
        };
        expect!(self.call(req)?, Response::Note(n) => n)
    }

    fn replay_task(&self, task: &str) -> Result<Task> {
        expect!(self.call(Request::ReplayTask { task: task.into() })?, Response::Task(t) => t)
    }

    fn read_notifications(&self, from: u64, limit: u32) -> Result<Vec<CompletionMessage>> {
        expect!(self.call(Request::ReadNotifications { from, limit })?, Response::Notes(n) => n)
    }

    fn submit_plan(&self, plan: PlanSpec) -> Result<String> {
        expect!(self.call(Request::SubmitPlan { plan })?, Response::Key(k) => k)
    }

    fn get_plan(&self, plan: &str) -> Result<PlanReport> {
        expect!(self.call(Request::GetPlan { plan: plan.into() })?, Response::Plan(p) => p)
    }

    fn list_plans(&self) -> Result<Vec<Plan>> {
        expect!(self.call(Request::ListPlans {})?, Response::Plans(p) => p)
    }

    fn master_step(&self, master: &str, ttl_ms: u64, max_messages: u32) -> Result<MasterActions> {
        let req = Request::MasterStep {
            master: master.into(),
            ttl_ms,
            max_messages,
        };
        expect!(self.call(req)?, Response::Master(a) => a)
    }

    fn release_master(&self, master: &str) -> Result<()> {
        expect!(self.call(Request::ReleaseMaster { master: master.into() })?, Response::Unit => ())
    }

    fn master_state(&self) -> Result<MasterState> {
        expect!(self.call(Request::MasterState {})?, Response::MasterState(s) => s)
    }
}

impl<B: Backend + ?Sized> Ops for B {}
