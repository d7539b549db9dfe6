//! Transport conformance suite.
//!
//! Every case talks to the engine only through a [`Backend`], so the same
//! suite runs in-process and over the wire. Each case records the
//! observable outcome of its operations in a [`Transcript`]; two
//! transports agree when their transcripts are identical.

use std::any::Any;
use std::collections::BTreeSet;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use crate::api::{Backend, LocalBackend, Ops};
use crate::clock::ManualClock;
use crate::compute::{LayerKind, LayerSpec, NetworkSpec};
use crate::dataset::sample;
use crate::engine::{Engine, EngineOptions};
use crate::error::Error;
use crate::modelstore::VersionSelector;
use crate::store::{Codec, Document, Store, StoreOptions, TagMap, TagValue};
use crate::workflow::agent::{run_agent, AgentConfig, HandlerRegistry};
use crate::workflow::{Outcome, PlanSpec, PlanStatus, TaskKind, TaskSpec, TaskStatus, TaskTemplate};

pub const START_MS: u64 = 1_000_000;
pub const INLINE_THRESHOLD: usize = 1024;

/// A fresh engine behind some transport.
pub struct Harness {
    pub backend: Arc<dyn Backend>,
    pub clock: ManualClock,
    /// Keeps the store directory, server and so on alive.
    pub guard: Box<dyn Any + Send>,
}

/// Opens an engine on a temporary directory with a manual clock.
pub fn open_engine() -> (Arc<Engine>, ManualClock, tempfile::TempDir) {
    let dir = tempfile::tempdir().expect("tempdir");
    let clock = ManualClock::new(START_MS);
    let opts = StoreOptions {
        inline_threshold: INLINE_THRESHOLD,
        sync: false,
        clock: Arc::new(clock.clone()),
        ..StoreOptions::default()
    };
    let store = Arc::new(Store::open(dir.path(), opts).expect("open store"));
    let engine = Arc::new(Engine::new(store, EngineOptions::default()));
    (engine, clock, dir)
}

pub fn local_harness() -> Harness {
    let (engine, clock, dir) = open_engine();
    Harness {
        backend: Arc::new(LocalBackend::new(engine)),
        clock,
        guard: Box::new(dir),
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub lines: Vec<String>,
}

impl Transcript {
    fn log(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }
}

pub struct Case {
    pub name: &'static str,
    pub run: fn(&Harness, &mut Transcript),
}

/// Runs every case on a fresh harness; panics on the first failed
/// expectation. Returns `(case, transcript)` pairs.
pub fn run_all(make: &dyn Fn() -> Harness) -> Vec<(&'static str, Transcript)> {
    cases()
        .into_iter()
        .map(|c| {
            let h = make();
            let mut t = Transcript::default();
            (c.run)(&h, &mut t);
            (c.name, t)
        })
        .collect()
}

fn kind(e: &Error) -> &'static str {
    e.kind()
}

fn sample_doc(key: &str, split: &str, n: i64) -> Document {
    Document::inline(key, vec![n as u8; 8])
        .with_label(format!("{}", n % 2))
        .with_tag("split", split)
        .with_tag("n", n)
}

fn feature_doc(key: &str, x: [f32; 2], label: usize) -> Document {
    Document::inline(key, sample::encode_features(&x))
        .with_label(label.to_string())
        .with_tag("dataset", "points")
}

fn small_spec() -> NetworkSpec {
    NetworkSpec::new(
        vec![2],
        vec![
            LayerSpec::dense("hidden", 8),
            LayerSpec::new("act", LayerKind::Tanh),
            LayerSpec::dense("out", 2),
        ],
    )
}

fn expect_err<T: std::fmt::Debug>(r: crate::Result<T>, want: &str) -> Error {
    match r {
        Ok(v) => panic!("expected {want}, got Ok({v:?})"),
        Err(e) => {
            assert_eq!(e.kind(), want, "unexpected error {e}");
            e
        }
    }
}

pub fn cases() -> Vec<Case> {
    vec![
        Case { name: "store_round_trip", run: store_round_trip },
        Case { name: "store_errors", run: store_errors },
        Case { name: "blob_round_trip", run: blob_round_trip },
        Case { name: "scan_pages_and_indexes", run: scan_pages_and_indexes },
        Case { name: "query_errors", run: query_errors },
        Case { name: "views_and_cursors", run: views_and_cursors },
        Case { name: "stream_triggers", run: stream_triggers },
        Case { name: "model_versions", run: model_versions },
        Case { name: "model_events", run: model_events },
        Case { name: "task_submit_and_lease", run: task_submit_and_lease },
        Case { name: "lease_expiry_and_stale", run: lease_expiry_and_stale },
        Case { name: "output_atomicity", run: output_atomicity },
        Case { name: "retries_dead_and_replay", run: retries_dead_and_replay },
        Case { name: "plan_scheduling", run: plan_scheduling },
        Case { name: "plan_failure_and_replay", run: plan_failure_and_replay },
        Case { name: "lease_race", run: lease_race },
        Case { name: "agent_user_fn", run: agent_user_fn },
        Case { name: "agent_train", run: agent_train },
    ]
}

fn store_round_trip(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    let info = b.ping().unwrap();
    assert_eq!(info.inline_threshold, INLINE_THRESHOLD);
    let d = sample_doc("a/1", "train", 3).with_tag("ok", true).with_tag("w", 0.5);
    assert_eq!(b.put_document(d.clone()).unwrap(), "a/1");
    assert_eq!(b.get_document("a/1").unwrap(), d);
    let keys = b
        .put_documents((0..5).map(|i| sample_doc(&format!("b/{i}"), "test", i)).collect())
        .unwrap();
    t.log(format!("put_documents {keys:?}"));
    b.delete_document("b/0").unwrap();
    let e = expect_err(b.get_document("b/0"), "NotFound");
    t.log(format!("get deleted: {e}"));
    let s = b.stats().unwrap();
    assert_eq!(s.documents, 5);
    t.log(format!("documents {} last_seq {}", s.documents, s.last_seq));
}

fn store_errors(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    b.put_document(sample_doc("k", "train", 1)).unwrap();
    let e = expect_err(b.put_document(sample_doc("k", "train", 2)), "DuplicateKey");
    t.log(e.to_string());
    // A failed batch applies nothing.
    let batch = vec![sample_doc("x1", "train", 1), sample_doc("k", "train", 1)];
    expect_err(b.put_documents(batch), "DuplicateKey");
    expect_err(b.get_document("x1"), "NotFound");
    let big = Document::inline("big", vec![7u8; INLINE_THRESHOLD + 1]);
    let e = expect_err(b.put_document(big.clone()), "PayloadTooLarge");
    t.log(e.to_string());
    let key = b.put_sample(big, INLINE_THRESHOLD).unwrap();
    let stored = b.get_document(&key).unwrap();
    assert!(stored.blob_id().is_some());
    assert_eq!(b.payload(&stored).unwrap(), vec![7u8; INLINE_THRESHOLD + 1]);
    for bad in ["", "__sys/x"] {
        let e = expect_err(b.put_document(Document::inline(bad, vec![1])), "InvalidDocument");
        t.log(e.to_string());
    }
    // Tags are not typed on write, but once a tag name holds two variants
    // every comparison on it is ambiguous and rejected.
    b.put_document(Document::inline("m", vec![1]).with_tag("n", "one")).unwrap();
    let e = expect_err(b.scan_all("n = 1"), "TypeMismatch");
    t.log(e.to_string());
}

fn blob_round_trip(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    let mut seed = 0x2545_f491_u32;
    for (len, chunk, codec) in [
        (1usize, 4096u32, Codec::Deflate),
        (4095, 4096, Codec::None),
        (4096, 4096, Codec::Deflate),
        (4097, 4096, Codec::None),
        (300_000, 65_536, Codec::Deflate),
    ] {
        let data: Vec<u8> = (0..len)
            .map(|i| {
                seed ^= seed << 13;
                seed ^= seed >> 17;
                seed ^= seed << 5;
                if i % 3 == 0 { 0 } else { seed as u8 }
            })
            .collect();
        let p = b.put_blob_with(&data, chunk, codec).unwrap();
        assert_eq!(p.total_size, len as u64);
        assert_eq!(p.chunk_count as usize, len.div_ceil(chunk as usize));
        assert_eq!(b.get_blob(&p).unwrap(), data);
        t.log(format!("blob {len} chunks {} codec {}", p.chunk_count, p.codec_id));
    }
    expect_err(b.put_blob(&[]), "EmptyBlob");
    expect_err(b.put_blob_with(&[1], 100, Codec::None), "InvalidArgument");
}

fn scan_pages_and_indexes(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    let docs: Vec<Document> = (0..60)
        .map(|i| sample_doc(&format!("d{i:03}"), if i % 4 == 0 { "test" } else { "train" }, i))
        .collect();
    b.put_documents(docs).unwrap();
    let q = "split = \"test\" AND n >= 8";
    let all = b.scan_all(q).unwrap();
    let expect: Vec<String> = (8..60).filter(|i| i % 4 == 0).map(|i| format!("d{i:03}")).collect();
    assert_eq!(all, expect);
    // Pages continue from a snapshot: later writes are not seen.
    let mut seen = Vec::new();
    let mut page = b.scan(q, None, 4).unwrap();
    b.put_document(sample_doc("d999", "test", 999)).unwrap();
    loop {
        seen.extend(page.keys.clone());
        match page.next {
            Some(c) => page = b.scan(q, Some(c), 4).unwrap(),
            None => break,
        }
    }
    assert_eq!(seen, expect);
    b.create_index("split").unwrap();
    b.create_index("split").unwrap();
    let indexed = b.scan_all(q).unwrap();
    assert_eq!(indexed.len(), expect.len() + 1);
    t.log(format!("matches {} then {}", expect.len(), indexed.len()));
    let e = expect_err(b.scan(q, None, 0), "InvalidArgument");
    t.log(e.to_string());
}

fn query_errors(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    b.put_document(sample_doc("a", "train", 1)).unwrap();
    let e = expect_err(b.scan_all("split ="), "SyntaxError");
    t.log(e.to_string());
    let e = expect_err(b.scan_all("n = \"one\""), "TypeMismatch");
    t.log(e.to_string());
    let e = expect_err(b.scan_all("n IN {1, \"a\"}"), "MixedVariantSet");
    t.log(e.to_string());
    assert_eq!(b.scan_all("").unwrap(), vec!["a".to_string()]);
}

fn views_and_cursors(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    b.put_documents((0..10).map(|i| sample_doc(&format!("k{i}"), "train", i)).collect())
        .unwrap();
    let v = b.define_view("train", "split = \"train\"").unwrap();
    t.log(format!("view {} = {}", v.view_key, v.query));
    expect_err(b.define_view("train", "n > 1"), "DuplicateKey");
    expect_err(b.define_view("bad", "n >"), "SyntaxError");
    expect_err(b.get_view("nope"), "ViewNotFound");
    assert_eq!(b.count_view("train").unwrap(), 10);
    b.define_view("evens", "n IN {0, 2, 4, 6, 8}").unwrap();
    let names: Vec<String> = b.list_views().unwrap().into_iter().map(|v| v.view_key).collect();
    assert_eq!(names, ["evens", "train"]);

    b.open_cursor("c", "train", 4, None).unwrap();
    let mut got = Vec::new();
    let first = b.read_batch("c").unwrap();
    got.extend(first.docs.iter().map(|d| d.key.clone()));
    // Reopening resumes rather than restarting.
    let again = b.open_cursor("c", "train", 4, None).unwrap();
    assert_eq!(again.position.as_deref(), Some("k3"));
    loop {
        let r = b.read_batch("c").unwrap();
        got.extend(r.docs.iter().map(|d| d.key.clone()));
        if r.end {
            break;
        }
    }
    t.log(format!("cursor keys {got:?}"));
    assert_eq!(got.len(), 10);
    let r = b.read_batch("c").unwrap();
    assert!(r.docs.is_empty() && r.end);
    b.reset_cursor("c").unwrap();
    assert_eq!(b.read_batch("c").unwrap().docs.len(), 4);
    expect_err(b.open_cursor("z", "nope", 4, None), "ViewNotFound");
    expect_err(b.open_cursor("z", "train", 0, None), "InvalidArgument");
}

fn stream_triggers(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    b.define_view("s", "split = \"live\"").unwrap();
    b.put_document(sample_doc("early", "live", 0)).unwrap();
    let template = TaskTemplate {
        kind: TaskKind::UserFn("noop".into()),
        model_key: String::new(),
        output_dataset: String::new(),
        params: TagMap::new(),
    };
    expect_err(b.attach_stream("s", 0, 1000, template.clone()), "InvalidArgument");
    expect_err(b.attach_stream("s", 3, 10, template.clone()), "InvalidArgument");
    expect_err(b.attach_stream("nope", 3, 1000, template.clone()), "ViewNotFound");
    let c = b.attach_stream("s", 3, 1000, template.clone()).unwrap();
    assert_eq!(c.watermark, 0);
    expect_err(b.attach_stream("s", 3, 1000, template), "AlreadyAttached");

    b.put_document(sample_doc("l1", "live", 1)).unwrap();
    assert_eq!(b.stream_status("s").unwrap().pending_count, 2);
    // Below both thresholds.
    assert!(b.poll_stream("s").unwrap().is_none());
    b.put_document(sample_doc("other", "train", 2)).unwrap();
    b.put_document(sample_doc("l2", "live", 3)).unwrap();
    let task = b.poll_stream("s").unwrap().expect("count trigger");
    let (lo, hi) = task.spec.input_range.unwrap();
    t.log(format!("count trigger {} range ({lo}, {hi}]", task.spec.task_id));
    assert!(b.poll_stream("s").unwrap().is_none());
    assert_eq!(b.stream_status("s").unwrap().pending_count, 0);
    // Dispatched range reads back exactly the pending documents.
    b.open_cursor("r", "s", 10, Some((lo, hi))).unwrap();
    let keys: Vec<String> = b.read_batch("r").unwrap().docs.into_iter().map(|d| d.key).collect();
    assert_eq!(keys, ["early", "l1", "l2"]);

    b.put_document(sample_doc("l3", "live", 4)).unwrap();
    assert!(b.poll_stream("s").unwrap().is_none());
    h.clock.advance(999);
    assert!(b.poll_stream("s").unwrap().is_none());
    h.clock.advance(1);
    let task = b.poll_stream("s").unwrap().expect("age trigger");
    t.log(format!("age trigger {} range {:?}", task.spec.task_id, task.spec.input_range));
    let st = b.stream_status("s").unwrap();
    assert_eq!(st.controller.dispatched_tasks, 2);
    assert_eq!(st.controller.watermark_key.as_deref(), Some("l3"));
    assert_eq!(b.list_streams().unwrap().len(), 1);
}

fn model_versions(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    let rec = b.register_model("m", small_spec()).unwrap();
    t.log(rec.spec.to_json());
    expect_err(b.register_model("m", small_spec()), "DuplicateKey");
    let bad = NetworkSpec::new(vec![2], vec![LayerSpec::dense("x", 2), LayerSpec::dense("x", 2)]);
    expect_err(b.register_model("bad", bad), "InvalidSpec");
    expect_err(b.get_model("nope"), "ModelNotFound");
    expect_err(b.get_version("m", VersionSelector::Latest), "VersionNotFound");

    let net = crate::compute::Network::build(&small_spec(), &Default::default()).unwrap();
    let mut s0 = net.init::<f32>(7);
    let v0 = b.save_state("m", &s0, TagMap::new(), None).unwrap();
    assert_eq!(v0.parent_version, None);
    s0.step = 5;
    s0.params.get_mut("out").unwrap().bias.data_mut()[0] = 1.5;
    let v1 = b.save_state("m", &s0, TagMap::new(), Some("t1")).unwrap();
    assert_eq!(v1.parent_version.as_deref(), Some(v0.version_id.as_str()));
    t.log(format!("versions {} -> {}", v0.version_id, v1.version_id));

    let (lv, ls) = b.load_state("m", VersionSelector::Latest).unwrap();
    assert_eq!(lv.version_id, v1.version_id);
    assert_eq!(ls.step, 5);
    assert_eq!(ls.seed, 7);
    for (k, p) in &s0.params {
        assert!(p.weight.bit_eq(&ls.params[k].weight) && p.bias.bit_eq(&ls.params[k].bias));
    }
    let reads = b.cache().blob_reads();
    b.load_state("m", VersionSelector::Id(v1.version_id.clone())).unwrap();
    assert_eq!(b.cache().blob_reads(), reads, "second load is served from the cache");

    // Same content at the same step is the same version.
    let again = b.save_state("m", &s0, TagMap::new(), Some("t1")).unwrap();
    assert_eq!(again.version_id, v1.version_id);
    let ids: Vec<String> = b.list_versions("m").unwrap().into_iter().map(|v| v.version_id).collect();
    assert_eq!(ids, [v0.version_id.clone(), v1.version_id.clone()]);

    let other = crate::compute::Network::build(
        &NetworkSpec::new(vec![3], vec![LayerSpec::dense("out", 2)]),
        &Default::default(),
    )
    .unwrap()
    .init::<f32>(1);
    let e = expect_err(b.save_state("m", &other, TagMap::new(), None), "ShapeMismatch");
    t.log(kind(&e));
    expect_err(b.get_version("m", VersionSelector::Id("s9-00000000".into())), "VersionNotFound");
}

fn model_events(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    b.register_model("m", small_spec()).unwrap();
    for step in [3u64, 1, 2, 1] {
        b.record_event("m", step, "loss", step as f64 / 10.0).unwrap();
        h.clock.advance(1);
    }
    b.record_event("m", 2, "acc", 0.5).unwrap();
    let ev = b.query_events("m", Some("loss"), 1, 3).unwrap();
    let steps: Vec<u64> = ev.iter().map(|e| e.step).collect();
    assert_eq!(steps, [1, 1, 2]);
    assert!(ev[0].at < ev[1].at);
    let all = b.query_events("m", None, 0, u64::MAX).unwrap();
    assert_eq!(all.len(), 5);
    t.log(format!("{:?}", all.iter().map(|e| (e.step, e.name.clone(), e.at)).collect::<Vec<_>>()));
    expect_err(b.record_event("nope", 1, "loss", 1.0), "ModelNotFound");
    expect_err(b.record_event("m", 1, "", 1.0), "InvalidArgument");
}

fn train_task(id: &str) -> TaskSpec {
    TaskSpec::train(id, "points", "m", "feat")
}

fn setup_points(b: &dyn Backend) {
    let docs = (0..16)
        .map(|i| {
            let x = [(i % 4) as f32 - 1.5, (i / 4) as f32 - 1.5];
            feature_doc(&format!("p{i:02}"), x, usize::from(x[0] > 0.0))
        })
        .collect();
    b.put_documents(docs).unwrap();
    b.define_view("points", "dataset = \"points\"").unwrap();
    b.register_model("m", small_spec()).unwrap();
}

fn task_submit_and_lease(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    expect_err(b.submit_task(train_task("t1")), "UnknownModel");
    b.register_model("m", small_spec()).unwrap();
    expect_err(b.submit_task(train_task("t1")), "UnknownView");
    setup_points_view_only(b.as_ref());
    assert_eq!(b.submit_task(train_task("t1")).unwrap(), "t1");
    assert_eq!(b.submit_task(train_task("t1")).unwrap(), "t1");
    h.clock.advance(1);
    b.submit_task(TaskSpec::new("u1", TaskKind::UserFn("prep".into()))).unwrap();
    assert_eq!(b.list_tasks().unwrap().len(), 2);

    expect_err(b.lease_task("a", 999, &[]), "InvalidArgument");
    let none = b.lease_task("a", 5000, &["user_fn:other".to_string()]).unwrap();
    assert!(none.is_none());
    let l = b.lease_task("a", 5000, &[]).unwrap().expect("oldest first");
    assert_eq!(l.spec.task_id, "t1");
    assert_eq!(l.status, TaskStatus::Leased);
    assert_eq!(l.attempts, 1);
    let l2 = b.lease_task("b", 5000, &["train".to_string()]).unwrap();
    assert!(l2.is_none(), "t1 is leased");
    let u = b.lease_task("b", 5000, &["user_fn:prep".to_string()]).unwrap().unwrap();
    assert_eq!(u.spec.task_id, "u1");
    assert!(b.lease_task("c", 5000, &[]).unwrap().is_none());
    let lease = b.heartbeat("t1", "a", 1, 8000).unwrap();
    assert_eq!(lease.expires_at, START_MS + 1 + 8000);
    t.log(format!("lease {lease:?}"));
    expect_err(b.get_task("zz"), "TaskNotFound");
}

fn setup_points_view_only(b: &dyn Backend) {
    b.define_view("points", "dataset = \"points\"").unwrap();
}

fn lease_expiry_and_stale(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    b.submit_task(TaskSpec::new("u", TaskKind::UserFn("f".into()))).unwrap();
    let a = b.lease_task("a", 1000, &[]).unwrap().unwrap();
    b.stage_outputs("u", "a", 1, vec![(0, Document::inline("", vec![1]))]).unwrap();
    h.clock.advance(999);
    assert!(b.lease_task("b", 1000, &[]).unwrap().is_none());
    h.clock.advance(1);
    let second = b.lease_task("b", 1000, &[]).unwrap().expect("expired lease is re-leasable");
    assert_eq!(second.attempts, 2);
    t.log(format!("attempts {} -> {}", a.attempts, second.attempts));
    let e = expect_err(b.complete_task("u", "a", 1, Outcome::Ok), "StaleLease");
    t.log(e.to_string());
    expect_err(b.heartbeat("u", "a", 1, 1000), "StaleLease");
    expect_err(
        b.stage_outputs("u", "a", 1, vec![(1, Document::inline("", vec![1]))]),
        "StaleLease",
    );
    b.stage_outputs("u", "b", 2, vec![(0, Document::inline("", vec![2]))]).unwrap();
    let msg = b.complete_task("u", "b", 2, Outcome::Ok).unwrap();
    assert_eq!(msg.outputs, ["u/0"]);
    // Only the second attempt's output is visible.
    assert_eq!(b.payload(&b.get_document("u/0").unwrap()).unwrap(), vec![2]);
    expect_err(b.complete_task("u", "b", 2, Outcome::Ok), "StaleLease");
}

fn output_atomicity(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    b.submit_task(TaskSpec {
        output_dataset: "out".into(),
        ..TaskSpec::new("w", TaskKind::UserFn("f".into()))
    })
    .unwrap();
    b.lease_task("a", 5000, &[]).unwrap().unwrap();
    let docs = (0..3)
        .map(|i| (i, Document::inline("", vec![i as u8]).with_tag("dataset", "out")))
        .collect();
    let keys = b.stage_outputs("w", "a", 1, docs).unwrap();
    assert_eq!(keys, ["w/0", "w/1", "w/2"]);
    assert!(b.scan_all("dataset = \"out\"").unwrap().is_empty());
    expect_err(b.get_document("w/0"), "NotFound");
    let msg = b.complete_task("w", "a", 1, Outcome::Ok).unwrap();
    assert_eq!(b.scan_all("dataset = \"out\"").unwrap(), keys);
    assert_eq!(msg.status, TaskStatus::Completed);
    t.log(format!("note {} {:?} {:?}", msg.seq, msg.outputs, msg.outcome));
    let notes = b.read_notifications(0, 10).unwrap();
    assert_eq!(notes, vec![msg]);
    let task = b.get_task("w").unwrap();
    assert_eq!(task.outputs, keys);
}

fn retries_dead_and_replay(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    b.submit_task(TaskSpec::new("r", TaskKind::UserFn("f".into()))).unwrap();
    for attempt in 1..=3u32 {
        let l = b.lease_task("a", 5000, &[]).unwrap().expect("requeued");
        assert_eq!(l.attempts, attempt);
        b.stage_outputs("r", "a", attempt, vec![(0, Document::inline("", vec![1]))]).unwrap();
        let m = b
            .complete_task("r", "a", attempt, Outcome::Error { message: format!("boom {attempt}") })
            .unwrap();
        t.log(format!("attempt {attempt}: {:?}", m.status));
    }
    let task = b.get_task("r").unwrap();
    assert_eq!(task.status, TaskStatus::Dead);
    assert_eq!(task.last_error.as_deref(), Some("boom 3"));
    assert!(b.lease_task("a", 5000, &[]).unwrap().is_none());
    expect_err(b.get_document("r/0"), "NotFound");
    let replayed = b.replay_task("r").unwrap();
    assert_eq!((replayed.status, replayed.attempts), (TaskStatus::Pending, 0));
    let l = b.lease_task("a", 5000, &[]).unwrap().unwrap();
    assert_eq!(l.attempts, 1);
    b.complete_task("r", "a", 1, Outcome::Ok).unwrap();
    expect_err(b.replay_task("r"), "InvalidArgument");
}

fn user_task(id: &str, deps: &[&str]) -> TaskSpec {
    let mut s = TaskSpec::new(id, TaskKind::UserFn("f".into()));
    s.depends_on = deps.iter().map(|d| d.to_string()).collect();
    s
}

fn finish(b: &dyn Backend, agent: &str) -> String {
    let task = b.lease_task(agent, 5000, &[]).unwrap().expect("a task is ready");
    let attempt = task.attempts;
    b.complete_task(task.id(), agent, attempt, Outcome::Ok).unwrap();
    task.spec.task_id
}

fn plan_scheduling(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    let cyclic = PlanSpec {
        plan_id: "cyc".into(),
        tasks: vec![user_task("x", &["y"]), user_task("y", &["x"])],
    };
    expect_err(b.submit_plan(cyclic), "CycleDetected");
    let unknown = PlanSpec {
        plan_id: "unk".into(),
        tasks: vec![user_task("x", &["q"])],
    };
    expect_err(b.submit_plan(unknown), "InvalidArgument");

    let diamond = PlanSpec {
        plan_id: "d".into(),
        tasks: vec![
            user_task("A", &[]),
            user_task("B", &["A"]),
            user_task("C", &["A"]),
            user_task("D", &["B", "C"]),
        ],
    };
    assert_eq!(b.submit_plan(diamond.clone()).unwrap(), "d");
    assert_eq!(b.submit_plan(diamond).unwrap(), "d");
    assert_eq!(finish(b.as_ref(), "a"), "A");
    // B and C wait for the master to process A's completion.
    assert!(b.lease_task("a", 5000, &[]).unwrap().is_none());
    expect_err(b.master_step("", 5000, 100), "InvalidArgument");
    let acts = b.master_step("m1", 5000, 100).unwrap();
    assert_eq!(acts.unblocked, ["B", "C"]);
    t.log(format!("{acts:?}"));
    expect_err(b.master_step("m2", 5000, 100), "NotMaster");
    let bb = b.lease_task("a", 5000, &[]).unwrap().unwrap();
    let cc = b.lease_task("b", 5000, &[]).unwrap().unwrap();
    b.complete_task(bb.id(), "a", 1, Outcome::Ok).unwrap();
    let acts = b.master_step("m1", 5000, 100).unwrap();
    assert!(acts.unblocked.is_empty(), "D still waits for C");
    b.complete_task(cc.id(), "b", 1, Outcome::Ok).unwrap();
    let acts = b.master_step("m1", 5000, 100).unwrap();
    assert_eq!(acts.unblocked, ["D"]);
    assert_eq!(finish(b.as_ref(), "a"), "D");
    let acts = b.master_step("m1", 5000, 100).unwrap();
    assert_eq!(acts.plans_completed, ["d"]);
    let st = b.master_state().unwrap();
    assert_eq!((st.offset, st.applied_ok), (4, 4));
    let rep = b.get_plan("d").unwrap();
    assert_eq!(rep.plan.status, PlanStatus::Completed);
    t.log(format!("order {:?}", rep.plan.tasks));
    b.release_master("m1").unwrap();
    b.master_step("m2", 5000, 100).unwrap();
    expect_err(b.get_plan("zz"), "PlanNotFound");
}

fn plan_failure_and_replay(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    let plan = PlanSpec {
        plan_id: "p".into(),
        tasks: vec![user_task("A", &[]), user_task("B", &["A"]), user_task("C", &[])],
    };
    b.submit_plan(plan).unwrap();
    // A dies through lease expiry, which leaves no notification.
    for _ in 0..3 {
        let a = b.lease_task("x", 1000, &["user_fn:f".to_string()]).unwrap().unwrap();
        assert_eq!(a.spec.task_id, "A");
        h.clock.advance(1000);
    }
    let acts = b.master_step("m", 5000, 100).unwrap();
    assert_eq!(acts.plans_failed, ["p"]);
    let rep = b.get_plan("p").unwrap();
    let mut st: Vec<_> = rep.tasks.iter().map(|k| (k.spec.task_id.clone(), k.status)).collect();
    st.sort_by(|a, b| a.0.cmp(&b.0));
    t.log(format!("{st:?}"));
    assert_eq!(st[0], ("A".to_string(), TaskStatus::Dead));
    assert!(st.iter().filter(|s| s.0 != "A").all(|s| s.1 == TaskStatus::Failed));
    assert!(b.lease_task("x", 1000, &[]).unwrap().is_none());

    b.replay_task("A").unwrap();
    assert_eq!(b.get_plan("p").unwrap().plan.status, PlanStatus::Running);
    let mut done = BTreeSet::new();
    while done.len() < 3 {
        b.master_step("m", 5000, 100).unwrap();
        while let Some(task) = b.lease_task("x", 1000, &[]).unwrap() {
            b.complete_task(task.id(), "x", task.attempts, Outcome::Ok).unwrap();
            done.insert(task.spec.task_id);
        }
    }
    let acts = b.master_step("m", 5000, 100).unwrap();
    assert_eq!(acts.plans_completed, ["p"]);
}

fn lease_race(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    for i in 0..4 {
        b.submit_task(user_task(&format!("t{i}"), &[])).unwrap();
    }
    let winners = std::thread::scope(|s| {
        let hs: Vec<_> = (0..8)
            .map(|a| {
                let b = b.clone();
                s.spawn(move || {
                    let mut won = Vec::new();
                    while let Some(task) = b.lease_task(&format!("agent{a}"), 5000, &[]).unwrap() {
                        won.push(task.spec.task_id);
                    }
                    won
                })
            })
            .collect();
        hs.into_iter().flat_map(|h| h.join().unwrap()).collect::<Vec<_>>()
    });
    let unique: BTreeSet<_> = winners.iter().cloned().collect();
    assert_eq!(winners.len(), 4, "each task leased exactly once: {winners:?}");
    assert_eq!(unique.len(), 4);
    t.log(format!("{unique:?}"));
}

fn agent_user_fn(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    b.put_documents((0..5).map(|i| sample_doc(&format!("raw{i}"), "raw", i)).collect())
        .unwrap();
    b.define_view("raw", "split = \"raw\"").unwrap();
    let mut reg = HandlerRegistry::new();
    reg.register_user_fn("double", |ctx| {
        let docs = ctx.read_input(2)?;
        let out = docs
            .iter()
            .map(|d| {
                let n = d.tags["n"].as_i64().unwrap_or(0);
                Document::inline("", vec![0u8]).with_tag("n2", n * 2)
            })
            .collect();
        ctx.emit(out)?;
        Ok(())
    })
    .unwrap();
    assert!(matches!(
        reg.register_user_fn("double", |_| Ok(())),
        Err(Error::DuplicateName(_))
    ));
    reg.register_user_fn("fail", |_| Err(Error::Handler("always".into()))).unwrap();
    b.submit_task(TaskSpec {
        input_dataset: "raw".into(),
        output_dataset: "doubled".into(),
        ..TaskSpec::new("j1", TaskKind::UserFn("double".into()))
    })
    .unwrap();
    b.submit_task(TaskSpec::new("j2", TaskKind::UserFn("fail".into()))).unwrap();
    b.submit_task(TaskSpec::new("j3", TaskKind::UserFn("unregistered".into()))).unwrap();
    let mut cfg = AgentConfig::new("ag");
    cfg.poll_interval = Duration::from_millis(1);
    cfg.max_tasks = Some(4);
    cfg.kinds = Some(vec!["user_fn:double".into(), "user_fn:fail".into()]);
    cfg.idle_timeout = Some(Duration::ZERO);
    let report = run_agent(b.as_ref(), &reg, &cfg, &AtomicBool::new(false), None).unwrap();
    t.log(format!("{report:?}"));
    assert_eq!(report.completed, 1);
    assert_eq!(report.failed, 3, "fail is retried until dead");
    let out = b.scan_all("dataset = \"doubled\"").unwrap();
    assert_eq!(out, ["j1/0", "j1/1", "j1/2", "j1/3", "j1/4"]);
    let d = b.get_document("j1/4").unwrap();
    assert_eq!(d.tags["n2"], TagValue::Int(8));
    assert_eq!(b.get_task("j2").unwrap().status, TaskStatus::Dead);
    assert_eq!(b.get_task("j3").unwrap().status, TaskStatus::Pending);
}

fn agent_train(h: &Harness, t: &mut Transcript) {
    let b = &h.backend;
    setup_points(b.as_ref());
    let spec = train_task("fit")
        .with_param("lr", 0.5)
        .with_param("epochs", 60i64)
        .with_param("batch_size", 4i64)
        .with_param("seed", 3i64)
        .with_param("emit_layer", "act");
    b.submit_task(spec).unwrap();
    let mut cfg = AgentConfig::new("trainer");
    cfg.max_tasks = Some(1);
    cfg.poll_interval = Duration::from_millis(1);
    let reg = HandlerRegistry::with_train();
    let report = run_agent(b.as_ref(), &reg, &cfg, &AtomicBool::new(false), None).unwrap();
    assert_eq!(report.completed, 1, "{:?}", b.get_task("fit").unwrap().last_error);
    let versions = b.list_versions("m").unwrap();
    assert_eq!(versions.len(), 1);
    let v = &versions[0];
    assert_eq!(v.origin_task.as_deref(), Some("fit"));
    assert_eq!(v.step, 240);
    let acc = v.metrics["accuracy"].as_f64().unwrap();
    assert!(acc >= 0.99, "accuracy {acc}");
    t.log(format!("version {} accuracy {acc}", v.version_id));
    let losses = b.query_events("m", Some("loss"), 0, u64::MAX).unwrap();
    assert_eq!(losses.len(), 60);
    assert!(losses.last().unwrap().value < losses[0].value);
    let feats = b.scan_all("dataset = \"feat\"").unwrap();
    assert_eq!(feats.len(), 16);
    let f = b.get_document(&feats[0]).unwrap();
    assert_eq!(sample::features(&f).unwrap().len(), 8);
    assert_eq!(f.tags["source"], TagValue::Str("p00".into()));
}
