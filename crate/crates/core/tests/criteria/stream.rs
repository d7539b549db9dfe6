//! Randomized append / poll / crash interleavings against one stream
//! controller. Every trial ends by draining the stream and then checks that
//! the dispatched input ranges partition the matching documents.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use forge_core::clock::ManualClock;
use forge_core::engine::{Engine, EngineOptions};
use forge_core::store::{Document, FaultPoint, Store, StoreOptions};
use forge_core::tagquery::parse;
use forge_core::workflow::{TaskKind, TaskTemplate};
use forge_core::Error;
use rand::{Rng, SeedableRng};
use rand_xorshift::XorShiftRng;

const TRIALS: u64 = 1000;
const OPS: usize = 40;

fn open(dir: &Path, clock: &ManualClock) -> Engine {
    let store = Store::open(
        dir,
        StoreOptions {
            sync: false,
            clock: Arc::new(clock.clone()),
            // Small segments so compaction has something to do.
            segment_max_bytes: 4096,
            compact_garbage_bytes: u64::MAX,
            ..StoreOptions::default()
        },
    )
    .expect("reopen");
    Engine::new(Arc::new(store), EngineOptions::default())
}

fn fault(rng: &mut XorShiftRng) -> FaultPoint {
    match rng.random_range(0..5) {
        0 => FaultPoint::BeforeAppend,
        1 => FaultPoint::TornAppend {
            keep_per_mille: rng.random_range(0..1000),
        },
        2 => FaultPoint::AfterAppend,
        3 => FaultPoint::CompactBeforeManifest,
        _ => FaultPoint::CompactAfterManifest,
    }
}

struct Trial {
    dir: tempfile::TempDir,
    clock: ManualClock,
    engine: Option<Engine>,
    next_doc: u64,
    /// Keys whose put was acknowledged.
    acked: BTreeSet<String>,
    /// Keys whose put may or may not have landed.
    unsure: BTreeSet<String>,
    crashes: u32,
}

impl Trial {
    fn new(rng: &mut XorShiftRng) -> Trial {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(1_000_000);
        let engine = open(dir.path(), &clock);
        engine.define_view("v", parse(r#"k = "x""#).unwrap()).unwrap();
        let template = TaskTemplate {
            kind: TaskKind::UserFn("consume".into()),
            model_key: String::new(),
            output_dataset: String::new(),
            params: Default::default(),
        };
        engine
            .attach_stream("v", rng.random_range(1..6), rng.random_range(100..2000), template)
            .unwrap();
        Trial {
            dir,
            clock,
            engine: Some(engine),
            next_doc: 0,
            acked: BTreeSet::new(),
            unsure: BTreeSet::new(),
            crashes: 0,
        }
    }

    fn e(&self) -> &Engine {
        self.engine.as_ref().expect("open")
    }

    fn reopen(&mut self) {
        // The old handle must be gone before the directory lock is retaken.
        self.engine = None;
        self.engine = Some(open(self.dir.path(), &self.clock));
        for k in std::mem::take(&mut self.unsure) {
            if self.e().store().contains_document(&k) {
                self.acked.insert(k);
            }
        }
        for k in &self.acked {
            assert!(self.e().store().contains_document(k), "acknowledged {k} lost");
        }
    }

    fn settle(&mut self, r: Result<(), Error>, keys: Vec<String>) {
        match r {
            Ok(()) => self.acked.extend(keys),
            Err(Error::Crashed(_)) => {
                self.unsure.extend(keys);
                self.crashes += 1;
                self.reopen();
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    fn doc(&mut self, rng: &mut XorShiftRng) -> Document {
        let key = format!("d{:05}", self.next_doc);
        self.next_doc += 1;
        let tag = if rng.random_bool(0.7) { "x" } else { "y" };
        Document::inline(key, vec![1, 2, 3]).with_tag("k", tag)
    }

    fn step(&mut self, rng: &mut XorShiftRng) {
        match rng.random_range(0..100) {
            0..=34 => {
                let d = self.doc(rng);
                let k = vec![d.key.clone()];
                let r = self.e().store().put_document(d).map(|_| ());
                self.settle(r, k);
            }
            35..=44 => {
                let docs: Vec<Document> = (0..rng.random_range(1..5)).map(|_| self.doc(rng)).collect();
                let k = docs.iter().map(|d| d.key.clone()).collect();
                let r = self.e().store().put_documents(docs).map(|_| ());
                self.settle(r, k);
            }
            45..=69 => {
                let r = self.e().poll_stream("v").map(|_| ());
                self.settle(r, Vec::new());
            }
            70..=79 => self.clock.advance(rng.random_range(0..1500)),
            80..=89 => {
                let p = fault(rng);
                self.e().store().faults().arm(p, rng.random_range(0..3));
            }
            90..=94 => {
                let r = self.e().store().compact();
                self.settle(r, Vec::new());
            }
            _ => {
                self.e().store().faults().disarm();
                self.reopen();
            }
        }
    }

    fn drain(&mut self) {
        self.e().store().faults().disarm();
        self.clock.advance(10_000);
        while self.e().poll_stream("v").unwrap().is_some() {
            self.clock.advance(10_000);
        }
    }

    fn check(&self, seed: u64) {
        let e = self.e();
        let mut ranges: Vec<(u64, u64, String)> = e
            .list_tasks()
            .unwrap()
            .into_iter()
            .filter_map(|t| t.spec.input_range.map(|(lo, hi)| (lo, hi, t.spec.task_id)))
            .collect();
        ranges.sort();
        let mut prev = 0;
        for (lo, hi, _) in &ranges {
            assert_eq!(*lo, prev, "seed {seed}: ranges not contiguous {ranges:?}");
            assert!(hi > lo, "seed {seed}: empty range");
            prev = *hi;
        }
        let status = e.stream_status("v").unwrap();
        assert_eq!(status.controller.watermark, prev, "seed {seed}");
        assert_eq!(status.pending_count, 0, "seed {seed}");
        assert_eq!(status.controller.dispatched_tasks, ranges.len() as u64, "seed {seed}");

        let mut assigned = BTreeSet::new();
        for (lo, hi, id) in &ranges {
            let cursor = format!("check/{id}");
            e.open_cursor(&cursor, "v", 7, Some((*lo, *hi))).unwrap();
            let mut n = 0;
            loop {
                let b = e.read_batch(&cursor).unwrap();
                for d in b.docs {
                    n += 1;
                    assert!(assigned.insert(d.key.clone()), "seed {seed}: {} in two ranges", d.key);
                }
                if b.end {
                    break;
                }
            }
            assert!(n > 0, "seed {seed}: task {id} has no input");
        }
        let matching: BTreeSet<String> = e
            .store()
            .scan_all(&parse(r#"k = "x""#).unwrap())
            .unwrap()
            .into_iter()
            .collect();
        assert_eq!(assigned, matching, "seed {seed}: not every document assigned");
        for k in &self.acked {
            let d = e.store().get_document(k).unwrap();
            if d.tags["k"].as_str() == Some("x") {
                assert!(assigned.contains(k), "seed {seed}: acknowledged {k} unassigned");
            }
        }
    }
}

pub fn stream_dispatch_is_exactly_once_under_crashes() -> String {
    let mut crashes = 0;
    let mut tasks = 0;
    for seed in 0..TRIALS {
        let mut rng = XorShiftRng::seed_from_u64(seed);
        let mut t = Trial::new(&mut rng);
        for _ in 0..OPS {
            t.step(&mut rng);
        }
        t.drain();
        t.check(seed);
        crashes += t.crashes;
        tasks += t.e().stream_status("v").unwrap().controller.dispatched_tasks;
    }
    assert!(crashes > TRIALS as u32 / 4, "too few crashes exercised: {crashes}");
    format!("{TRIALS} trials, {crashes} crashes, {tasks} dispatched tasks")
}
