//! Engine-level invariants: cursors, views, stream triggers, model
//! versions and events, training determinism, lease discipline and plan
//! liveness. Each property is checked against a small model kept by the
//! test itself.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use forge_core::api::{LocalBackend, Ops};
use forge_core::clock::Clock;
use forge_core::compute::{
    train_epochs, Batch, LayerKind, LayerSpec, LambdaRegistry, MemorySource, Mode, Network,
    NetworkSpec, NetworkState, Targets, Tensor,
};
use forge_core::engine::Engine;
use forge_core::modelstore::VersionSelector;
use forge_core::store::{Document, TagMap};
use forge_core::tagquery::parse;
use forge_core::testkit::open_engine;
use forge_core::workflow::agent::{run_agent, AgentConfig, HandlerRegistry};
use forge_core::workflow::{
    Outcome, PlanFile, PlanSpec, PlanStatus, TaskKind, TaskSpec, TaskStatus, TaskTemplate,
};
use forge_core::Error;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn user_fn(name: &str) -> TaskTemplate {
    TaskTemplate {
        kind: TaskKind::UserFn(name.into()),
        model_key: String::new(),
        output_dataset: String::new(),
        params: TagMap::new(),
    }
}

// ---- cursors and views --------------------------------------------------

#[derive(Debug, Clone)]
enum CursorOp {
    Append(Vec<bool>),
    Read,
}

fn cursor_ops() -> impl Strategy<Value = Vec<CursorOp>> {
    prop::collection::vec(
        prop_oneof![
            prop::collection::vec(any::<bool>(), 1..6).prop_map(CursorOp::Append),
            Just(CursorOp::Read),
        ],
        1..40,
    )
}

#[test]
fn cursor_reads_cover_every_match_exactly_once() {
    runner(200)
        .run(&(cursor_ops(), 1u32..6), |(ops, batch)| {
            let (e, _clock, _dir) = open_engine();
            e.define_view("v", parse(r#"k = "x""#).unwrap()).unwrap();
            e.open_cursor("c", "v", batch, None).unwrap();
            let mut next = 0u32;
            let mut seen = Vec::new();
            let mut append = |e: &Engine, matches: &[bool]| {
                let docs = matches
                    .iter()
                    .map(|&m| {
                        next += 1;
                        Document::inline(format!("d{next:05}"), vec![]).with_tag("k", if m { "x" } else { "y" })
                    })
                    .collect();
                e.store().put_documents(docs).unwrap();
            };
            for op in &ops {
                match op {
                    CursorOp::Append(m) => append(&e, m),
                    CursorOp::Read => {
                        let b = e.read_batch("c").unwrap();
                        prop_assert!(b.docs.len() <= batch as usize);
                        seen.extend(b.docs.into_iter().map(|d| d.key));
                    }
                }
            }
            loop {
                let b = e.read_batch("c").unwrap();
                seen.extend(b.docs.into_iter().map(|d| d.key));
                if b.end {
                    break;
                }
            }
            // Keys grow monotonically, so late appends always sort after the
            // cursor and must show up in a later batch.
            let sorted = seen.windows(2).all(|w| w[0] < w[1]);
            prop_assert!(sorted, "duplicate or out of order: {:?}", seen);
            let all = e.store().scan_all(&parse(r#"k = "x""#).unwrap()).unwrap();
            prop_assert_eq!(seen, all);
            Ok(())
        })
        .unwrap();
}

#[test]
fn defining_views_costs_the_same_regardless_of_store_size() {
    let cost = |docs: usize| {
        let (e, _clock, _dir) = open_engine();
        let batch: Vec<Document> = (0..docs)
            .map(|i| Document::inline(format!("d{i:06}"), vec![7; 64]).with_tag("n", i as i64))
            .collect();
        if !batch.is_empty() {
            e.store().put_documents(batch).unwrap();
        }
        let before = e.store().stats();
        for i in 0..20 {
            e.define_view(&format!("v{i:02}"), parse(&format!("n >= {i}")).unwrap()).unwrap();
        }
        let after = e.store().stats();
        assert_eq!(after.documents, before.documents);
        assert_eq!(after.blob_bytes, before.blob_bytes);
        after.log_bytes - before.log_bytes
    };
    let empty = cost(0);
    let full = cost(5000);
    assert_eq!(empty, full, "view definitions must not touch documents");
    assert!(empty < 20 * 512, "views are small records, not copies: {empty} bytes");
}

// ---- stream triggers ----------------------------------------------------

#[derive(Debug, Clone)]
enum StreamOp {
    Append(bool),
    Advance(u64),
    Poll,
}

fn stream_ops() -> impl Strategy<Value = Vec<StreamOp>> {
    prop::collection::vec(
        prop_oneof![
            4 => any::<bool>().prop_map(StreamOp::Append),
            2 => (0u64..1500).prop_map(StreamOp::Advance),
            3 => Just(StreamOp::Poll),
        ],
        1..60,
    )
}

#[test]
fn stream_trigger_fires_on_count_or_age() {
    runner(300)
        .run(&(stream_ops(), 1u64..6, 100u64..2000), |(ops, threshold, max_age)| {
            let (e, clock, _dir) = open_engine();
            e.define_view("v", parse(r#"k = "x""#).unwrap()).unwrap();
            e.attach_stream("v", threshold, max_age, user_fn("f")).unwrap();
            // Write times of matching documents not yet dispatched.
            let mut pending: Vec<u64> = Vec::new();
            let mut fired = 0u64;
            for (i, op) in ops.iter().enumerate() {
                match op {
                    StreamOp::Append(m) => {
                        let d = Document::inline(format!("d{i:03}"), vec![])
                            .with_tag("k", if *m { "x" } else { "y" });
                        e.store().put_document(d).unwrap();
                        if *m {
                            pending.push(clock.now_ms());
                        }
                    }
                    StreamOp::Advance(ms) => clock.advance(*ms),
                    StreamOp::Poll => {
                        let now = clock.now_ms();
                        let want = !pending.is_empty()
                            && (pending.len() as u64 >= threshold || now - pending[0] >= max_age);
                        let got = e.poll_stream("v").unwrap();
                        prop_assert_eq!(got.is_some(), want, "pending {:?} at {}", pending, now);
                        if let Some(task) = got {
                            let (lo, hi) = task.spec.input_range.unwrap();
                            prop_assert!(lo < hi);
                            pending.clear();
                            fired += 1;
                        }
                    }
                }
                let st = e.stream_status("v").unwrap();
                prop_assert_eq!(st.pending_count, pending.len() as u64);
                prop_assert_eq!(st.oldest_pending_at, pending.first().copied());
                prop_assert_eq!(st.controller.dispatched_tasks, fired);
            }
            Ok(())
        })
        .unwrap();
}

// ---- model versions and events ------------------------------------------

fn small_spec(dropout: bool) -> NetworkSpec {
    let mut layers = vec![
        LayerSpec::dense("hidden", 6),
        LayerSpec::new("act", LayerKind::Tanh),
    ];
    if dropout {
        layers.push(LayerSpec::new("drop", LayerKind::Dropout { keep_prob: 0.8 }));
    }
    layers.push(LayerSpec::dense("out", 2));
    NetworkSpec::new(vec![3], layers)
}

fn same_state(a: &NetworkState<f32>, b: &NetworkState<f32>) -> bool {
    let (x, y) = (a.to_named(), b.to_named());
    a.seed == b.seed
        && a.step == b.step
        && x.len() == y.len()
        && x.iter().zip(&y).all(|((n0, t0), (n1, t1))| n0 == n1 && t0.bit_eq(t1))
}

fn perturbed(net: &Network, seed: u64, step: u64, noise: &[u32]) -> NetworkState<f32> {
    let mut s = net.init::<f32>(seed);
    s.step = step;
    let mut k = 0;
    for p in s.params.values_mut() {
        for v in p.weight.data_mut().iter_mut().chain(p.bias.data_mut()) {
            // Arbitrary finite bit patterns, including subnormals and -0.0.
            let bits = noise[k % noise.len()];
            let f = f32::from_bits(bits);
            *v = if f.is_finite() { f } else { -0.0 };
            k += 1;
        }
    }
    s
}

#[test]
fn saved_versions_reload_bit_exact_and_never_change() {
    let case = (
        prop::collection::vec((any::<u64>(), prop::collection::vec(any::<u32>(), 1..64)), 1..6),
        any::<bool>(),
    );
    runner(60)
        .run(&case, |(versions, dropout)| {
            let (e, clock, _dir) = open_engine();
            let b = LocalBackend::new(e.clone());
            let spec = small_spec(dropout);
            b.register_model("m", spec.clone()).unwrap();
            let net = Network::build(&spec, &LambdaRegistry::new()).unwrap();
            let mut saved = Vec::new();
            for (i, (seed, noise)) in versions.iter().enumerate() {
                let s = perturbed(&net, *seed, i as u64 + 1, noise);
                let mut metrics = TagMap::new();
                metrics.insert("i".into(), (i as i64).into());
                let v = b.save_state("m", &s, metrics, None).unwrap();
                prop_assert_eq!(v.parent_version.as_ref(), saved.last().map(|(v, _): &(forge_core::modelstore::ModelVersion, _)| &v.version_id));
                // Earlier versions are untouched by later saves.
                for (old, _) in &saved {
                    let again = b.get_version("m", VersionSelector::Id(old.version_id.clone())).unwrap();
                    prop_assert_eq!(&again, old);
                }
                saved.push((v, s));
                clock.advance(10);
            }
            let listed = b.list_versions("m").unwrap();
            prop_assert_eq!(listed.len(), saved.len());
            // A fresh backend has a cold cache, so this reads the blobs.
            let cold = LocalBackend::new(e.clone());
            for (v, s) in &saved {
                let (got_v, got) = cold.load_state("m", VersionSelector::Id(v.version_id.clone())).unwrap();
                prop_assert_eq!(&got_v, v);
                prop_assert!(same_state(&got, s));
            }
            let (latest, _) = cold.load_state("m", VersionSelector::Latest).unwrap();
            prop_assert_eq!(&latest, &saved.last().unwrap().0);
            Ok(())
        })
        .unwrap();
}

#[test]
fn event_log_only_grows() {
    let batch = prop::collection::vec((0u64..20, prop::sample::select(vec!["loss", "acc"]), -1e3f64..1e3), 1..5);
    runner(150)
        .run(&prop::collection::vec((batch, 0u64..50), 1..8), |batches| {
            let (e, clock, _dir) = open_engine();
            let b = LocalBackend::new(e);
            b.register_model("m", small_spec(false)).unwrap();
            let mut log: Vec<String> = Vec::new();
            for (events, dt) in batches {
                clock.advance(dt);
                let evs: Vec<(u64, String, f64)> =
                    events.iter().map(|(s, n, v)| (*s, n.to_string(), *v)).collect();
                b.record_events("m", evs.clone(), None).unwrap();
                let now: Vec<String> = b
                    .query_events("m", None, 0, u64::MAX)
                    .unwrap()
                    .iter()
                    .map(|e| serde_json::to_string(e).unwrap())
                    .collect();
                prop_assert_eq!(now.len(), log.len() + evs.len());
                let mut remaining: BTreeMap<&str, usize> = BTreeMap::new();
                for s in &now {
                    *remaining.entry(s).or_default() += 1;
                }
                for s in &log {
                    let n = remaining.get_mut(s.as_str());
                    prop_assert!(n.as_ref().is_some_and(|n| **n > 0), "event {} disappeared", s);
                    *n.unwrap() -= 1;
                }
                // The query is ordered by step.
                let all = b.query_events("m", None, 0, u64::MAX).unwrap();
                prop_assert!(all.windows(2).all(|w| w[0].step <= w[1].step));
                for (lo, hi, name) in [(0, 10, None), (5, 15, Some("loss"))] {
                    let sub = b.query_events("m", name, lo, hi).unwrap();
                    let want = all
                        .iter()
                        .filter(|e| e.step >= lo && e.step < hi && name.is_none_or(|n| n == e.name))
                        .count();
                    prop_assert_eq!(sub.len(), want);
                }
                log = now;
            }
            Ok(())
        })
        .unwrap();
}

// ---- training determinism -----------------------------------------------

fn batches(data: &[(f32, f32, f32)], rows: usize) -> Vec<Batch<f32>> {
    data.chunks(rows)
        .map(|c| {
            let inputs: Vec<Vec<f32>> = c.iter().map(|&(a, b, d)| vec![a, b, d]).collect();
            Batch {
                inputs: Tensor::from_rows(&inputs).unwrap(),
                targets: Targets::Classes(c.iter().map(|&(a, b, _)| usize::from(a + b > 0.0)).collect()),
            }
        })
        .collect()
}

#[test]
fn training_is_bitwise_reproducible_and_reloads_faithfully() {
    let case = (
        any::<u64>(),
        prop::collection::vec((-1f32..1.0, -1f32..1.0, -1f32..1.0), 4..40),
        1usize..8,
        1u32..4,
    );
    runner(60)
        .run(&case, |(seed, data, rows, epochs)| {
            let spec = small_spec(true);
            let net = Network::build(&spec, &LambdaRegistry::new()).unwrap();
            let train = |state: &mut NetworkState<f32>| {
                let mut src = MemorySource::new(batches(&data, rows));
                train_epochs(&net, state, &mut src, forge_core::compute::Loss::SoftmaxXent, 0.1, epochs).unwrap()
            };
            let mut a = net.init::<f32>(seed);
            let mut b = net.init::<f32>(seed);
            let la = train(&mut a);
            let lb = train(&mut b);
            prop_assert!(same_state(&a, &b));
            prop_assert!(la.iter().zip(&lb).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits()));

            let (e, _clock, _dir) = open_engine();
            let backend = LocalBackend::new(e.clone());
            backend.register_model("m", spec.clone()).unwrap();
            let v = backend.save_state("m", &a, TagMap::new(), None).unwrap();
            let (_, back) = LocalBackend::new(e)
                .load_state("m", VersionSelector::Id(v.version_id))
                .unwrap();
            prop_assert!(same_state(&back, &a));
            let probe = batches(&data, data.len()).remove(0).inputs;
            let (y0, _) = net.forward(&a, &probe, Mode::Eval).unwrap();
            let (y1, _) = net.forward(&back, &probe, Mode::Eval).unwrap();
            prop_assert!(y0.bit_eq(&y1));
            // Dropout in training mode depends on the step, so it is
            // reproduced too.
            let (t0, _) = net.forward(&a, &probe, Mode::Train).unwrap();
            let (t1, _) = net.forward(&back, &probe, Mode::Train).unwrap();
            prop_assert!(t0.bit_eq(&t1));
            Ok(())
        })
        .unwrap();
}

// ---- leases and completions ---------------------------------------------

#[derive(Debug, Clone)]
enum TaskOp {
    Lease { agent: usize, ttl: u64 },
    Heartbeat { agent: usize, ttl: u64 },
    Stage { agent: usize },
    Complete { agent: usize, ok: bool },
    Advance(u64),
    Master,
}

fn task_ops() -> impl Strategy<Value = Vec<TaskOp>> {
    let agent = 0usize..3;
    let ttl = 1000u64..3000;
    prop::collection::vec(
        prop_oneof![
            3 => (agent.clone(), ttl.clone()).prop_map(|(agent, ttl)| TaskOp::Lease { agent, ttl }),
            1 => (agent.clone(), ttl).prop_map(|(agent, ttl)| TaskOp::Heartbeat { agent, ttl }),
            1 => agent.clone().prop_map(|agent| TaskOp::Stage { agent }),
            3 => (agent, any::<bool>()).prop_map(|(agent, ok)| TaskOp::Complete { agent, ok }),
            2 => (0u64..2500).prop_map(TaskOp::Advance),
            1 => Just(TaskOp::Master),
        ],
        1..80,
    )
}

fn allowed(from: TaskStatus, to: TaskStatus) -> bool {
    use TaskStatus::*;
    from == to
        || matches!(
            (from, to),
            (Pending, Leased) | (Leased, Pending) | (Leased, Completed) | (Leased, Dead)
        )
}

const TASKS: [&str; 3] = ["t0", "t1", "t2"];

#[test]
fn leases_completions_and_notifications_stay_consistent() {
    runner(400)
        .run(&task_ops(), |ops| {
            let (e, clock, _dir) = open_engine();
            for id in TASKS {
                e.submit_task(TaskSpec::new(id, TaskKind::UserFn("f".into()))).unwrap();
            }
            // Latest lease handed out per task: (agent, attempt, expires_at).
            let mut lease: BTreeMap<String, (usize, u32, u64)> = BTreeMap::new();
            // What each agent believes it holds, most recent last.
            let mut held: Vec<Vec<(String, u32)>> = vec![Vec::new(); 3];
            let mut status: BTreeMap<String, TaskStatus> =
                TASKS.iter().map(|t| (t.to_string(), TaskStatus::Pending)).collect();
            let mut completes = Vec::new();
            let live = |lease: &BTreeMap<String, (usize, u32, u64)>, task: &str, agent: usize, attempt: u32, now: u64| {
                lease.get(task).is_some_and(|&(a, n, exp)| a == agent && n == attempt && exp > now)
            };
            for op in ops {
                let now = clock.now_ms();
                match op {
                    TaskOp::Lease { agent, ttl } => {
                        match e.lease_task(&format!("a{agent}"), ttl, &[]).unwrap() {
                            Some(t) => {
                                let id = t.id().to_owned();
                                // Never two unexpired leases on one task.
                                if let Some(&(_, _, exp)) = lease.get(&id) {
                                    prop_assert!(exp <= now, "{} re-leased before expiry", id);
                                }
                                let prev = lease.get(&id).map_or(0, |l| l.1);
                                prop_assert_eq!(t.attempts, prev + 1);
                                prop_assert_eq!(t.lease.as_ref().unwrap().expires_at, now + ttl);
                                lease.insert(id.clone(), (agent, t.attempts, now + ttl));
                                held[agent].push((id, t.attempts));
                            }
                            None => {
                                for t in e.list_tasks().unwrap() {
                                    prop_assert!(t.status != TaskStatus::Pending, "{} left pending", t.id());
                                }
                            }
                        }
                    }
                    TaskOp::Heartbeat { agent, ttl } => {
                        if let Some((id, n)) = held[agent].last().cloned() {
                            let want = live(&lease, &id, agent, n, now);
                            let r = e.heartbeat(&id, &format!("a{agent}"), n, ttl);
                            prop_assert_eq!(r.is_ok(), want, "{:?}", r);
                            if want {
                                lease.get_mut(&id).unwrap().2 = now + ttl;
                            } else {
                                prop_assert!(matches!(r, Err(Error::StaleLease(_))));
                            }
                        }
                    }
                    TaskOp::Stage { agent } => {
                        if let Some((id, n)) = held[agent].last().cloned() {
                            let want = live(&lease, &id, agent, n, now);
                            let r = e.stage_output(&id, &format!("a{agent}"), n, 0, Document::inline("x", vec![1]));
                            prop_assert_eq!(r.is_ok(), want);
                        }
                    }
                    TaskOp::Complete { agent, ok } => {
                        if let Some((id, n)) = held[agent].pop() {
                            let want = live(&lease, &id, agent, n, now);
                            let outcome = if ok {
                                Outcome::Ok
                            } else {
                                Outcome::Error { message: "boom".into() }
                            };
                            let r = e.complete_task(&id, &format!("a{agent}"), n, outcome.clone());
                            prop_assert_eq!(r.is_ok(), want, "{:?}", r);
                            if let Ok(msg) = r {
                                prop_assert_eq!(&msg.outcome, &outcome);
                                prop_assert_eq!(msg.seq, completes.len() as u64);
                                lease.get_mut(&id).unwrap().2 = 0;
                                completes.push(msg);
                            }
                        }
                    }
                    TaskOp::Advance(ms) => clock.advance(ms),
                    TaskOp::Master => {
                        e.master_step("m", 5000, 1000).unwrap();
                    }
                }
                for t in e.list_tasks().unwrap() {
                    let before = status[t.id()];
                    prop_assert!(allowed(before, t.status), "{}: {:?} -> {:?}", t.id(), before, t.status);
                    prop_assert!(t.attempts <= t.max_attempts);
                    prop_assert_eq!(t.lease.is_some(), t.status == TaskStatus::Leased);
                    status.insert(t.id().to_owned(), t.status);
                }
            }
            let notes = e.read_notifications(0, 10_000).unwrap();
            prop_assert_eq!(&notes, &completes);
            e.master_step("m", 5000, 10_000).unwrap();
            let st = e.master_state().unwrap();
            prop_assert_eq!(st.offset, completes.len() as u64);
            let completed = e
                .list_tasks()
                .unwrap()
                .iter()
                .filter(|t| t.status == TaskStatus::Completed)
                .count() as u64;
            let ok = completes.iter().filter(|m| m.outcome == Outcome::Ok).count() as u64;
            prop_assert_eq!(st.applied_ok, completed);
            prop_assert_eq!(ok, completed);
            // Outputs are visible exactly for completed tasks.
            for t in e.list_tasks().unwrap() {
                let visible = e.store().contains_document(&format!("{}/0", t.id()));
                if t.status != TaskStatus::Completed {
                    prop_assert!(!visible);
                }
            }
            Ok(())
        })
        .unwrap();
}

// ---- plan liveness ------------------------------------------------------

fn dag() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<bool>)> {
    (1usize..=10).prop_flat_map(|n| {
        let deps: Vec<_> = (0..n)
            .map(|i| {
                if i == 0 {
                    Just(Vec::new()).boxed()
                } else {
                    prop::collection::btree_set(0..i, 0..=i.min(3))
                        .prop_map(|s| s.into_iter().collect())
                        .boxed()
                }
            })
            .collect();
        (deps, prop::collection::vec(prop::bool::weighted(0.15), n))
    })
}

struct Cluster {
    engine: Arc<Engine>,
    backend: LocalBackend,
    handlers: HandlerRegistry,
}

impl Cluster {
    fn round(&self) {
        let mut cfg = AgentConfig::new("agent");
        cfg.idle_timeout = Some(Duration::ZERO);
        cfg.poll_interval = Duration::ZERO;
        run_agent(&self.backend, &self.handlers, &cfg, &AtomicBool::new(false), None).unwrap();
        self.engine.master_step("m", 5000, 1000).unwrap();
    }

    fn settle(&self, plan: &str) -> PlanStatus {
        for _ in 0..50 {
            self.round();
            let st = self.engine.get_plan(plan).unwrap().plan.status;
            if st != PlanStatus::Running {
                return st;
            }
        }
        PlanStatus::Running
    }
}

#[test]
fn random_plans_always_terminate() {
    runner(120)
        .run(&dag(), |(deps, bad)| {
            let (engine, _clock, _dir) = open_engine();
            let healed = Arc::new(AtomicBool::new(false));
            let violations = Arc::new(Mutex::new(Vec::new()));
            let bad_ids: BTreeSet<String> = (0..deps.len()).filter(|&i| bad[i]).map(|i| format!("n{i}")).collect();
            let mut handlers = HandlerRegistry::new();
            {
                let (healed, violations, bad_ids) = (healed.clone(), violations.clone(), bad_ids.clone());
                handlers
                    .register_user_fn("step", move |ctx| {
                        // A task only runs once all of its predecessors are done.
                        for d in &ctx.task.spec.depends_on {
                            let st = ctx.backend.get_task(d)?.status;
                            if st != TaskStatus::Completed {
                                violations.lock().unwrap().push(format!("{} ran before {d} ({st:?})", ctx.task.id()));
                            }
                        }
                        ctx.emit(vec![Document::inline("", vec![1])])?;
                        if bad_ids.contains(ctx.task.id()) && !healed.load(Ordering::SeqCst) {
                            return Err(Error::Handler("injected failure".into()));
                        }
                        Ok(())
                    })
                    .unwrap();
            }
            let tasks = deps
                .iter()
                .enumerate()
                .map(|(i, ds)| TaskSpec {
                    depends_on: ds.iter().map(|d| format!("n{d}")).collect(),
                    ..TaskSpec::new(format!("n{i}"), TaskKind::UserFn("step".into()))
                })
                .collect();
            engine.submit_plan(PlanSpec { plan_id: "p".into(), tasks }).unwrap();
            let c = Cluster {
                backend: LocalBackend::new(engine.clone()),
                engine,
                handlers,
            };
            let st = c.settle("p");
            prop_assert_eq!(st, if bad_ids.is_empty() { PlanStatus::Completed } else { PlanStatus::Failed });
            let report = c.engine.get_plan("p").unwrap();
            for t in &report.tasks {
                prop_assert!(t.status.is_terminal(), "{} is {:?}", t.id(), t.status);
                if t.status == TaskStatus::Dead {
                    prop_assert!(bad_ids.contains(t.id()));
                    prop_assert_eq!(t.attempts, t.max_attempts);
                }
            }
            if st == PlanStatus::Failed {
                healed.store(true, Ordering::SeqCst);
                let dead: Vec<String> = report
                    .tasks
                    .iter()
                    .filter(|t| t.status == TaskStatus::Dead)
                    .map(|t| t.id().to_owned())
                    .collect();
                prop_assert!(!dead.is_empty());
                for id in &dead {
                    let t = c.engine.replay_task(id).unwrap();
                    prop_assert_eq!(t.status, TaskStatus::Pending);
                    prop_assert_eq!(t.attempts, 0);
                }
                // Everything cancelled earlier gets another chance too.
                prop_assert_eq!(c.settle("p"), PlanStatus::Completed);
            }
            for t in c.engine.get_plan("p").unwrap().tasks {
                prop_assert_eq!(t.status, TaskStatus::Completed);
                prop_assert_eq!(&t.outputs, &vec![format!("{}/0", t.id())]);
            }
            let v = violations.lock().unwrap();
            prop_assert!(v.is_empty(), "{:?}", *v);
            Ok(())
        })
        .unwrap();
}

// ---- plan files ---------------------------------------------------------

fn plan_error(text: &str) -> (usize, String) {
    match PlanFile::parse(text) {
        Err(Error::InvalidPlan { line, field, .. }) => (line, field),
        other => panic!("expected InvalidPlan, got {other:?}"),
    }
}

#[test]
fn plan_file_errors_name_line_and_field() {
    let ok = r#"{
  "plan_id": "p",
  "views": {"pts": "dataset = \"points\""},
  "tasks": [
    {"task_id": "a", "kind": "user_fn:prep"},
    {"task_id": "b", "kind": "train", "input_dataset": "pts", "model": "m", "depends_on": ["a"]}
  ]
}"#;
    let f = PlanFile::parse(ok).unwrap();
    assert_eq!(f.to_spec().unwrap().tasks[1].depends_on, vec!["a".to_string()]);

    let missing_kind = "{\n  \"plan_id\": \"p\",\n  \"tasks\": [\n    {\"task_id\": \"a\"}\n  ]\n}";
    assert_eq!(plan_error(missing_kind), (4, "kind".into()));

    let unknown_field = "{\n  \"plan_id\": \"p\",\n  \"tasks\": [{\"task_id\": \"a\", \"kind\": \"train\",\n \"colour\": 1}]\n}";
    assert_eq!(plan_error(unknown_field), (4, "colour".into()));

    let bad_kind = "{\n \"plan_id\": \"p\",\n \"tasks\": [\n  {\"task_id\": \"a\", \"kind\": \"user_fn:x\"},\n  {\"task_id\": \"b\", \"kind\": \"walk\"}\n ]\n}";
    assert_eq!(plan_error(bad_kind), (5, "tasks[1].kind".into()));

    let no_model = "{\"plan_id\": \"p\", \"tasks\": [\n{\"task_id\": \"a\", \"kind\": \"train\", \"input_dataset\": \"v\"}]}";
    assert_eq!(plan_error(no_model), (2, "tasks[0].model".into()));

    let dangling = "{\"plan_id\": \"p\", \"tasks\": [\n{\"task_id\": \"a\", \"kind\": \"user_fn:x\", \"depends_on\": [\"z\"]}]}";
    assert_eq!(plan_error(dangling), (2, "tasks[0].depends_on[0]".into()));

    let dup = "{\"plan_id\": \"p\", \"tasks\": [\n{\"task_id\": \"a\", \"kind\": \"user_fn:x\"},\n{\"task_id\": \"a\", \"kind\": \"user_fn:x\"}]}";
    assert_eq!(plan_error(dup), (3, "tasks[1].task_id".into()));

    let bad_view = r#"{"plan_id": "p", "views": {"v": "x ="}, "tasks": [{"task_id": "a", "kind": "user_fn:x"}]}"#;
    assert_eq!(plan_error(bad_view).1, "views.v");

    let empty = r#"{"plan_id": "p", "tasks": []}"#;
    assert_eq!(plan_error(empty).1, "tasks");

    let cyclic = r#"{"plan_id": "p", "tasks": [
        {"task_id": "a", "kind": "user_fn:x", "depends_on": ["b"]},
        {"task_id": "b", "kind": "user_fn:x", "depends_on": ["a"]}]}"#;
    assert!(matches!(PlanFile::parse(cyclic), Err(Error::CycleDetected(_))));
}
