//! Kill-point replay suite on a five-task diamond plan:
//!
//! ```text
//!        ┌─ B (train ma, emits features) ─┐
//!   A ───┤                                ├── D ── E
//!        └─ C (train mb)  ────────────────┘
//! ```
//!
//! Each scenario kills an agent or the store at one point, restarts what
//! died and drives the plan to completion. The committed documents must be
//! identical to a fault-free run and each train task must leave exactly one
//! model version.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use forge_core::api::LocalBackend;
use forge_core::clock::ManualClock;
use forge_core::compute::{LayerKind, LayerSpec, NetworkSpec};
use forge_core::dataset::sample;
use forge_core::engine::{Engine, EngineOptions};
use forge_core::store::{Document, FaultPoint, Store, StoreOptions, TagValue};
use forge_core::tagquery::{parse, TagQuery};
use forge_core::workflow::agent::{run_agent, AgentConfig, CrashPlan, CrashPoint, HandlerRegistry};
use forge_core::workflow::{PlanSpec, PlanStatus, TaskKind, TaskSpec, TaskStatus};
use forge_core::Error;

const LEASE_MS: u64 = 5_000;
const MASTER_MS: u64 = 60_000;

fn spec() -> NetworkSpec {
    NetworkSpec::new(
        vec![2],
        vec![
            LayerSpec::dense("hidden", 6),
            LayerSpec::new("act", LayerKind::Tanh),
            LayerSpec::dense("out", 2),
        ],
    )
}

fn handlers() -> HandlerRegistry {
    let mut reg = HandlerRegistry::with_train();
    reg.register_user_fn("prep", |ctx| {
        let docs = ctx.read_input(5)?;
        let out: Vec<Document> = docs
            .iter()
            .map(|d| Document {
                key: String::new(),
                tags: Default::default(),
                ..d.clone()
            })
            .collect();
        // Two stagings so a crash can land between them.
        let (first, rest) = out.split_at(out.len() / 2);
        ctx.emit(first.to_vec())?;
        ctx.emit(rest.to_vec())?;
        Ok(())
    })
    .unwrap();
    reg.register_user_fn("merge", |ctx| {
        let docs = ctx.read_input(4)?;
        let mut sum = vec![0f32; 6];
        for d in &docs {
            for (s, v) in sum.iter_mut().zip(sample::features(d)?) {
                *s += v;
            }
        }
        let d = Document::inline("", sample::encode_features(&sum)).with_tag("count", docs.len() as i64);
        ctx.emit(vec![d])?;
        Ok(())
    })
    .unwrap();
    reg.register_user_fn("final", |ctx| {
        let docs = ctx.read_input(4)?;
        ctx.emit(vec![Document::inline("", vec![docs.len() as u8]).with_tag("ok", true)])?;
        Ok(())
    })
    .unwrap();
    reg
}

fn task(id: &str, kind: TaskKind, input: &str, model: &str, output: &str, deps: &[&str]) -> TaskSpec {
    let mut t = TaskSpec {
        input_dataset: input.into(),
        model_key: model.into(),
        output_dataset: output.into(),
        ..TaskSpec::new(id, kind)
    };
    for d in deps {
        t = t.after(*d);
    }
    t
}

fn plan() -> PlanSpec {
    let user = |n: &str| TaskKind::UserFn(n.into());
    let train = |id: &str, model: &str, out: &str| {
        task(id, TaskKind::Train, "a", model, out, &["A"])
            .with_param("epochs", 8i64)
            .with_param("batch_size", 4i64)
            .with_param("lr", 0.3)
            .with_param("emit_layer", "act")
    };
    PlanSpec {
        plan_id: "diamond".into(),
        tasks: vec![
            task("A", user("prep"), "points", "", "a", &[]),
            train("B", "ma", "b"),
            train("C", "mb", "c"),
            task("D", user("merge"), "b", "", "d", &["B", "C"]),
            task("E", user("final"), "d", "", "e", &["D"]),
        ],
    }
}

fn open(dir: &Path, clock: &ManualClock) -> Arc<Engine> {
    let store = Store::open(
        dir,
        StoreOptions {
            sync: false,
            clock: Arc::new(clock.clone()),
            ..StoreOptions::default()
        },
    )
    .expect("reopen");
    Arc::new(Engine::new(Arc::new(store), EngineOptions::default()))
}

#[derive(Debug, Clone, Copy)]
enum Kill {
    /// An agent dies at this point of its `nth` matching checkpoint.
    Agent(CrashPoint, u32),
    /// The store dies on the `skip+1`-th append of the `round`-th master step.
    Master { round: u32, point: FaultPoint, skip: u32 },
    /// The store dies on the `skip+1`-th matching event while the agent
    /// runs its `round`-th task.
    AgentStore { round: u32, point: FaultPoint, skip: u32 },
    /// The master goes silent after `round` steps; a second master takes
    /// over once its lease lapses.
    MasterTakeover { round: u32 },
    /// Compaction dies before or after its manifest swap.
    Compact { round: u32, point: FaultPoint },
}

struct Cluster {
    dir: tempfile::TempDir,
    clock: ManualClock,
    engine: Arc<Engine>,
    store_crashes: u32,
}

impl Cluster {
    fn new() -> Cluster {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(1_000_000);
        let engine = open(dir.path(), &clock);
        let docs = (0..16)
            .map(|i| {
                let x = [(i % 4) as f32 - 1.5, (i / 4) as f32 - 1.5];
                Document::inline(format!("p{i:02}"), sample::encode_features(&x))
                    .with_label(usize::from(x[0] > 0.0).to_string())
                    .with_tag("dataset", "points")
            })
            .collect();
        engine.store().put_documents(docs).unwrap();
        for v in ["points", "a", "b", "c", "d", "e"] {
            engine
                .define_view(v, parse(&format!("dataset = \"{v}\"")).unwrap())
                .unwrap();
        }
        engine.register_model("ma", spec()).unwrap();
        engine.register_model("mb", spec()).unwrap();
        engine.submit_plan(plan()).unwrap();
        Cluster {
            dir,
            clock,
            engine,
            store_crashes: 0,
        }
    }

    fn restart_store(&mut self) {
        self.store_crashes += 1;
        self.engine = open(self.dir.path(), &self.clock);
    }

    fn done(&self) -> bool {
        self.engine.get_plan("diamond").unwrap().plan.status == PlanStatus::Completed
    }

    /// Drives the plan to completion, applying `kill` once.
    fn run(&mut self, kill: Option<Kill>) -> bool {
        let reg = handlers();
        let stop = AtomicBool::new(false);
        let crash = match kill {
            Some(Kill::Agent(p, n)) => Some(CrashPlan::new(p, n)),
            _ => None,
        };
        let mut master = "m1";
        let mut silent_since = None;
        let mut fired = false;
        for round in 0..200u32 {
            if self.done() {
                break;
            }
            // Master.
            if let Some(Kill::Master { round: r, point, skip }) = kill {
                if r == round {
                    self.engine.store().faults().arm(point, skip);
                }
            }
            let silenced = matches!(kill, Some(Kill::MasterTakeover { round: r }) if round >= r)
                && master == "m1";
            if silenced {
                let since = *silent_since.get_or_insert(round);
                if since == round {
                    fired = true;
                }
                match self.engine.master_step("m2", MASTER_MS, 256) {
                    Err(Error::NotMaster { .. }) => self.clock.advance(MASTER_MS / 4),
                    Ok(_) => master = "m2",
                    Err(e) => panic!("standby master: {e}"),
                }
            } else {
                match self.engine.master_step(master, MASTER_MS, 256) {
                    Ok(_) => {}
                    Err(Error::Crashed(_)) => {
                        fired = true;
                        self.restart_store();
                        continue;
                    }
                    Err(e) => panic!("master: {e}"),
                }
            }
            self.engine.store().faults().disarm();
            if let Some(Kill::Compact { round: r, point }) = kill {
                if r == round {
                    self.engine.store().faults().arm(point, 0);
                    assert!(matches!(self.engine.store().compact(), Err(Error::Crashed(_))));
                    fired = true;
                    self.restart_store();
                }
            }

            // One agent process runs one task.
            if let Some(Kill::AgentStore { round: r, point, skip }) = kill {
                if r == round {
                    self.engine.store().faults().arm(point, skip);
                }
            }
            let backend = LocalBackend::new(self.engine.clone());
            let mut cfg = AgentConfig::new(format!("agent{round}"));
            cfg.lease_ttl_ms = LEASE_MS;
            cfg.poll_interval = Duration::from_millis(1);
            cfg.max_tasks = Some(1);
            cfg.idle_timeout = Some(Duration::ZERO);
            match run_agent(&backend, &reg, &cfg, &stop, crash.as_ref()) {
                Ok(r) if r.crashed => {
                    fired = true;
                    // The dead agent's lease has to lapse before a retry.
                    self.clock.advance(LEASE_MS);
                }
                Ok(_) => {}
                Err(Error::Crashed(_)) => {
                    fired = true;
                    self.restart_store();
                    self.clock.advance(LEASE_MS);
                }
                Err(e) => panic!("agent: {e}"),
            }
            self.engine.store().faults().disarm();
            self.clock.advance(1);
        }
        fired
    }

    /// Every committed document except the seed inputs.
    fn outputs(&self) -> BTreeMap<String, Document> {
        let s = self.engine.store();
        s.scan_all(&TagQuery::match_all())
            .unwrap()
            .into_iter()
            .filter(|k| !k.starts_with('p'))
            .map(|k| {
                let d = s.get_document(&k).unwrap();
                (k, d)
            })
            .collect()
    }

    fn check_versions(&self, label: &str) {
        for (model, task) in [("ma", "B"), ("mb", "C")] {
            let vs = self.engine.list_versions(model).unwrap();
            assert_eq!(vs.len(), 1, "{label}: {model} has {} versions", vs.len());
            assert_eq!(vs[0].origin_task.as_deref(), Some(task), "{label}");
        }
    }
}

fn scenarios() -> Vec<(String, Kill)> {
    use CrashPoint::*;
    let mut out: Vec<(String, Kill)> = vec![
        (AfterLease, 1),
        (AfterInputRead, 0),
        (AfterFirstOutput, 0),
        (AfterFirstOutput, 1),
        (AfterSaveState, 0),
        (AfterAllOutputs, 1),
        (BeforeComplete, 2),
        (AfterComplete, 0),
        (AfterComplete, 3),
    ]
    .into_iter()
    .map(|(p, n)| (format!("agent {p:?} #{n}"), Kill::Agent(p, n)))
    .collect();
    let master = [
        (1, FaultPoint::BeforeAppend),
        (2, FaultPoint::TornAppend { keep_per_mille: 500 }),
        (3, FaultPoint::AfterAppend),
    ];
    for (round, point) in master {
        out.push((
            format!("master step {round} {}", point.name()),
            Kill::Master { round, point, skip: 0 },
        ));
    }
    let agent_store = [
        (0, FaultPoint::AfterAppend, 3),
        (1, FaultPoint::TornAppend { keep_per_mille: 300 }, 5),
        (1, FaultPoint::BlobChunk, 0),
        (2, FaultPoint::BeforeAppend, 8),
    ];
    for (round, point, skip) in agent_store {
        out.push((
            format!("store during task {round} {} +{skip}", point.name()),
            Kill::AgentStore { round, point, skip },
        ));
    }
    out.push(("master takeover after step 2".into(), Kill::MasterTakeover { round: 2 }));
    out.push((
        "compaction before manifest".into(),
        Kill::Compact { round: 2, point: FaultPoint::CompactBeforeManifest },
    ));
    out.push((
        "compaction after manifest".into(),
        Kill::Compact { round: 3, point: FaultPoint::CompactAfterManifest },
    ));
    out
}

pub fn diamond_plan_survives_every_kill_point() -> String {
    let started = Instant::now();
    let mut base = Cluster::new();
    base.run(None);
    assert!(base.done(), "fault-free run did not finish");
    base.check_versions("baseline");
    let expected = base.outputs();
    let keys: Vec<&String> = expected.keys().collect();
    assert_eq!(expected.len(), 16 + 16 + 16 + 1 + 1, "{keys:?}");

    let all = scenarios();
    let n = all.len();
    assert!(n >= 10);
    for (label, kill) in all {
        let mut c = Cluster::new();
        let fired = c.run(Some(kill));
        assert!(fired, "{label}: kill point never reached");
        assert!(c.done(), "{label}: plan did not complete");
        let rep = c.engine.get_plan("diamond").unwrap();
        assert!(
            rep.tasks.iter().all(|t| t.status == TaskStatus::Completed),
            "{label}: {:?}",
            rep.tasks.iter().map(|t| (&t.spec.task_id, t.status)).collect::<Vec<_>>()
        );
        let got = c.outputs();
        assert_eq!(
            got.keys().collect::<Vec<_>>(),
            expected.keys().collect::<Vec<_>>(),
            "{label}: committed key set differs"
        );
        assert_eq!(got, expected, "{label}: committed documents differ");
        c.check_versions(&label);
        assert_eq!(got["E/0"].tags["ok"], TagValue::Bool(true));
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    format!("{n} kill points, identical outputs, one version per train task, {elapsed:.1?}")
}
