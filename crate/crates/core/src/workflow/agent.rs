//! The agent loop: lease, heartbeat, run the handler, complete.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::api::{Backend, Ops};
use crate::compute::LambdaRegistry;
use crate::dataset::sample;
use crate::error::{Error, Result};
use crate::store::{Document, TagValue};
use crate::workflow::{Outcome, Task, TaskKind, DEFAULT_LEASE_MS};

/// Places where a test can make an agent die as if its process were
/// killed: it stops heartbeating and never completes the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CrashPoint {
    AfterLease,
    AfterInputRead,
    AfterFirstOutput,
    AfterAllOutputs,
    AfterSaveState,
    BeforeComplete,
    AfterComplete,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 7] = [
        CrashPoint::AfterLease,
        CrashPoint::AfterInputRead,
        CrashPoint::AfterFirstOutput,
        CrashPoint::AfterAllOutputs,
        CrashPoint::AfterSaveState,
        CrashPoint::BeforeComplete,
        CrashPoint::AfterComplete,
    ];
}

/// Fires once at the `nth` (0-based) time `point` is reached.
#[derive(Debug)]
pub struct CrashPlan {
    pub point: CrashPoint,
    pub nth: u32,
    seen: AtomicU32,
    fired: AtomicBool,
}

impl CrashPlan {
    pub fn new(point: CrashPoint, nth: u32) -> Self {
        CrashPlan {
            point,
            nth,
            seen: AtomicU32::new(0),
            fired: AtomicBool::new(false),
        }
    }

    pub fn fired(&self) -> bool {
        self.fired.load(Ordering::SeqCst)
    }

    fn hit(&self, at: CrashPoint) -> bool {
        if at != self.point || self.fired() {
            return false;
        }
        if self.seen.fetch_add(1, Ordering::SeqCst) == self.nth {
            self.fired.store(true, Ordering::SeqCst);
            return true;
        }
        false
    }
}

pub type Handler = Arc<dyn Fn(&mut TaskContext<'_>) -> Result<()> + Send + Sync>;

/// Maps task kinds to handlers.
#[derive(Clone, Default)]
pub struct HandlerRegistry {
    handlers: BTreeMap<String, Handler>,
    lambdas: Arc<LambdaRegistry>,
}

impl std::fmt::Debug for HandlerRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.handlers.keys()).finish()
    }
}

impl HandlerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the built-in `train` handler.
    pub fn with_train() -> Self {
        let mut r = Self::new();
        r.handlers
            .insert(TaskKind::Train.to_string(), Arc::new(super::handlers::train));
        r
    }

    pub fn with_lambdas(mut self, lambdas: Arc<LambdaRegistry>) -> Self {
        self.lambdas = lambdas;
        self
    }

    pub fn register_user_fn(
        &mut self,
        name: &str,
        f: impl Fn(&mut TaskContext<'_>) -> Result<()> + Send + Sync + 'static,
    ) -> Result<()> {
        let kind = TaskKind::UserFn(name.to_owned()).to_string();
        if self.handlers.contains_key(&kind) {
            return Err(Error::DuplicateName(kind));
        }
        self.handlers.insert(kind, Arc::new(f));
        Ok(())
    }

    /// Kind strings accepted, as used by the lease filter.
    pub fn kinds(&self) -> Vec<String> {
        self.handlers.keys().cloned().collect()
    }

    pub fn get(&self, kind: &TaskKind) -> Option<Handler> {
        self.handlers.get(&kind.to_string()).cloned()
    }

    pub fn lambdas(&self) -> &LambdaRegistry {
        &self.lambdas
    }
}

/// A handler's view of the task it runs.
pub struct TaskContext<'a> {
    pub backend: &'a dyn Backend,
    pub task: &'a Task,
    pub agent_id: &'a str,
    pub lambdas: &'a LambdaRegistry,
    attempt: u32,
    next_output: u32,
    crash: Option<&'a CrashPlan>,
    crashed: bool,
}

impl<'a> TaskContext<'a> {
    pub fn attempt(&self) -> u32 {
        self.attempt
    }

    /// Fails with `Crashed` if the agent's crash plan fires here.
    pub fn checkpoint(&mut self, at: CrashPoint) -> Result<()> {
        if self.crash.is_some_and(|c| c.hit(at)) {
            self.crashed = true;
            return Err(Error::Crashed(format!("agent {} at {at:?}", self.agent_id)));
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&TagValue> {
        self.task.spec.params.get(name)
    }

    pub fn param_f64(&self, name: &str, default: f64) -> Result<f64> {
        match self.param(name) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::InvalidArgument(format!("param `{name}` must be numeric"))),
        }
    }

    pub fn param_u64(&self, name: &str, default: u64) -> Result<u64> {
        match self.param(name) {
            None => Ok(default),
            Some(v) => v
                .as_i64()
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| Error::InvalidArgument(format!("param `{name}` must be a non-negative int"))),
        }
    }

    pub fn param_str(&self, name: &str) -> Result<Option<&str>> {
        match self.param(name) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(Some)
                .ok_or_else(|| Error::InvalidArgument(format!("param `{name}` must be a string"))),
        }
    }

    /// Every document of the input view (restricted to the task's input
    /// range), with blob payloads fetched, in key order.
    pub fn read_input(&mut self, batch_size: u32) -> Result<Vec<Document>> {
        let spec = &self.task.spec;
        if spec.input_dataset.is_empty() {
            return Ok(Vec::new());
        }
        let cursor = format!("task/{}/{}", spec.task_id, self.attempt);
        self.backend
            .open_cursor(&cursor, &spec.input_dataset, batch_size.max(1), spec.input_range)?;
        self.backend.reset_cursor(&cursor)?;
        let mut out = Vec::new();
        loop {
            let b = self.backend.read_batch_resolved(&cursor)?;
            out.extend(b.docs);
            if b.end {
                break;
            }
        }
        self.checkpoint(CrashPoint::AfterInputRead)?;
        Ok(out)
    }

    /// Stages outputs for this attempt. Keys are assigned as
    /// `<task_id>/<n>`; documents get a `dataset` tag naming the task's
    /// output dataset unless they already carry one.
    pub fn emit(&mut self, docs: Vec<Document>) -> Result<Vec<String>> {
        if docs.is_empty() {
            return Ok(Vec::new());
        }
        let out_ds = &self.task.spec.output_dataset;
        let first = self.next_output == 0;
        let numbered: Vec<(u32, Document)> = docs
            .into_iter()
            .map(|mut d| {
                if !out_ds.is_empty() && !d.tags.contains_key("dataset") {
                    d.tags.insert("dataset".into(), TagValue::Str(out_ds.clone()));
                }
                let n = self.next_output;
                self.next_output += 1;
                (n, d)
            })
            .collect();
        let keys = self
            .backend
            .stage_outputs(&self.task.spec.task_id, self.agent_id, self.attempt, numbered)?;
        if first {
            self.checkpoint(CrashPoint::AfterFirstOutput)?;
        }
        Ok(keys)
    }

    /// Emits `values` as one feature document.
    pub fn emit_features(&mut self, values: &[f32], label: Option<&str>) -> Result<String> {
        let mut d = Document::inline("", sample::encode_features(values));
        d.label = label.map(str::to_owned);
        self.emit(vec![d]).map(|mut k| k.remove(0))
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub agent_id: String,
    /// Kinds to lease; all registered kinds if `None`.
    pub kinds: Option<Vec<String>>,
    pub lease_ttl_ms: u64,
    pub poll_interval: Duration,
    /// Stop after this many finished tasks.
    pub max_tasks: Option<usize>,
    /// Stop after this long without finding work.
    pub idle_timeout: Option<Duration>,
}

impl AgentConfig {
    pub fn new(agent_id: impl Into<String>) -> Self {
        AgentConfig {
            agent_id: agent_id.into(),
            kinds: None,
            lease_ttl_ms: DEFAULT_LEASE_MS,
            poll_interval: Duration::from_millis(50),
            max_tasks: None,
            idle_timeout: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AgentReport {
    pub completed: u64,
    pub failed: u64,
    /// Completions rejected because the lease had moved on.
    pub stale: u64,
    /// Transport or store errors the loop recovered from.
    pub transient_errors: u64,
    /// The crash plan fired and the agent died.
    pub crashed: bool,
}

/// Runs the agent loop until `stop` is set, a limit in `cfg` is reached or
/// the crash plan fires. Handler failures become error outcomes; transport
/// errors are retried after `poll_interval`.
pub fn run_agent(
    backend: &dyn Backend,
    handlers: &HandlerRegistry,
    cfg: &AgentConfig,
    stop: &AtomicBool,
    crash: Option<&CrashPlan>,
) -> Result<AgentReport> {
    let kinds = cfg.kinds.clone().unwrap_or_else(|| handlers.kinds());
    let mut report = AgentReport::default();
    let mut idle_since = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        if cfg.max_tasks.is_some_and(|m| (report.completed + report.failed) as usize >= m) {
            break;
        }
        let task = match backend.lease_task(&cfg.agent_id, cfg.lease_ttl_ms, &kinds) {
            Ok(Some(t)) => t,
            Ok(None) => {
                if cfg.idle_timeout.is_some_and(|d| idle_since.elapsed() >= d) {
                    break;
                }
                std::thread::sleep(cfg.poll_interval);
                continue;
            }
            Err(e) if fatal(&e) => return Err(e),
            Err(_) => {
                report.transient_errors += 1;
                if cfg.idle_timeout.is_some_and(|d| idle_since.elapsed() >= d) {
                    break;
                }
                std::thread::sleep(cfg.poll_interval);
                continue;
            }
        };
        match run_one(backend, handlers, cfg, &task, crash) {
            Ok(Finish::Done(ok)) => {
                if ok {
                    report.completed += 1;
                } else {
                    report.failed += 1;
                }
            }
            Ok(Finish::Stale) => report.stale += 1,
            Ok(Finish::Crashed) => {
                report.crashed = true;
                return Ok(report);
            }
            Err(e) if fatal(&e) => return Err(e),
            Err(_) => report.transient_errors += 1,
        }
        idle_since = Instant::now();
    }
    Ok(report)
}

/// Errors no retry can fix: a bad request, or a store that has died under
/// an in-process backend.
fn fatal(e: &Error) -> bool {
    matches!(e, Error::InvalidArgument(_) | Error::Protocol(_) | Error::Crashed(_))
}

enum Finish {
    Done(bool),
    Stale,
    Crashed,
}

fn run_one(
    backend: &dyn Backend,
    handlers: &HandlerRegistry,
    cfg: &AgentConfig,
    task: &Task,
    crash: Option<&CrashPlan>,
) -> Result<Finish> {
    let attempt = task.lease.as_ref().map(|l| l.attempt).unwrap_or(task.attempts);
    let mut ctx = TaskContext {
        backend,
        task,
        agent_id: &cfg.agent_id,
        lambdas: handlers.lambdas(),
        attempt,
        next_output: 0,
        crash,
        crashed: false,
    };
    if ctx.checkpoint(CrashPoint::AfterLease).is_err() {
        return Ok(Finish::Crashed);
    }
    let (done_tx, done_rx) = mpsc::channel::<()>();
    let interval = Duration::from_millis((cfg.lease_ttl_ms / 3).max(1));
    let agent_id = cfg.agent_id.as_str();
    let ttl = cfg.lease_ttl_ms;
    let result = std::thread::scope(|s| {
        s.spawn(move || loop {
            match done_rx.recv_timeout(interval) {
                Err(RecvTimeoutError::Timeout) => {
                    if let Err(Error::StaleLease(_)) =
                        backend.heartbeat(task.id(), agent_id, attempt, ttl)
                    {
                        return;
                    }
                }
                _ => return,
            }
        });
        let r = match handlers.get(&task.spec.kind) {
            Some(h) => h(&mut ctx),
            None => Err(Error::Handler(format!("no handler for `{}`", task.spec.kind))),
        };
        drop(done_tx);
        r
    });
    if ctx.crashed {
        return Ok(Finish::Crashed);
    }
    let outcome = match &result {
        Ok(()) => Outcome::Ok,
        Err(e) => Outcome::Error {
            message: e.to_string(),
        },
    };
    if ctx.checkpoint(CrashPoint::BeforeComplete).is_err() {
        return Ok(Finish::Crashed);
    }
    match backend.complete_task(task.id(), &cfg.agent_id, attempt, outcome) {
        Ok(_) => {}
        Err(Error::StaleLease(_)) => return Ok(Finish::Stale),
        Err(e) => return Err(e),
    }
    if ctx.checkpoint(CrashPoint::AfterComplete).is_err() {
        return Ok(Finish::Crashed);
    }
    Ok(Finish::Done(result.is_ok()))
}
