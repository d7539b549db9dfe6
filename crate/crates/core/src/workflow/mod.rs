//! Task queue, leases, completion notifications and DAG plans.
//!
//! System keys:
//!
//! ```text
//! __sys/task/<id>                        Task
//! __sys/ready/<submitted_at:016x>/<id>   dispatchable Pending task -> kind
//! __sys/active/<id>                      Leased task
//! __sys/note/<n:020>                     CompletionMessage n
//! __sys/plan/<id>                        Plan
//! __sys/master                           MasterState (lease + offset)
//! ```
//!
//! Task outputs are staged under `<task_id>/<n>` in a commit group named by
//! the task id. A new lease clears the group; a successful completion
//! commits it in the same record that marks the task Completed.

pub mod agent;
pub mod handlers;
pub mod plan;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::view_exists;
use crate::engine::{part, Engine};
use crate::error::{Error, Result};
use crate::modelstore::model_exists;
use crate::store::{document, Document, TagMap, Txn, SYS_PREFIX};

pub use plan::{MasterActions, MasterState, Plan, PlanFile, PlanFileTask, PlanReport, PlanSpec, PlanStatus};

pub const MIN_LEASE_MS: u64 = 1000;
pub const DEFAULT_LEASE_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Train,
    UserFn(String),
}

impl TaskKind {
    /// Train tasks must name an existing view and model; user functions
    /// may leave either empty.
    pub(crate) fn needs_refs(&self) -> bool {
        matches!(self, TaskKind::Train)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Train => f.write_str("train"),
            TaskKind::UserFn(n) => write!(f, "user_fn:{n}"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(TaskKind::Train),
            _ => match s.strip_prefix("user_fn:") {
                Some(n) if !n.is_empty() => Ok(TaskKind::UserFn(n.to_owned())),
                _ => Err(Error::InvalidArgument(format!(
                    "task kind `{s}` is neither `train` nor `user_fn:<name>`"
                ))),
            },
        }
    }
}

impl Serialize for TaskKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What a stream controller submits when it fires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub kind: TaskKind,
    #[serde(default)]
    pub model_key: String,
    #[serde(default)]
    pub output_dataset: String,
    #[serde(default)]
    pub params: TagMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub input_dataset: String,
    #[serde(default, alias = "model")]
    pub model_key: String,
    #[serde(default)]
    pub output_dataset: String,
    #[serde(default)]
    pub params: TagMap,
    /// Restricts the input view to documents with `lo < seq <= hi`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_range: Option<(u64, u64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub depends_on: Vec<String>,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, kind: TaskKind) -> Self {
        TaskSpec {
            task_id: task_id.into(),
            kind,
            input_dataset: String::new(),
            model_key: String::new(),
            output_dataset: String::new(),
            params: TagMap::new(),
            input_range: None,
            depends_on: Vec::new(),
        }
    }

    pub fn train(
        task_id: impl Into<String>,
        input: impl Into<String>,
        model: impl Into<String>,
        output: impl Into<String>,
    ) -> Self {
        TaskSpec {
            input_dataset: input.into(),
            model_key: model.into(),
            output_dataset: output.into(),
            ..TaskSpec::new(task_id, TaskKind::Train)
        }
    }

    pub fn with_param(mut self, name: &str, value: impl Into<crate::store::TagValue>) -> Self {
        self.params.insert(name.to_owned(), value.into());
        self
    }

    pub fn after(mut self, dep: impl Into<String>) -> Self {
        self.depends_on.push(dep.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskStatus {
    Pending,
    Leased,
    Completed,
    /// Cancelled because its plan failed.
    Failed,
    Dead,
}

impl TaskStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Completed | TaskStatus::Failed | TaskStatus::Dead)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub agent_id: String,
    pub expires_at: u64,
    /// Attempt number this lease belongs to; guards against stale holders.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    #[serde(flatten)]
    pub spec: TaskSpec,
    pub plan_id: Option<String>,
    pub status: TaskStatus,
    pub attempts: u32,
    pub max_attempts: u32,
    pub lease: Option<Lease>,
    /// Waiting for plan predecessors.
    pub blocked: bool,
    pub submitted_at: u64,
    pub finished_at: Option<u64>,
    pub last_error: Option<String>,
    pub outputs: Vec<String>,
}

impl Task {
    pub fn id(&self) -> &str {
        &self.spec.task_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionMessage {
    /// Position in the notification log.
    pub seq: u64,
    pub task_id: String,
    pub agent_id: String,
    pub outcome: Outcome,
    pub outputs: Vec<String>,
    pub at: u64,
    /// Task status after this completion.
    pub status: TaskStatus,
    pub plan_id: Option<String>,
}

pub(crate) fn task_key(id: &str) -> String {
    format!("{SYS_PREFIX}task/{}", part(id))
}

pub(crate) fn ready_key(submitted_at: u64, id: &str) -> String {
    format!("{SYS_PREFIX}ready/{submitted_at:016x}/{}", part(id))
}

pub(crate) const READY_PREFIX: &str = "__sys/ready/";
pub(crate) const ACTIVE_PREFIX: &str = "__sys/active/";
pub(crate) const TASK_PREFIX: &str = "__sys/task/";
pub(crate) const NOTE_PREFIX: &str = "__sys/note/";
const NOTE_NEXT: &str = "__sys/note-next";

fn active_key(id: &str) -> String {
    format!("{ACTIVE_PREFIX}{}", part(id))
}

fn note_key(n: u64) -> String {
    format!("{NOTE_PREFIX}{n:020}")
}

pub(crate) fn load_task(t: &Txn<'_>, id: &str) -> Result<Task> {
    t.sys_get_json(&task_key(id))?
        .ok_or_else(|| Error::TaskNotFound(id.to_owned()))
}

pub(crate) fn save_task(t: &mut Txn<'_>, task: &Task) -> Result<()> {
    t.sys_put_json(&task_key(task.id()), task)
}

/// Puts a Pending, unblocked task on the ready queue.
pub(crate) fn make_ready(t: &mut Txn<'_>, task: &mut Task) -> Result<()> {
    task.status = TaskStatus::Pending;
    task.blocked = false;
    task.lease = None;
    t.sys_put(
        &ready_key(task.submitted_at, task.id()),
        task.spec.kind.to_string().into_bytes(),
        Vec::new(),
    );
    save_task(t, task)
}

pub(crate) fn unready(t: &mut Txn<'_>, task: &Task) {
    t.sys_delete(&ready_key(task.submitted_at, task.id()));
}

pub(crate) fn check_refs(t: &Txn<'_>, required: bool, view: &str, model: &str) -> Result<()> {
    if (required || !model.is_empty()) && !model_exists(t, model) {
        return Err(Error::UnknownModel(model.to_owned()));
    }
    if (required || !view.is_empty()) && !view_exists(t, view) {
        return Err(Error::UnknownView(view.to_owned()));
    }
    Ok(())
}

fn validate_spec(spec: &TaskSpec) -> Result<()> {
    document::validate_key(&spec.task_id)
        .map_err(|e| Error::InvalidArgument(format!("task_id: {e}")))?;
    Ok(())
}

/// Inserts `spec` unless a task with its id exists (then returns that one).
pub(crate) fn submit_in(
    t: &mut Txn<'_>,
    spec: TaskSpec,
    plan_id: Option<&str>,
    blocked: bool,
    max_attempts: u32,
) -> Result<Task> {
    validate_spec(&spec)?;
    if let Some(existing) = t.sys_get_json::<Task>(&task_key(&spec.task_id))? {
        return Ok(existing);
    }
    check_refs(t, spec.kind.needs_refs(), &spec.input_dataset, &spec.model_key)?;
    let mut task = Task {
        spec,
        plan_id: plan_id.map(str::to_owned),
        status: TaskStatus::Pending,
        attempts: 0,
        max_attempts,
        lease: None,
        blocked,
        submitted_at: t.now_ms(),
        finished_at: None,
        last_error: None,
        outputs: Vec::new(),
    };
    if blocked {
        save_task(t, &task)?;
    } else {
        make_ready(t, &mut task)?;
    }
    Ok(task)
}

fn append_note(t: &mut Txn<'_>, task: &Task, agent_id: &str, outcome: Outcome) -> Result<CompletionMessage> {
    let n: u64 = t.sys_get_json(NOTE_NEXT)?.unwrap_or(0);
    let msg = CompletionMessage {
        seq: n,
        task_id: task.id().to_owned(),
        agent_id: agent_id.to_owned(),
        outcome,
        outputs: task.outputs.clone(),
        at: t.now_ms(),
        status: task.status,
        plan_id: task.plan_id.clone(),
    };
    t.sys_put_json(&note_key(n), &msg)?;
    t.sys_put_json(NOTE_NEXT, &(n + 1))?;
    Ok(msg)
}

/// Returns expired leases to the queue, or kills tasks out of attempts.
/// No notification is written here: the master notices dead tasks when it
/// re-evaluates their plan.
pub(crate) fn sweep_expired(t: &mut Txn<'_>, now: u64) -> Result<()> {
    for (key, _) in t.sys_range(ACTIVE_PREFIX) {
        let id = crate::engine::unpart(&key[ACTIVE_PREFIX.len()..])
            .ok_or_else(|| Error::Corrupt(format!("bad active key `{key}`")))?;
        let mut task = load_task(t, &id)?;
        let expired = task.lease.as_ref().is_none_or(|l| l.expires_at <= now);
        if !expired {
            continue;
        }
        t.sys_delete(&key);
        t.clear_group(&id);
        task.lease = None;
        if task.attempts >= task.max_attempts {
            task.status = TaskStatus::Dead;
            task.finished_at = Some(now);
            task.last_error = Some(format!("lease expired on attempt {}", task.attempts));
            save_task(t, &task)?;
        } else {
            make_ready(t, &mut task)?;
        }
    }
    Ok(())
}

/// Checks that `(agent_id, attempt)` holds the live lease on `task`.
fn check_lease(task: &Task, agent_id: &str, attempt: u32, now: u64) -> Result<()> {
    match &task.lease {
        Some(l)
            if task.status == TaskStatus::Leased
                && l.agent_id == agent_id
                && l.attempt == attempt
                && l.expires_at > now =>
        {
            Ok(())
        }
        _ => Err(Error::StaleLease(task.id().to_owned())),
    }
}

fn check_ttl(ttl_ms: u64) -> Result<()> {
    if ttl_ms < MIN_LEASE_MS {
        return Err(Error::InvalidArgument(format!(
            "lease ttl must be >= {MIN_LEASE_MS} ms"
        )));
    }
    Ok(())
}

impl Engine {
    pub fn submit_task(&self, spec: TaskSpec) -> Result<String> {
        if !spec.depends_on.is_empty() {
            return Err(Error::InvalidArgument(
                "depends_on is only valid inside a plan".into(),
            ));
        }
        let max = self.opts.max_attempts;
        self.store
            .transact(|t| submit_in(t, spec, None, false, max).map(|task| task.spec.task_id))
    }

    pub fn get_task(&self, id: &str) -> Result<Task> {
        self.store
            .sys_get_json(&task_key(id))?
            .ok_or_else(|| Error::TaskNotFound(id.to_owned()))
    }

    pub fn list_tasks(&self) -> Result<Vec<Task>> {
        let mut out: Vec<Task> = self
            .store
            .sys_range(TASK_PREFIX)
            .into_iter()
            .map(|(_, v)| serde_json::from_slice(&v))
            .collect::<std::result::Result<_, _>>()?;
        out.sort_by(|a, b| (a.submitted_at, a.id()).cmp(&(b.submitted_at, b.id())));
        Ok(out)
    }

    /// Claims the oldest dispatchable task whose kind is in `kinds` (any
    /// kind if empty).
    pub fn lease_task(&self, agent_id: &str, ttl_ms: u64, kinds: &[String]) -> Result<Option<Task>> {
        check_ttl(ttl_ms)?;
        if agent_id.is_empty() {
            return Err(Error::InvalidArgument("agent id is empty".into()));
        }
        self.store.transact(|t| {
            let now = t.now_ms();
            sweep_expired(t, now)?;
            let pick = t.sys_range(READY_PREFIX).into_iter().find(|(_, kind)| {
                kinds.is_empty() || kinds.iter().any(|k| k.as_bytes() == kind.as_slice())
            });
            let Some((key, _)) = pick else {
                return Ok(None);
            };
            let id = key
                .rsplit('/')
                .next()
                .and_then(crate::engine::unpart)
                .ok_or_else(|| Error::Corrupt(format!("bad ready key `{key}`")))?;
            let mut task = load_task(t, &id)?;
            t.sys_delete(&key);
            t.clear_group(&id);
            task.attempts += 1;
            task.status = TaskStatus::Leased;
            task.lease = Some(Lease {
                agent_id: agent_id.to_owned(),
                expires_at: now + ttl_ms,
                attempt: task.attempts,
            });
            save_task(t, &task)?;
            t.sys_put(&active_key(&id), Vec::new(), Vec::new());
            Ok(Some(task))
        })
    }

    /// Extends a live lease to `now + ttl_ms`.
    pub fn heartbeat(&self, task_id: &str, agent_id: &str, attempt: u32, ttl_ms: u64) -> Result<Lease> {
        check_ttl(ttl_ms)?;
        self.store.transact(|t| {
            let now = t.now_ms();
            let mut task = load_task(t, task_id)?;
            check_lease(&task, agent_id, attempt, now)?;
            let lease = task.lease.as_mut().expect("checked");
            lease.expires_at = now + ttl_ms;
            let out = lease.clone();
            save_task(t, &task)?;
            Ok(out)
        })
    }

    /// Stages output `index` of the current attempt as `<task_id>/<index>`.
    pub fn stage_output(
        &self,
        task_id: &str,
        agent_id: &str,
        attempt: u32,
        index: u32,
        doc: Document,
    ) -> Result<String> {
        self.stage_outputs(task_id, agent_id, attempt, vec![(index, doc)])
            .map(|mut k| k.remove(0))
    }

    pub fn stage_outputs(
        &self,
        task_id: &str,
        agent_id: &str,
        attempt: u32,
        docs: Vec<(u32, Document)>,
    ) -> Result<Vec<String>> {
        self.store.transact(|t| {
            let now = t.now_ms();
            let task = load_task(t, task_id)?;
            check_lease(&task, agent_id, attempt, now)?;
            let mut keys = Vec::with_capacity(docs.len());
            for (index, mut doc) in docs {
                doc.key = format!("{task_id}/{index}");
                keys.push(doc.key.clone());
                t.stage_doc(task_id, doc)?;
            }
            Ok(keys)
        })
    }

    /// Finishes the current attempt. On `Ok` the staged outputs become
    /// visible in the same record; on error they are discarded and the
    /// task is requeued or declared dead.
    pub fn complete_task(
        &self,
        task_id: &str,
        agent_id: &str,
        attempt: u32,
        outcome: Outcome,
    ) -> Result<CompletionMessage> {
        self.store.transact(|t| {
            let now = t.now_ms();
            let mut task = load_task(t, task_id)?;
            check_lease(&task, agent_id, attempt, now)?;
            t.sys_delete(&active_key(task_id));
            task.lease = None;
            match &outcome {
                Outcome::Ok => {
                    let mut outputs = t.commit_group(task_id)?;
                    outputs.sort_by_key(|k| output_index(k));
                    task.outputs = outputs;
                    task.status = TaskStatus::Completed;
                    task.finished_at = Some(now);
                    task.last_error = None;
                    save_task(t, &task)?;
                }
                Outcome::Error { message } => {
                    t.clear_group(task_id);
                    task.last_error = Some(message.clone());
                    if task.attempts >= task.max_attempts {
                        task.status = TaskStatus::Dead;
                        task.finished_at = Some(now);
                        save_task(t, &task)?;
                    } else {
                        make_ready(t, &mut task)?;
                    }
                }
            }
            append_note(t, &task, agent_id, outcome)
        })
    }

    /// Operator override: a dead task gets a fresh attempt budget.
    pub fn replay_task(&self, task_id: &str) -> Result<Task> {
        self.store.transact(|t| {
            let mut task = load_task(t, task_id)?;
            if task.status != TaskStatus::Dead {
                return Err(Error::InvalidArgument(format!(
                    "task `{task_id}` is {:?}, only dead tasks can be replayed",
                    task.status
                )));
            }
            task.attempts = 0;
            task.finished_at = None;
            task.last_error = None;
            make_ready(t, &mut task)?;
            if let Some(plan_id) = task.plan_id.clone() {
                plan::reopen_plan(t, &plan_id)?;
            }
            load_task(t, task_id)
        })
    }

    /// Notifications `from..from + limit`.
    pub fn read_notifications(&self, from: u64, limit: usize) -> Result<Vec<CompletionMessage>> {
        let mut out = Vec::new();
        let mut n = from;
        while out.len() < limit {
            match self.store.sys_get_json::<CompletionMessage>(&note_key(n))? {
                Some(m) => out.push(m),
                None => break,
            }
            n += 1;
        }
        Ok(out)
    }
}

pub(crate) fn read_note(t: &Txn<'_>, n: u64) -> Result<Option<CompletionMessage>> {
    t.sys_get_json(&note_key(n))
}

fn output_index(key: &str) -> u64 {
    key.rsplit('/')
        .next()
        .and_then(|n| n.parse().ok())
        .unwrap_or(u64::MAX)
}
