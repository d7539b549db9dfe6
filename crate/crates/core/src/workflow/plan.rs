//! DAG plans, the plan file format and the master step.

use std::collections::{BTreeMap, BTreeSet};

use petgraph::algo::toposort;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};

use super::{
    load_task, make_ready, read_note, save_task, submit_in, sweep_expired, task_key, unready,
    Outcome, Task, TaskKind, TaskSpec, TaskStatus,
};
use crate::compute::NetworkSpec;
use crate::dataset::{poll_stream_in, STREAM_PREFIX};
use crate::engine::{part, unpart, Engine};
use crate::error::{Error, Result};
use crate::store::{document, TagMap, Txn};

const PLAN_PREFIX: &str = "__sys/plan/";
const RUNNING_PREFIX: &str = "__sys/plan-running/";
const MASTER_KEY: &str = "__sys/master";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSpec {
    pub plan_id: String,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub plan_id: String,
    /// Task ids in topological order.
    pub tasks: Vec<String>,
    /// `(before, after)` pairs.
    pub edges: Vec<(String, String)>,
    pub status: PlanStatus,
    pub submitted_at: u64,
    pub finished_at: Option<u64>,
}

impl Plan {
    fn preds<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |(_, b)| b == id).map(|(a, _)| a.as_str())
    }

    fn succs<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |(a, _)| a == id).map(|(_, b)| b.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub plan: Plan,
    pub tasks: Vec<Task>,
}

/// What one `master_step` did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MasterActions {
    pub consumed: u64,
    pub applied_ok: u64,
    pub unblocked: Vec<String>,
    pub plans_completed: Vec<String>,
    pub plans_failed: Vec<String>,
    /// Tasks submitted by stream controllers.
    pub dispatched: Vec<String>,
    /// Next notification to consume.
    pub offset: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MasterState {
    pub holder: String,
    pub expires_at: u64,
    /// Next notification to consume. Advanced in the same record as the
    /// effects of the consumed messages.
    pub offset: u64,
    /// Total ok-messages applied since the store was created.
    pub applied_ok: u64,
}

fn plan_key(id: &str) -> String {
    format!("{PLAN_PREFIX}{}", part(id))
}

fn running_key(id: &str) -> String {
    format!("{RUNNING_PREFIX}{}", part(id))
}

fn load_plan(t: &Txn<'_>, id: &str) -> Result<Plan> {
    t.sys_get_json(&plan_key(id))?
        .ok_or_else(|| Error::PlanNotFound(id.to_owned()))
}

fn save_plan(t: &mut Txn<'_>, plan: &Plan) -> Result<()> {
    t.sys_put_json(&plan_key(&plan.plan_id), plan)?;
    if plan.status == PlanStatus::Running {
        t.sys_put(&running_key(&plan.plan_id), Vec::new(), Vec::new());
    } else {
        t.sys_delete(&running_key(&plan.plan_id));
    }
    Ok(())
}

/// Checks ids and dependencies, returning task ids in topological order.
fn order(spec: &PlanSpec) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut g = DiGraph::<usize, ()>::new();
    let mut index = BTreeMap::new();
    for (i, t) in spec.tasks.iter().enumerate() {
        if index.insert(t.task_id.as_str(), i).is_some() {
            return Err(Error::DuplicateKey(t.task_id.clone()));
        }
        g.add_node(i);
    }
    let mut edges = Vec::new();
    for (i, t) in spec.tasks.iter().enumerate() {
        for d in &t.depends_on {
            let &j = index.get(d.as_str()).ok_or_else(|| {
                Error::InvalidArgument(format!("task `{}` depends on unknown task `{d}`", t.task_id))
            })?;
            let (a, b) = (NodeIndex::new(j), NodeIndex::new(i));
            if !g.contains_edge(a, b) {
                g.add_edge(a, b, ());
                edges.push((d.clone(), t.task_id.clone()));
            }
        }
    }
    let sorted = toposort(&g, None)
        .map_err(|c| Error::CycleDetected(spec.tasks[c.node_id().index()].task_id.clone()))?;
    Ok((sorted.into_iter().map(|n| spec.tasks[n.index()].task_id.clone()).collect(), edges))
}

/// Puts cancelled tasks of a failed plan back in play after a replay.
pub(crate) fn reopen_plan(t: &mut Txn<'_>, plan_id: &str) -> Result<()> {
    let mut plan = load_plan(t, plan_id)?;
    if plan.status != PlanStatus::Failed {
        return Ok(());
    }
    plan.status = PlanStatus::Running;
    plan.finished_at = None;
    for id in plan.tasks.clone() {
        let mut task = load_task(t, &id)?;
        if task.status != TaskStatus::Failed {
            continue;
        }
        let ready = plan
            .preds(&id)
            .map(|p| load_task(t, p).map(|p| p.status == TaskStatus::Completed))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .all(|c| c);
        if ready {
            make_ready(t, &mut task)?;
        } else {
            task.status = TaskStatus::Pending;
            task.blocked = true;
            save_task(t, &task)?;
        }
    }
    save_plan(t, &plan)
}

/// Readies every blocked successor of `done` whose predecessors are all
/// Completed.
fn unblock_after(t: &mut Txn<'_>, plan: &Plan, done: &str, out: &mut Vec<String>) -> Result<()> {
    for s in plan.succs(done) {
        let mut task = load_task(t, s)?;
        if !(task.blocked && task.status == TaskStatus::Pending) {
            continue;
        }
        let mut all = true;
        for p in plan.preds(s) {
            all &= load_task(t, p)?.status == TaskStatus::Completed;
        }
        if all {
            make_ready(t, &mut task)?;
            out.push(s.to_owned());
        }
    }
    Ok(())
}

/// Completes or fails a running plan from its task statuses.
fn finalize(t: &mut Txn<'_>, plan_id: &str, now: u64, actions: &mut MasterActions) -> Result<()> {
    let mut plan = load_plan(t, plan_id)?;
    if plan.status != PlanStatus::Running {
        return Ok(());
    }
    let tasks: Vec<Task> = plan
        .tasks
        .iter()
        .map(|id| load_task(t, id))
        .collect::<Result<_>>()?;
    if tasks.iter().any(|k| k.status == TaskStatus::Dead) {
        for mut task in tasks {
            if task.status == TaskStatus::Pending {
                unready(t, &task);
                task.status = TaskStatus::Failed;
                task.finished_at = Some(now);
                save_task(t, &task)?;
            }
        }
        plan.status = PlanStatus::Failed;
        plan.finished_at = Some(now);
        save_plan(t, &plan)?;
        actions.plans_failed.push(plan.plan_id);
    } else if tasks.iter().all(|k| k.status == TaskStatus::Completed) {
        plan.status = PlanStatus::Completed;
        plan.finished_at = Some(now);
        save_plan(t, &plan)?;
        actions.plans_completed.push(plan.plan_id);
    }
    Ok(())
}

impl Engine {
    /// Validates the DAG and enqueues its root tasks. Resubmitting an
    /// existing plan id is a no-op.
    pub fn submit_plan(&self, spec: PlanSpec) -> Result<String> {
        document::validate_key(&spec.plan_id)
            .map_err(|e| Error::InvalidArgument(format!("plan_id: {e}")))?;
        if spec.tasks.is_empty() {
            return Err(Error::InvalidArgument("plan has no tasks".into()));
        }
        let (sorted, edges) = order(&spec)?;
        let max = self.opts.max_attempts;
        self.store.transact(|t| {
            if t.sys_get(&plan_key(&spec.plan_id)).is_some() {
                return Ok(spec.plan_id.clone());
            }
            for task in &spec.tasks {
                if t.sys_get(&task_key(&task.task_id)).is_some() {
                    return Err(Error::DuplicateKey(format!("task `{}`", task.task_id)));
                }
            }
            for task in &spec.tasks {
                let blocked = !task.depends_on.is_empty();
                submit_in(t, task.clone(), Some(&spec.plan_id), blocked, max)?;
            }
            let plan = Plan {
                plan_id: spec.plan_id.clone(),
                tasks: sorted,
                edges,
                status: PlanStatus::Running,
                submitted_at: t.now_ms(),
                finished_at: None,
            };
            save_plan(t, &plan)?;
            Ok(plan.plan_id)
        })
    }

    pub fn get_plan(&self, plan_id: &str) -> Result<PlanReport> {
        let plan: Plan = self
            .store
            .sys_get_json(&plan_key(plan_id))?
            .ok_or_else(|| Error::PlanNotFound(plan_id.to_owned()))?;
        let tasks = plan
            .tasks
            .iter()
            .map(|id| self.get_task(id))
            .collect::<Result<_>>()?;
        Ok(PlanReport { plan, tasks })
    }

    pub fn list_plans(&self) -> Result<Vec<Plan>> {
        self.store
            .sys_range(PLAN_PREFIX)
            .into_iter()
            .map(|(_, v)| Ok(serde_json::from_slice(&v)?))
            .collect()
    }

    pub fn master_state(&self) -> Result<MasterState> {
        Ok(self.store.sys_get_json(MASTER_KEY)?.unwrap_or_default())
    }

    /// One master iteration, executed as a single atomic record: renew the
    /// master lease, consume up to `max_messages` notifications, unblock
    /// successors, finalize plans and poll every stream controller.
    pub fn master_step(&self, master_id: &str, ttl_ms: u64, max_messages: usize) -> Result<MasterActions> {
        if master_id.is_empty() {
            return Err(Error::InvalidArgument("master id is empty".into()));
        }
        let max_attempts = self.opts.max_attempts;
        self.store.transact(|t| {
            let now = t.now_ms();
            let mut st: MasterState = t.sys_get_json(MASTER_KEY)?.unwrap_or_default();
            if !st.holder.is_empty() && st.holder != master_id && st.expires_at > now {
                return Err(Error::NotMaster(st.holder.clone()));
            }
            st.holder = master_id.to_owned();
            st.expires_at = now + ttl_ms;
            sweep_expired(t, now)?;

            let mut actions = MasterActions::default();
            let mut touched = BTreeSet::new();
            while (actions.consumed as usize) < max_messages {
                let Some(msg) = read_note(t, st.offset)? else {
                    break;
                };
                st.offset += 1;
                actions.consumed += 1;
                if msg.outcome == Outcome::Ok && msg.status == TaskStatus::Completed {
                    actions.applied_ok += 1;
                    if let Some(p) = &msg.plan_id {
                        let plan = load_plan(t, p)?;
                        unblock_after(t, &plan, &msg.task_id, &mut actions.unblocked)?;
                    }
                }
                if let Some(p) = msg.plan_id {
                    touched.insert(p);
                }
            }
            st.applied_ok += actions.applied_ok;

            // Dead tasks may also come from expired leases, which write no
            // notification, so every running plan is re-evaluated.
            for (key, _) in t.sys_range(RUNNING_PREFIX) {
                let id = unpart(&key[RUNNING_PREFIX.len()..])
                    .ok_or_else(|| Error::Corrupt(format!("bad plan key `{key}`")))?;
                touched.insert(id);
            }
            for id in touched {
                finalize(t, &id, now, &mut actions)?;
            }

            for (key, _) in t.sys_range(STREAM_PREFIX) {
                let view = unpart(&key[STREAM_PREFIX.len()..])
                    .ok_or_else(|| Error::Corrupt(format!("bad stream key `{key}`")))?;
                if let Some(task) = poll_stream_in(t, &view, max_attempts)? {
                    actions.dispatched.push(task.spec.task_id);
                }
            }

            actions.offset = st.offset;
            t.sys_put_json(MASTER_KEY, &st)?;
            Ok(actions)
        })
    }

    /// Gives up the master lease so another master can take over at once.
    pub fn release_master(&self, master_id: &str) -> Result<()> {
        self.store.transact(|t| {
            let mut st: MasterState = t.sys_get_json(MASTER_KEY)?.unwrap_or_default();
            if st.holder == master_id {
                st.holder.clear();
                st.expires_at = 0;
                t.sys_put_json(MASTER_KEY, &st)?;
            }
            Ok(())
        })
    }
}

/// On-disk plan file. `views` and `models` are optional conveniences the
/// CLI registers before submitting the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub plan_id: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub views: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub models: BTreeMap<String, NetworkSpec>,
    pub tasks: Vec<PlanFileTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFileTask {
    pub task_id: String,
    pub kind: String,
    #[serde(default)]
    pub input_dataset: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub output_dataset: String,
    #[serde(default)]
    pub params: TagMap,
    #[serde(default)]
    pub depends_on: Vec<String>,
}

impl PlanFile {
    /// Parses and validates a plan file. Errors carry the 1-based line and
    /// the path of the offending field.
    pub fn parse(text: &str) -> Result<PlanFile> {
        let file: PlanFile = serde_json::from_str(text).map_err(|e| Error::InvalidPlan {
            line: e.line(),
            field: json_field(&e.to_string()),
            message: e.to_string(),
        })?;
        let lines = task_lines(text);
        let line_of = |i: usize| lines.get(i).copied().unwrap_or(1);
        let bad = |i: usize, field: String, message: String| Error::InvalidPlan {
            line: line_of(i),
            field,
            message,
        };
        if let Err(e) = document::validate_key(&file.plan_id) {
            return Err(Error::InvalidPlan {
                line: 1,
                field: "plan_id".into(),
                message: e.to_string(),
            });
        }
        if file.tasks.is_empty() {
            return Err(Error::InvalidPlan {
                line: 1,
                field: "tasks".into(),
                message: "plan has no tasks".into(),
            });
        }
        for (view, q) in &file.views {
            crate::tagquery::parse(q).map_err(|e| Error::InvalidPlan {
                line: 1,
                field: format!("views.{view}"),
                message: e.to_string(),
            })?;
        }
        let mut seen = BTreeSet::new();
        for (i, task) in file.tasks.iter().enumerate() {
            if let Err(e) = document::validate_key(&task.task_id) {
                return Err(bad(i, format!("tasks[{i}].task_id"), e.to_string()));
            }
            if !seen.insert(task.task_id.as_str()) {
                return Err(bad(i, format!("tasks[{i}].task_id"), format!("duplicate task id `{}`", task.task_id)));
            }
            let kind: TaskKind = task
                .kind
                .parse()
                .map_err(|e: Error| bad(i, format!("tasks[{i}].kind"), e.to_string()))?;
            if kind.needs_refs() {
                if task.input_dataset.is_empty() {
                    return Err(bad(i, format!("tasks[{i}].input_dataset"), "required for train tasks".into()));
                }
                if task.model.is_empty() {
                    return Err(bad(i, format!("tasks[{i}].model"), "required for train tasks".into()));
                }
            }
        }
        for (i, task) in file.tasks.iter().enumerate() {
            for (j, d) in task.depends_on.iter().enumerate() {
                if !seen.contains(d.as_str()) {
                    return Err(bad(i, format!("tasks[{i}].depends_on[{j}]"), format!("unknown task `{d}`")));
                }
            }
        }
        let spec = file.to_spec()?;
        order(&spec)?;
        Ok(file)
    }

    pub fn to_spec(&self) -> Result<PlanSpec> {
        let tasks = self
            .tasks
            .iter()
            .map(|t| {
                Ok(TaskSpec {
                    task_id: t.task_id.clone(),
                    kind: t.kind.parse()?,
                    input_dataset: t.input_dataset.clone(),
                    model_key: t.model.clone(),
                    output_dataset: t.output_dataset.clone(),
                    params: t.params.clone(),
                    input_range: None,
                    depends_on: t.depends_on.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(PlanSpec {
            plan_id: self.plan_id.clone(),
            tasks,
        })
    }
}

/// Pulls the field name out of serde_json messages such as
/// "missing field `kind`" or "unknown field `foo`".
fn json_field(msg: &str) -> String {
    let Some(a) = msg.find('`') else {
        return String::new();
    };
    msg[a + 1..]
        .find('`')
        .map(|b| msg[a + 1..a + 1 + b].to_owned())
        .unwrap_or_default()
}

/// Line of each `"task_id"` occurrence, in order; task `i` is reported at
/// line `i` of this list.
fn task_lines(text: &str) -> Vec<usize> {
    text.lines()
        .enumerate()
        .flat_map(|(n, l)| std::iter::repeat_n(n + 1, l.matches("\"task_id\"").count()))
        .collect()
}

