use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine as _;
use forge_core::api::{Backend, Ops, Request, Response};
use forge_core::compute::NetworkSpec;
use forge_core::engine::{Engine, EngineOptions};
use forge_core::store::{Document, Store, StoreOptions, TagMap, DEFAULT_INLINE_THRESHOLD};
use forge_core::workflow::agent::{run_agent, AgentConfig};
use forge_core::workflow::plan::{PlanFile, PlanStatus};
use forge_core::workflow::{Task, TaskKind};
use forge_core::{tagquery, Error};
use forge_wire::{RemoteBackend, Server};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::*;
use crate::{builtins, usage, CliError, CliResult, Output};

const SCAN_PAGE: usize = 1000;

pub(crate) fn dispatch(cli: Cli) -> CliResult<()> {
    let out = Output { json: cli.json };
    let addr = cli.addr.as_str();
    match cli.command {
        Command::Init { dir } => init(out, &dir),
        Command::Serve(a) => serve(out, addr, a),
        Command::Ingest(a) => ingest(out, &connect(addr)?, a),
        Command::Query(a) => query(out, &connect(addr)?, a),
        Command::View(c) => view(out, &connect(addr)?, c),
        Command::Model(c) => model(out, &connect(addr)?, c),
        Command::Plan(c) => plan(out, &connect(addr)?, c),
        Command::Agent(AgentCommand::Run(a)) => agent(out, connect(addr)?, a),
        Command::Master(MasterCommand::Run(a)) => master(out, &connect(addr)?, a),
        Command::Events(EventsCommand::Dump(a)) => events(out, &connect(addr)?, a),
        Command::Replay { task_id } => {
            let t = connect(addr)?.replay_task(&task_id)?;
            out.emit(&t, || format!("task {}: {:?}, attempts {}/{}", t.spec.task_id, t.status, t.attempts, t.max_attempts));
            Ok(())
        }
    }
}

fn connect(addr: &str) -> CliResult<RemoteBackend> {
    Ok(RemoteBackend::connect(addr)?)
}

fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn init(out: Output, dir: &Path) -> CliResult<()> {
    let existed = dir.join("LOCK").exists() || dir.read_dir().is_ok_and(|mut d| d.next().is_some());
    drop(Store::open(dir, StoreOptions::default())?);
    out.emit(&json!({"dir": dir, "created": !existed}), || {
        format!("initialized store in {}", dir.display())
    });
    Ok(())
}

fn serve(out: Output, addr: &str, a: ServeArgs) -> CliResult<()> {
    let opts = StoreOptions {
        inline_threshold: a.inline_threshold.unwrap_or(DEFAULT_INLINE_THRESHOLD),
        sync: !a.no_sync,
        ..StoreOptions::default()
    };
    let store = Arc::new(Store::open(&a.dir, opts)?);
    let engine = Arc::new(Engine::new(
        store,
        EngineOptions {
            max_attempts: a.max_attempts,
            ..EngineOptions::default()
        },
    ));
    let server = Server::bind(engine, addr).map_err(|e| Error::Io(format!("bind {addr}: {e}")))?;
    let bound = server.local_addr();
    // Printed before serving so a supervisor can learn an ephemeral port.
    out.line(&json!({"listening": bound.to_string(), "dir": a.dir}), || {
        format!("listening on {bound}")
    });
    server.run().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

/// One line of an ingest file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestRecord {
    key: String,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    tags: TagMap,
    #[serde(default)]
    sample_b64: Option<String>,
    /// Relative paths resolve against the ingest file's directory.
    #[serde(default)]
    sample_file: Option<PathBuf>,
}

fn ingest(out: Output, b: &RemoteBackend, a: IngestArgs) -> CliResult<()> {
    let text = read_file(&a.file)?;
    let base = a.file.parent().unwrap_or(Path::new("."));
    // Parse everything first so a bad line writes nothing.
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| usage(format!("{}:{}: {m}", a.file.display(), i + 1));
        let r: IngestRecord = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let bytes = match (&r.sample_b64, &r.sample_file) {
            (Some(s), None) => base64::engine::general_purpose::STANDARD
                .decode(s)
                .map_err(|e| at(format!("sample_b64: {e}")))?,
            (None, Some(p)) => {
                let p = base.join(p);
                std::fs::read(&p).map_err(|e| at(format!("sample_file {}: {e}", p.display())))?
            }
            _ => return Err(at("exactly one of sample_b64 and sample_file is required".into())),
        };
        records.push((r, bytes));
    }

    let threshold = b.ping()?.inline_threshold;
    let (mut inline, mut blobs) = (0usize, 0usize);
    let mut batch = Vec::new();
    for (r, bytes) in records {
        let mut doc = if bytes.len() > threshold {
            blobs += 1;
            Document::blob(r.key, b.put_blob(&bytes)?)
        } else {
            inline += 1;
            Document::inline(r.key, bytes)
        };
        doc.label = r.label;
        doc.tags = r.tags;
        batch.push(doc);
        if batch.len() >= a.batch.max(1) {
            b.put_documents(std::mem::take(&mut batch))?;
        }
    }
    if !batch.is_empty() {
        b.put_documents(batch)?;
    }
    out.emit(&json!({"ingested": inline + blobs, "inline": inline, "blobs": blobs}), || {
        format!("ingested {} documents ({blobs} as blobs)", inline + blobs)
    });
    Ok(())
}

fn query(out: Output, b: &RemoteBackend, a: QueryArgs) -> CliResult<()> {
    let limit = a.limit.unwrap_or(usize::MAX);
    let mut keys: Vec<String> = Vec::new();
    let mut cursor = None;
    let mut index = None;
    while keys.len() < limit {
        let req = Request::Scan {
            query: a.query.clone(),
            cursor: cursor.take(),
            limit: SCAN_PAGE.min(limit - keys.len()) as u32,
            linear: a.linear,
        };
        match b.call(req)? {
            Response::Page {
                keys: page,
                next,
                used_index,
            } => {
                keys.extend(page);
                index = used_index;
                match next {
                    Some(c) => cursor = Some(c),
                    None => break,
                }
            }
            other => return Err(Error::Protocol(format!("unexpected response {other:?}")).into()),
        }
    }
    let n = keys.len();
    if a.count {
        out.emit(&json!({"count": n, "used_index": index}), || n.to_string());
    } else {
        out.emit(&json!({"count": n, "keys": keys, "used_index": index}), || keys.join("\n"));
    }
    Ok(())
}

fn view(out: Output, b: &RemoteBackend, c: ViewCommand) -> CliResult<()> {
    match c {
        ViewCommand::Define { name, query } => {
            let v = b.define_view(&name, &query)?;
            out.emit(&v, || format!("defined view {}: {}", v.view_key, v.query));
        }
        ViewCommand::List => {
            let vs = b.list_views()?;
            out.emit(&vs, || {
                vs.iter().map(|v| format!("{}\t{}", v.view_key, v.query)).collect::<Vec<_>>().join("\n")
            });
        }
        ViewCommand::Count { name } => {
            let n = b.count_view(&name)?;
            out.emit(&json!({"view": name, "count": n}), || n.to_string());
        }
    }
    Ok(())
}

fn model(out: Output, b: &RemoteBackend, c: ModelCommand) -> CliResult<()> {
    match c {
        ModelCommand::Register { name, spec } => {
            let text = read_file(&spec)?;
            let spec: NetworkSpec = serde_json::from_str(&text)
                .map_err(|e| usage(format!("{}: {e}", spec.display())))?;
            let m = b.register_model(&name, spec)?;
            out.emit(&m, || {
                format!("registered model {} ({} layers)", m.model_key, m.spec.layers.len())
            });
        }
        ModelCommand::List => {
            let ms = b.list_models()?;
            out.emit(&ms, || {
                ms.iter()
                    .map(|m| format!("{}\t{} layers", m.model_key, m.spec.layers.len()))
                    .collect::<Vec<_>>()
                    .join("\n")
            });
        }
        ModelCommand::Versions { name } => {
            let vs = b.list_versions(&name)?;
            out.emit(&vs, || {
                vs.iter()
                    .map(|v| {
                        let metrics: Vec<String> = v.metrics.iter().map(|(k, m)| format!("{k}={m}")).collect();
                        format!("{}\tstep {}\t{}", v.version_id, v.step, metrics.join(" "))
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            });
        }
    }
    Ok(())
}

/// Stable summary of one task for `plan status`.
#[derive(Debug, Serialize)]
struct TaskLine<'a> {
    task_id: &'a str,
    kind: String,
    status: forge_core::workflow::TaskStatus,
    attempts: u32,
    outputs: usize,
    last_error: Option<&'a str>,
}

impl<'a> From<&'a Task> for TaskLine<'a> {
    fn from(t: &'a Task) -> Self {
        TaskLine {
            task_id: &t.spec.task_id,
            kind: t.spec.kind.to_string(),
            status: t.status,
            attempts: t.attempts,
            outputs: t.outputs.len(),
            last_error: t.last_error.as_deref(),
        }
    }
}

fn plan(out: Output, b: &RemoteBackend, c: PlanCommand) -> CliResult<()> {
    match c {
        PlanCommand::Submit { file } => {
            let pf = PlanFile::parse(&read_file(&file)?)?;
            let mut views = Vec::new();
            for (name, q) in &pf.views {
                match b.get_view(name) {
                    Ok(v) if v.query == tagquery::parse(q)? => {}
                    Ok(_) | Err(Error::ViewNotFound(_)) => {
                        b.define_view(name, q)?;
                        views.push(name.clone());
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            let mut models = Vec::new();
            for (name, spec) in &pf.models {
                match b.get_model(name) {
                    Ok(m) if &m.spec == spec => {}
                    Ok(_) | Err(Error::ModelNotFound(_)) => {
                        b.register_model(name, spec.clone())?;
                        models.push(name.clone());
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            let id = b.submit_plan(pf.to_spec()?)?;
            let tasks: Vec<&str> = pf.tasks.iter().map(|t| t.task_id.as_str()).collect();
            out.emit(
                &json!({"plan_id": id, "tasks": tasks, "views_defined": views, "models_registered": models}),
                || format!("submitted plan {id} ({} tasks)", tasks.len()),
            );
        }
        PlanCommand::Status(a) => {
            let deadline = a.wait.map(|s| Instant::now() + Duration::from_secs_f64(s.max(0.0)));
            let report = loop {
                let r = b.get_plan(&a.plan_id)?;
                match deadline {
                    Some(d) if r.plan.status == PlanStatus::Running && Instant::now() < d => {
                        std::thread::sleep(Duration::from_millis(a.poll_ms));
                    }
                    _ => break r,
                }
            };
            let tasks: Vec<TaskLine> = report.tasks.iter().map(TaskLine::from).collect();
            let status = report.plan.status;
            out.emit(&json!({"plan_id": report.plan.plan_id, "status": status, "tasks": tasks}), || {
                let mut s = format!("plan {}: {status:?}", report.plan.plan_id);
                for t in &tasks {
                    s.push_str(&format!("\n  {}\t{}\t{:?}\tattempts {}", t.task_id, t.kind, t.status, t.attempts));
                    if let Some(e) = t.last_error {
                        s.push_str(&format!("\t{e}"));
                    }
                }
                s
            });
            if a.wait.is_some() && status != PlanStatus::Completed {
                return Err(CliError::Unfinished(format!("plan {} is {status:?}", a.plan_id)));
            }
        }
        PlanCommand::List => {
            let ps = b.list_plans()?;
            out.emit(&ps, || {
                ps.iter()
                    .map(|p| format!("{}\t{:?}\t{} tasks", p.plan_id, p.status, p.tasks.len()))
                    .collect::<Vec<_>>()
                    .join("\n")
            });
        }
    }
    Ok(())
}

fn agent(out: Output, b: RemoteBackend, a: AgentRunArgs) -> CliResult<()> {
    let handlers = builtins::registry();
    let known = handlers.kinds();
    for k in &a.kinds {
        k.parse::<TaskKind>().map_err(|e| usage(e.to_string()))?;
        if !known.contains(k) {
            return Err(usage(format!("no handler for kind `{k}`; known: {}", known.join(", "))));
        }
    }
    let id = a.id.unwrap_or_else(|| format!("agent-{}", std::process::id()));
    let mut cfg = AgentConfig::new(&id);
    cfg.kinds = (!a.kinds.is_empty()).then_some(a.kinds);
    cfg.lease_ttl_ms = a.lease_ms;
    cfg.poll_interval = Duration::from_millis(a.poll_ms);
    cfg.max_tasks = a.max_tasks;
    cfg.idle_timeout = a.idle_exit.map(|s| Duration::from_secs_f64(s.max(0.0)));
    let stop = AtomicBool::new(false);
    let report = run_agent(&b, &handlers, &cfg, &stop, None)?;
    out.emit(&json!({"agent": id, "report": report}), || {
        format!(
            "agent {id}: {} completed, {} failed, {} stale",
            report.completed, report.failed, report.stale
        )
    });
    Ok(())
}

#[derive(Debug, Default, Serialize)]
struct MasterSummary {
    master: String,
    steps: u64,
    consumed: u64,
    applied_ok: u64,
    dispatched: Vec<String>,
    plans_completed: Vec<String>,
    plans_failed: Vec<String>,
}

fn master(out: Output, b: &RemoteBackend, a: MasterRunArgs) -> CliResult<()> {
    let start = Instant::now();
    let mut sum = MasterSummary {
        master: a.id.clone(),
        ..MasterSummary::default()
    };
    loop {
        let busy = match b.master_step(&a.id, a.lease_ms, 256) {
            Ok(act) => {
                sum.steps += 1;
                sum.consumed += act.consumed;
                sum.applied_ok += act.applied_ok;
                let busy = act.consumed > 0 || !act.dispatched.is_empty();
                if out.json && busy {
                    out.line(&act, String::new);
                } else {
                    for p in &act.plans_completed {
                        out.line(&(), || format!("plan {p} completed"));
                    }
                    for p in &act.plans_failed {
                        out.line(&(), || format!("plan {p} failed"));
                    }
                }
                sum.dispatched.extend(act.dispatched);
                sum.plans_completed.extend(act.plans_completed);
                sum.plans_failed.extend(act.plans_failed);
                busy
            }
            // Another master holds the lease, or the service blinked.
            Err(Error::NotMaster(_) | Error::ConnectionLost(_)) => false,
            Err(e) => return Err(e.into()),
        };
        if a.once {
            break;
        }
        if let Some(p) = &a.until_plan {
            match b.get_plan(p) {
                Ok(r) if r.plan.status != PlanStatus::Running => break,
                Ok(_) | Err(Error::PlanNotFound(_) | Error::ConnectionLost(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        if a.max_secs.is_some_and(|s| start.elapsed().as_secs_f64() >= s) {
            break;
        }
        if !busy {
            std::thread::sleep(Duration::from_millis(a.poll_ms));
        }
    }
    let _ = b.release_master(&a.id);
    out.line(&sum, || {
        format!(
            "master {}: {} steps, {} notifications, {} plans completed, {} failed",
            sum.master,
            sum.steps,
            sum.consumed,
            sum.plans_completed.len(),
            sum.plans_failed.len()
        )
    });
    Ok(())
}

fn events(out: Output, b: &RemoteBackend, a: EventsDumpArgs) -> CliResult<()> {
    let evs = b.query_events(&a.model, a.name.as_deref(), a.from, a.to)?;
    out.emit(&evs, || {
        evs.iter()
            .map(|e| format!("{}\t{}\t{}", e.step, e.name, e.value))
            .collect::<Vec<_>>()
            .join("\n")
    });
    Ok(())
}
