use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "forge", version, about = "Experiment store, scheduler and agents")]
pub struct Cli {
    /// Service address. `serve` listens here; every other command connects.
    #[arg(long, global = true, env = forge_wire::ADDR_ENV, default_value = "127.0.0.1:7114")]
    pub addr: String,

    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create an empty store directory.
    Init { dir: PathBuf },
    /// Serve a store over TCP until killed.
    Serve(ServeArgs),
    /// Load documents from a JSON-lines file.
    Ingest(IngestArgs),
    /// List the keys of documents matching a tag query.
    Query(QueryArgs),
    #[command(subcommand)]
    View(ViewCommand),
    #[command(subcommand)]
    Model(ModelCommand),
    #[command(subcommand)]
    Plan(PlanCommand),
    #[command(subcommand)]
    Agent(AgentCommand),
    #[command(subcommand)]
    Master(MasterCommand),
    #[command(subcommand)]
    Events(EventsCommand),
    /// Put a dead task back in the queue with a fresh attempt budget.
    Replay { task_id: String },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    pub dir: PathBuf,
    /// Largest payload stored inline; bigger ones must go through blobs.
    #[arg(long)]
    pub inline_threshold: Option<usize>,
    /// Leases granted before a task is declared dead.
    #[arg(long, default_value_t = 3)]
    pub max_attempts: u32,
    /// Skip fsync. Faster, but a power cut can lose acknowledged writes.
    #[arg(long)]
    pub no_sync: bool,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub file: PathBuf,
    /// Documents per write.
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    pub query: String,
    /// Stop after this many keys.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Print only the number of matches.
    #[arg(long)]
    pub count: bool,
    /// Evaluate every document instead of using an index.
    #[arg(long)]
    pub linear: bool,
}

#[derive(Debug, Subcommand)]
pub enum ViewCommand {
    /// Name a tag query as a dataset.
    Define { name: String, query: String },
    List,
    /// Number of documents currently in a view.
    Count { name: String },
}

#[derive(Debug, Subcommand)]
pub enum ModelCommand {
    /// Register a network spec (JSON) under a model key.
    Register { name: String, spec: PathBuf },
    List,
    /// Saved versions of a model, oldest first.
    Versions { name: String },
}

#[derive(Debug, Subcommand)]
pub enum PlanCommand {
    /// Register the file's views and models, then submit its tasks.
    Submit { file: PathBuf },
    Status(PlanStatusArgs),
    List,
}

#[derive(Debug, Args)]
pub struct PlanStatusArgs {
    pub plan_id: String,
    /// Poll until the plan finishes or this many seconds pass.
    #[arg(long)]
    pub wait: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub poll_ms: u64,
}

#[derive(Debug, Subcommand)]
pub enum AgentCommand {
    Run(AgentRunArgs),
}

#[derive(Debug, Args)]
pub struct AgentRunArgs {
    /// Agent id; defaults to `agent-<pid>`.
    #[arg(long)]
    pub id: Option<String>,
    /// Task kinds to take, e.g. `train,user_fn:synth`. Default: all built in.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<String>,
    #[arg(long, default_value_t = forge_core::workflow::DEFAULT_LEASE_MS)]
    pub lease_ms: u64,
    #[arg(long, default_value_t = 50)]
    pub poll_ms: u64,
    /// Exit after finishing this many tasks.
    #[arg(long)]
    pub max_tasks: Option<usize>,
    /// Exit after this many seconds without work.
    #[arg(long)]
    pub idle_exit: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum MasterCommand {
    Run(MasterRunArgs),
}

#[derive(Debug, Args)]
pub struct MasterRunArgs {
    #[arg(long, default_value = "master")]
    pub id: String,
    #[arg(long, default_value_t = 5000)]
    pub lease_ms: u64,
    #[arg(long, default_value_t = 50)]
    pub poll_ms: u64,
    /// Run a single step and exit.
    #[arg(long)]
    pub once: bool,
    /// Exit once this plan has finished.
    #[arg(long)]
    pub until_plan: Option<String>,
    /// Exit after this many seconds.
    #[arg(long)]
    pub max_secs: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum EventsCommand {
    /// Print a model's training events.
    Dump(EventsDumpArgs),
}

#[derive(Debug, Args)]
pub struct EventsDumpArgs {
    pub model: String,
    /// Only events with this name.
    #[arg(long)]
    pub name: Option<String>,
    /// First step (inclusive).
    #[arg(long, default_value_t = 0)]
    pub from: u64,
    /// Last step (exclusive).
    #[arg(long, default_value_t = u64::MAX)]
    pub to: u64,
}
