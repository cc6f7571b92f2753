//! Command-line entry point: `run`, `skills`, `trace`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::backend::{EndpointConfig, HttpBackend, ModelBackend, ScriptedBackend, UsageLog};
use crate::config::RuntimeConfig;
use crate::planner::{RunSummary, Runtime, StopReason};
use crate::registry::Registry;
use crate::router::DelegatedTask;
use crate::session::{Event, Session, SessionStatus, SessionStore};

pub const EXIT_DONE: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_BUDGET: i32 = 2;

pub const USAGE_LOG_FILE: &str = "requests.jsonl";

#[derive(Debug, Parser)]
#[command(name = "skillrun", version, about = "Run tasks on the formal-skill agent runtime")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one task to quiescence.
    Run(RunArgs),
    /// List the skills in a skills directory.
    Skills {
        #[arg(long)]
        skills: PathBuf,
    },
    /// Print a session's typed history; without --session, list sessions.
    Trace {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        session: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub skills: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub workspace: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long = "task-type")]
    pub task_type: String,
    #[arg(long = "done-when", default_value = "")]
    pub done_when: String,
    /// Scripted backend: JSON list of steps.
    #[arg(long, conflicts_with = "http", required_unless_present = "http")]
    pub script: Option<PathBuf>,
    /// HTTP chat-completions backend configured from MODEL_BASE_URL,
    /// MODEL_API_KEY and MODEL_NAME.
    #[arg(long)]
    pub http: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Route the root task through the skill router instead of giving it
    /// orchestration tools only.
    #[arg(long = "route-root")]
    pub route_root: bool,
}

/// Parses `args` (including the program name) and runs; returns the exit
/// code and writes human output to `out`.
pub fn run_cli<I, T>(args: I, out: &mut String) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(out, "{e}");
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_DONE };
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args, out),
        Command::Skills { skills } => cmd_skills(&skills, out).map(|_| EXIT_DONE),
        Command::Trace { store, session } => cmd_trace(&store, session.as_deref(), out).map(|_| EXIT_DONE),
    };
    result.unwrap_or_else(|e| {
        let _ = writeln!(out, "error: {e}");
        EXIT_ERROR
    })
}

fn load_registry(dir: &Path) -> Result<Registry, String> {
    if !dir.is_dir() {
        return Err(format!("skills directory {} does not exist", dir.display()));
    }
    let mut registry = Registry::with_builtin_bindings();
    registry.load_dir(dir).map_err(|e| e.to_string())?;
    Ok(registry)
}

pub fn cmd_run(args: &RunArgs, out: &mut String) -> Result<i32, String> {
    let config = match &args.config {
        Some(p) => RuntimeConfig::from_file(p)?,
        None => RuntimeConfig::default(),
    };
    let registry = load_registry(&args.skills)?;
    if !args.workspace.is_dir() {
        return Err(format!("workspace {} does not exist", args.workspace.display()));
    }
    let store = SessionStore::open(&args.store).map_err(|e| e.to_string())?;
    let usage = UsageLog::open(args.store.join(USAGE_LOG_FILE)).map_err(|e| e.to_string())?;
    let backend: Box<dyn ModelBackend> = match &args.script {
        Some(path) => Box::new(ScriptedBackend::from_file(path)?),
        None => Box::new(HttpBackend::new(EndpointConfig::from_env()?).map_err(|e| e.to_string())?),
    };
    let runtime = Runtime::new(Arc::new(registry), store, backend, usage, config).map_err(|e| e.to_string())?;
    let task = DelegatedTask {
        task_text: args.task.clone(),
        task_type: args.task_type.clone(),
        workspace_root: args.workspace.clone(),
        done_when: args.done_when.clone(),
    };
    let root = runtime.start_session(task, args.route_root).map_err(|e| e.to_string())?;
    let summary = runtime.run_until_quiescent(runtime.config().planner.max_steps).map_err(|e| e.to_string())?;
    let store = runtime.store();
    print_summary(&summary, &store, out);
    let root_status = store.get(&root).map_err(|e| e.to_string())?.status;
    Ok(match (root_status, summary.stop) {
        (SessionStatus::Completed, _) => EXIT_DONE,
        (_, StopReason::StepBudgetExhausted) => EXIT_BUDGET,
        _ => EXIT_ERROR,
    })
}

/// The phase trail from the latest repair-state snapshot, if any.
pub fn phase_path(session: &Session) -> Vec<String> {
    session
        .snapshots
        .iter()
        .rev()
        .find_map(|s| s.state.get("phase_trail").and_then(|t| t.as_array()))
        .map(|t| t.iter().filter_map(|p| p.as_str().map(str::to_string)).collect())
        .unwrap_or_default()
}

fn print_summary(summary: &RunSummary, store: &SessionStore, out: &mut String) {
    let stop = match summary.stop {
        StopReason::Quiescent => "quiescent",
        StopReason::StepBudgetExhausted => "step budget exhausted",
    };
    let _ = writeln!(out, "steps: {} ({stop})", summary.steps);
    for s in &summary.sessions {
        let u = &s.usage;
        let _ = writeln!(
            out,
            "session {} parent={} status={} turns={} skills=[{}] usage: input={} output={} cache={} total={} requests={}",
            s.session_id,
            s.parent_id.as_deref().unwrap_or("-"),
            s.status.as_str(),
            s.turns,
            s.routed_skills.join(","),
            u.input_tokens,
            u.output_tokens,
            u.cache_tokens,
            u.total_tokens,
            u.request_count
        );
        if let Ok(session) = store.get(&s.session_id) {
            let phases = phase_path(session);
            if !phases.is_empty() {
                let _ = writeln!(out, "  phases: {}", phases.join(" -> "));
            }
        }
    }
}

pub fn cmd_skills(dir: &Path, out: &mut String) -> Result<(), String> {
    let registry = load_registry(dir)?;
    for skill in registry.skills() {
        let m = &skill.manifest;
        let tools: Vec<&str> = m.tools.iter().map(|t| t.name.as_str()).collect();
        let _ = writeln!(
            out,
            "{} {} tools=[{}] triggers=[{}] task_types=[{}]",
            m.skill_id,
            m.version,
            tools.join(", "),
            m.trigger_keywords.iter().cloned().collect::<Vec<_>>().join(", "),
            m.task_types.iter().cloned().collect::<Vec<_>>().join(", ")
        );
        for d in &skill.diagnostics {
            let _ = writeln!(out, "  note: {d}");
        }
    }
    Ok(())
}

fn clip(text: &str, n: usize) -> String {
    let one_line = text.replace('\n', " ");
    if one_line.chars().count() <= n {
        one_line
    } else {
        format!("{}...", one_line.chars().take(n).collect::<String>())
    }
}

pub fn cmd_trace(store_dir: &Path, session_id: Option<&str>, out: &mut String) -> Result<(), String> {
    if !store_dir.is_dir() {
        return Err(format!("store {} does not exist", store_dir.display()));
    }
    let store = SessionStore::open(store_dir).map_err(|e| e.to_string())?;
    let Some(id) = session_id else {
        for s in store.sessions() {
            let _ = writeln!(
                out,
                "{} parent={} status={} events={}",
                s.session_id,
                s.parent_id.as_deref().unwrap_or("-"),
                s.status.as_str(),
                s.history.len()
            );
        }
        return Ok(());
    };
    let session = store.get(id).map_err(|e| e.to_string())?;
    let _ = writeln!(out, "session {} status={} root={}", session.session_id, session.status.as_str(), session.workspace_root.display());
    let mut phases: std::collections::BTreeMap<&str, String> = Default::default();
    for ev in &session.history {
        let detail = match &ev.event {
            Event::UserMessage { text, source } => {
                format!("{}{}", source.as_deref().map(|s| format!("[{s}] ")).unwrap_or_default(), clip(text, 100))
            }
            Event::AssistantMessage { text, tool_call, usage } => {
                let call = tool_call.as_ref().map(|c| format!(" call={}", c.name)).unwrap_or_default();
                format!(
                    "{}{call} usage: input={} output={} total={}",
                    clip(text.as_deref().unwrap_or(""), 60),
                    usage.input_tokens,
                    usage.output_tokens,
                    usage.total_tokens
                )
            }
            Event::ToolCall { call_id, name, args } => format!("{call_id} {name} {}", clip(&args.to_string(), 80)),
            Event::ToolResult { call_id, name, ok, output } => {
                format!("{call_id} {name} ok={ok} {}", clip(&output.to_string(), 80))
            }
            Event::GuidanceInjection { skill_id, text, transient } => {
                format!("[{skill_id}{}] {}", if *transient { ", transient" } else { "" }, clip(text, 80))
            }
            Event::Completion { report } => clip(report, 100),
            Event::SystemNote { text } => clip(text, 100),
        };
        let _ = writeln!(out, "{:>4} {:<18} {detail}", ev.seq, ev.event.kind());
        for snap in session.snapshots.iter().filter(|s| s.seq == ev.seq) {
            if let Some(phase) = snap.state.get("phase").and_then(|p| p.as_str()) {
                let prev = phases.insert(snap.skill_id.as_str(), phase.to_string());
                if prev.as_deref() != Some(phase) {
                    let from = prev.unwrap_or_else(|| "start".into());
                    let _ = writeln!(out, "     phase [{}] {from} -> {phase}", snap.skill_id);
                }
            }
        }
    }
    let u = &session.usage;
    let _ = writeln!(
        out,
        "usage: input={} output={} cache={} total={} requests={}",
        u.input_tokens, u.output_tokens, u.cache_tokens, u.total_tokens, u.request_count
    );
    Ok(())
}
