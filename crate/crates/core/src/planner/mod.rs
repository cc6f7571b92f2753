//! Event-driven single-step planner.
//!
//! Each wakeup renders the session history into one model request, runs the
//! hook pipeline around that single decision and its (at most one) tool
//! effect, persists everything, and enqueues a follow-up when the session is
//! not done. Wakeups are FIFO; a session never has two wakeups in flight.

pub mod orchestration;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::{
    BackendError, ChatMessage, LogWriteError, ModelBackend, ModelRequest, ModelResponse, Role, ToolSpec, UsageLine, UsageLog,
};
use crate::config::RuntimeConfig;
use crate::hooks::{BoundHook, Continuation, HookFault, HookPipeline, PendingCall, ToolGate, ToolOutcome};
use crate::registry::{with_config_overrides, HookDeclaration, Registry, SkillManifest};
use crate::router::{self, DelegatedTask, RoutedSkillSet};
use crate::session::{Event, NewSession, Session, SessionStatus, SessionStore, StoreError, UsageTotals};
use crate::hooks::HookProgram;
use crate::workspace::{self, ToolContext, ToolError, ToolExecutor};
use orchestration::{TOOL_DELEGATE, TOOL_FINISH};

/// Skill id used for guidance the runtime itself injects.
pub const RUNTIME_SOURCE: &str = "runtime";
pub const CHILD_REPORT_SOURCE: &str = "child_report";

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    UsageLog(#[from] LogWriteError),
    #[error("skill configuration: {0}")]
    SkillConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WakeupCause {
    Initial,
    Followup,
    ForcedAction,
    ChildReport,
}

impl fmt::Display for WakeupCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WakeupCause::Initial => "initial",
            WakeupCause::Followup => "followup",
            WakeupCause::ForcedAction => "forced_action",
            WakeupCause::ChildReport => "child_report",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WakeupEvent {
    pub session_id: String,
    pub cause: WakeupCause,
    pub enqueue_seq: u64,
    /// 1-based attempt number for backend retries.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TurnOutcome {
    /// The session was closed by the time the wakeup ran.
    Skipped,
    ToolExecuted { name: String, ok: bool },
    ToolRefused { name: String, reason: String },
    Forced(String),
    FollowupScheduled,
    Completed,
    Blocked(Vec<String>),
    AwaitingChild(String),
    BackendRetry(String),
    SessionFailed(String),
    HookFault(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnRecord {
    pub session_id: String,
    pub cause: WakeupCause,
    pub outcome: TurnOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompletionOutcome {
    Completed { report: String },
    Blocked(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Quiescent,
    StepBudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub parent_id: Option<String>,
    pub status: SessionStatus,
    pub routed_skills: Vec<String>,
    /// Model calls made by this session.
    pub turns: usize,
    pub usage: UsageTotals,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub stop: StopReason,
    pub sessions: Vec<SessionSummary>,
}

impl RunSummary {
    pub fn session(&self, id: &str) -> Option<&SessionSummary> {
        self.sessions.iter().find(|s| s.session_id == id)
    }
}

#[derive(Default)]
struct WakeQueue {
    items: VecDeque<WakeupEvent>,
    next_seq: u64,
    in_flight: BTreeSet<String>,
}

/// A registered skill as this runtime sees it, with config overrides applied.
struct SkillView {
    manifest: SkillManifest,
    executors: BTreeMap<String, Arc<dyn ToolExecutor>>,
    hooks: Vec<(HookDeclaration, Arc<dyn HookProgram>)>,
}

pub struct Runtime {
    registry: Arc<Registry>,
    views: Vec<SkillView>,
    store: Mutex<SessionStore>,
    backend: Box<dyn ModelBackend>,
    usage: Mutex<UsageLog>,
    queue: Mutex<WakeQueue>,
    queue_changed: Condvar,
    config: RuntimeConfig,
    tool_filters: bool,
}

fn system_prompt(session: &Session) -> String {
    let done_when = if session.done_when.trim().is_empty() { "(not specified)" } else { session.done_when.as_str() };
    format!(
        "You are an agent working inside a sandboxed workspace. Paths are relative to the workspace root.\n\
         Call at most one tool per turn.\n\
         Task type: {}\n\
         Done when: {done_when}",
        session.task_type
    )
}

/// Renders the typed history as chat messages. Transient guidance is only
/// replayed into the turn that produced it.
pub fn render_messages(session: &Session) -> Vec<ChatMessage> {
    let last_assistant = session
        .history
        .iter()
        .rposition(|e| matches!(e.event, Event::AssistantMessage { .. }));
    let mut messages = vec![ChatMessage::new(Role::System, system_prompt(session))];
    for (i, ev) in session.history.iter().enumerate() {
        match &ev.event {
            Event::UserMessage { text, .. } => messages.push(ChatMessage::new(Role::User, text.clone())),
            Event::AssistantMessage { text, tool_call, .. } => {
                let mut out = text.clone().unwrap_or_default();
                if let Some(call) = tool_call {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    out.push_str(&format!("[call {}] {}", call.name, call.args));
                }
                messages.push(ChatMessage::new(Role::Assistant, out));
            }
            Event::ToolResult { name, ok, output, .. } => {
                messages.push(ChatMessage::new(Role::User, format!("[result {name} ok={ok}] {output}")));
            }
            Event::GuidanceInjection { text, transient, .. } => {
                if !transient || last_assistant.is_none_or(|a| i > a) {
                    messages.push(ChatMessage::new(Role::User, text.clone()));
                }
            }
            Event::ToolCall { .. } | Event::Completion { .. } | Event::SystemNote { .. } => {}
        }
    }
    messages
}

fn tool_error_output(e: &ToolError) -> Value {
    json!({"error": e.code(), "message": e.to_string()})
}

impl Runtime {
    pub fn new(
        registry: Arc<Registry>,
        store: SessionStore,
        backend: Box<dyn ModelBackend>,
        usage: UsageLog,
        config: RuntimeConfig,
    ) -> Result<Self, RuntimeError> {
        let empty = BTreeMap::new();
        let mut views = Vec::new();
        for skill in registry.skills() {
            let overrides = config.skills.get(&skill.manifest.skill_id).unwrap_or(&empty);
            let manifest = with_config_overrides(&skill.manifest, overrides)
                .map_err(|e| RuntimeError::SkillConfig(format!("{}: {e}", skill.manifest.skill_id)))?;
            views.push(SkillView { manifest, executors: skill.executors.clone(), hooks: skill.hook_programs.clone() });
        }
        if let Some(unknown) = config.skills.keys().find(|k| views.iter().all(|v| &v.manifest.skill_id != *k)) {
            return Err(RuntimeError::SkillConfig(format!("override for unknown skill `{unknown}`")));
        }
        Ok(Self {
            registry,
            views,
            store: Mutex::new(store),
            backend,
            usage: Mutex::new(usage),
            queue: Mutex::new(WakeQueue::default()),
            queue_changed: Condvar::new(),
            config,
            tool_filters: true,
        })
    }

    /// Disables phase tool filtering (ablation runs).
    pub fn with_tool_filters(mut self, enabled: bool) -> Self {
        self.tool_filters = enabled;
        self
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn store(&self) -> MutexGuard<'_, SessionStore> {
        self.store.lock().unwrap()
    }

    pub fn session(&self, id: &str) -> Result<Session, RuntimeError> {
        Ok(self.store().get(id)?.clone())
    }

    pub fn usage_lines(&self) -> Vec<UsageLine> {
        self.usage.lock().unwrap().lines().to_vec()
    }

    pub fn pending_wakeups(&self) -> Vec<WakeupEvent> {
        self.queue.lock().unwrap().items.iter().cloned().collect()
    }

    pub fn enqueue(&self, session_id: &str, cause: WakeupCause) -> u64 {
        self.enqueue_attempt(session_id, cause, 1)
    }

    fn enqueue_attempt(&self, session_id: &str, cause: WakeupCause, attempt: u32) -> u64 {
        let mut q = self.queue.lock().unwrap();
        q.next_seq += 1;
        let enqueue_seq = q.next_seq;
        q.items.push_back(WakeupEvent { session_id: session_id.to_string(), cause, enqueue_seq, attempt });
        self.queue_changed.notify_all();
        enqueue_seq
    }

    /// Creates a top-level session and enqueues its first wakeup. With
    /// `route`, the task is routed like a delegated sub-task.
    pub fn start_session(&self, task: DelegatedTask, route: bool) -> Result<String, RuntimeError> {
        let routed = if route { router::route(&self.registry, &task, &self.config.router).skill_ids() } else { Vec::new() };
        let id = self.store().create_session(NewSession {
            task_text: task.task_text,
            task_type: task.task_type,
            workspace_root: task.workspace_root,
            done_when: task.done_when,
            parent_id: None,
            routed_skills: routed,
        })?;
        self.enqueue(&id, WakeupCause::Initial);
        Ok(id)
    }

    /// Creates a child session for `task` with the routed skills attached
    /// and enqueues its first wakeup.
    pub fn spawn_subsession(&self, parent_id: &str, task: DelegatedTask, routed: &RoutedSkillSet) -> Result<String, RuntimeError> {
        let id = self.store().create_session(NewSession {
            task_text: task.task_text,
            task_type: task.task_type,
            workspace_root: task.workspace_root,
            done_when: task.done_when,
            parent_id: Some(parent_id.to_string()),
            routed_skills: routed.skill_ids(),
        })?;
        self.enqueue(&id, WakeupCause::Initial);
        Ok(id)
    }

    fn routed_views(&self, session: &Session) -> Vec<&SkillView> {
        self.views.iter().filter(|v| session.routed_skills.contains(&v.manifest.skill_id)).collect()
    }

    fn pipeline(&self, session: &Session) -> HookPipeline<'_> {
        let mut bound = Vec::new();
        for view in self.routed_views(session) {
            for (decl, program) in &view.hooks {
                bound.push(BoundHook {
                    skill_id: &view.manifest.skill_id,
                    program_id: &decl.program_id,
                    stage: decl.stage,
                    order: decl.order,
                    program: program.clone(),
                    policy: &view.manifest.policy,
                    config: &view.manifest.config,
                });
            }
        }
        HookPipeline::new(bound).with_tool_filters(self.tool_filters)
    }

    /// Orchestration tools followed by the routed skills' tools.
    pub fn candidate_tools(&self, session: &Session) -> Vec<ToolSpec> {
        let mut tools = orchestration::tool_specs();
        for view in self.routed_views(session) {
            tools.extend(view.manifest.tools.iter().map(|t| ToolSpec {
                name: t.name.clone(),
                description: t.description.clone(),
                params: t.params.to_json(),
            }));
        }
        tools
    }

    /// Tool names the next request would expose, from a dry run of
    /// `before_llm_call`. Nothing is persisted.
    pub fn preview_visible_tools(&self, session_id: &str) -> Result<Vec<String>, RuntimeError> {
        let session = self.session(session_id)?;
        let candidates = self.candidate_tools(&session);
        let before = self
            .pipeline(&session)
            .run_before_llm(&session, &self.config.workspace, &candidates)
            .map_err(|f| RuntimeError::SkillConfig(f.to_string()))?;
        Ok(before.visible_tools.into_iter().map(|t| t.name).collect())
    }

    fn append(&self, session_id: &str, event: Event) -> Result<u64, RuntimeError> {
        Ok(self.store().append_event(session_id, event)?)
    }

    fn note(&self, session_id: &str, text: String) -> Result<(), RuntimeError> {
        tracing::info!(session = session_id, "{text}");
        self.append(session_id, Event::SystemNote { text })?;
        Ok(())
    }

    fn guidance(&self, session_id: &str, skill_id: &str, text: String, transient: bool) -> Result<(), RuntimeError> {
        self.append(session_id, Event::GuidanceInjection { skill_id: skill_id.to_string(), text, transient })?;
        Ok(())
    }

    fn apply_states(&self, session_id: &str, updates: BTreeMap<String, Value>) -> Result<(), RuntimeError> {
        let mut store = self.store();
        for (skill, state) in updates {
            store.put_skill_state(session_id, &skill, state)?;
        }
        Ok(())
    }

    fn hook_fault(&self, session_id: &str, cause: WakeupCause, fault: HookFault) -> Result<TurnRecord, RuntimeError> {
        self.note(session_id, format!("hook fault: {fault}"))?;
        Ok(TurnRecord { session_id: session_id.to_string(), cause, outcome: TurnOutcome::HookFault(fault.to_string()) })
    }

    fn fail_session(&self, session_id: &str, reason: String) -> Result<(), RuntimeError> {
        self.note(session_id, format!("session failed: {reason}"))?;
        let parent = {
            let mut store = self.store();
            store.set_status(session_id, SessionStatus::Failed)?;
            store.get(session_id)?.parent_id.clone()
        };
        if let Some(parent) = parent {
            self.report_to_parent(&parent, format!("Sub-session {session_id} failed: {reason}"))?;
        }
        Ok(())
    }

    fn report_to_parent(&self, parent_id: &str, text: String) -> Result<(), RuntimeError> {
        {
            let mut store = self.store();
            if !store.get(parent_id)?.status.is_open() {
                tracing::warn!(parent = parent_id, "child report for a closed session dropped");
                return Ok(());
            }
            store.append_event(parent_id, Event::UserMessage { text, source: Some(CHILD_REPORT_SOURCE.to_string()) })?;
            store.set_status(parent_id, SessionStatus::Active)?;
        }
        self.enqueue(parent_id, WakeupCause::ChildReport);
        Ok(())
    }

    /// Completes the session unless a routed skill's gate is open; open gates
    /// are recorded as guidance and returned.
    pub fn complete_session(&self, session_id: &str, report: &str) -> Result<CompletionOutcome, RuntimeError> {
        let session = self.session(session_id)?;
        let reasons = self.pipeline(&session).completion_gates(&session);
        if !reasons.is_empty() {
            self.guidance(session_id, RUNTIME_SOURCE, format!("Completion blocked: {}", reasons.join("; ")), false)?;
            return Ok(CompletionOutcome::Blocked(reasons));
        }
        self.finalize(&session, report)?;
        Ok(CompletionOutcome::Completed { report: report.to_string() })
    }

    fn finalize(&self, session: &Session, report: &str) -> Result<(), RuntimeError> {
        {
            let mut store = self.store();
            store.append_event(&session.session_id, Event::Completion { report: report.to_string() })?;
            store.set_status(&session.session_id, SessionStatus::Completed)?;
        }
        if let Some(parent) = &session.parent_id {
            self.report_to_parent(parent, format!("Sub-session {} completed.\nReport: {report}", session.session_id))?;
        }
        Ok(())
    }

    fn build_request(&self, session: &Session, tools: Vec<ToolSpec>) -> ModelRequest {
        ModelRequest { session_id: session.session_id.clone(), messages: render_messages(session), tools }
    }

    /// One model decision plus at most one tool effect.
    pub fn run_wakeup(&self, event: &WakeupEvent) -> Result<TurnRecord, RuntimeError> {
        let sid = event.session_id.as_str();
        let record = |outcome| TurnRecord { session_id: sid.to_string(), cause: event.cause, outcome };
        let mut session = self.session(sid)?;
        if !session.status.is_open() {
            return Ok(record(TurnOutcome::Skipped));
        }
        if session.status == SessionStatus::AwaitingFollowup {
            self.store().set_status(sid, SessionStatus::Active)?;
        }
        let workspace = &self.config.workspace;
        let pipeline = self.pipeline(&session);

        // before_llm_call
        let candidates = self.candidate_tools(&session);
        let before = match pipeline.run_before_llm(&session, workspace, &candidates) {
            Ok(b) => b,
            Err(fault) => return self.hook_fault(sid, event.cause, fault),
        };
        self.apply_states(sid, before.state_updates)?;
        for (skill, text) in before.injected {
            self.guidance(sid, &skill, text, true)?;
        }
        let visible: BTreeSet<String> = before.visible_tools.iter().map(|t| t.name.clone()).collect();
        session = self.session(sid)?;
        let request = self.build_request(&session, before.visible_tools);

        // model call
        let response = match self.backend.complete(&request) {
            Ok(r) => r,
            Err(e) => return self.backend_failure(event, e),
        };
        self.usage.lock().unwrap().append(sid, &response)?;
        self.append(
            sid,
            Event::AssistantMessage {
                text: response.text.clone(),
                tool_call: response.tool_call.clone(),
                usage: response.usage.clone(),
            },
        )?;

        // after_llm_response
        session = self.session(sid)?;
        let after = match pipeline.run_after_llm(&session, workspace, &response) {
            Ok(a) => a,
            Err(fault) => return self.hook_fault(sid, event.cause, fault),
        };
        self.apply_states(sid, after.state_updates)?;
        for (skill, text) in after.injected {
            self.guidance(sid, &skill, text, false)?;
        }
        match after.decision {
            Continuation::ProceedToTool => self.run_tool_turn(event, &pipeline, &visible, &response),
            Continuation::ForceAction(tool) => {
                self.guidance(sid, RUNTIME_SOURCE, format!("You must now call {tool}."), false)?;
                self.enqueue(sid, WakeupCause::ForcedAction);
                Ok(record(TurnOutcome::Forced(tool)))
            }
            Continuation::ScheduleFollowup => {
                self.enqueue(sid, WakeupCause::Followup);
                Ok(record(TurnOutcome::FollowupScheduled))
            }
            Continuation::AllowFinish => {
                let report = response.text.clone().unwrap_or_default();
                match self.complete_session(sid, &report)? {
                    CompletionOutcome::Completed { .. } => Ok(record(TurnOutcome::Completed)),
                    CompletionOutcome::Blocked(reasons) => {
                        self.enqueue(sid, WakeupCause::Followup);
                        Ok(record(TurnOutcome::Blocked(reasons)))
                    }
                }
            }
        }
    }

    fn backend_failure(&self, event: &WakeupEvent, error: BackendError) -> Result<TurnRecord, RuntimeError> {
        let sid = event.session_id.as_str();
        let record = |outcome| TurnRecord { session_id: sid.to_string(), cause: event.cause, outcome };
        if error.retryable() && event.attempt < self.config.planner.backend_retries {
            self.note(sid, format!("model backend error (attempt {}): {error}", event.attempt))?;
            self.enqueue_attempt(sid, event.cause, event.attempt + 1);
            return Ok(record(TurnOutcome::BackendRetry(error.to_string())));
        }
        let reason = format!("model backend error: {error}");
        self.fail_session(sid, reason.clone())?;
        Ok(record(TurnOutcome::SessionFailed(reason)))
    }

    fn refuse(
        &self,
        event: &WakeupEvent,
        call_id: &str,
        name: &str,
        output: Value,
    ) -> Result<TurnRecord, RuntimeError> {
        let sid = event.session_id.as_str();
        let reason = output.get("message").or_else(|| output.get("reason")).and_then(Value::as_str).unwrap_or("refused").to_string();
        self.append(sid, Event::ToolResult { call_id: call_id.to_string(), name: name.to_string(), ok: false, output })?;
        self.enqueue(sid, WakeupCause::Followup);
        Ok(TurnRecord {
            session_id: sid.to_string(),
            cause: event.cause,
            outcome: TurnOutcome::ToolRefused { name: name.to_string(), reason },
        })
    }

    fn run_tool_turn(
        &self,
        event: &WakeupEvent,
        pipeline: &HookPipeline<'_>,
        visible: &BTreeSet<String>,
        response: &ModelResponse,
    ) -> Result<TurnRecord, RuntimeError> {
        let sid = event.session_id.as_str();
        let record = |outcome| TurnRecord { session_id: sid.to_string(), cause: event.cause, outcome };
        let call = response.tool_call.as_ref().expect("proceed_to_tool implies a tool call");
        let name = call.name.as_str();
        let mut session = self.session(sid)?;
        let call_id = format!("{sid}-c{}", session.last_seq() + 1);
        let workspace = &self.config.workspace;

        let record_raw_call = |this: &Self| {
            this.append(sid, Event::ToolCall { call_id: call_id.clone(), name: name.to_string(), args: call.args.clone() })
        };
        if !visible.contains(name) {
            record_raw_call(self)?;
            return self.refuse(event, &call_id, name, json!({"error": "tool_not_visible", "message": format!("tool `{name}` is not available now")}));
        }
        let owner = self.routed_views(&session).into_iter().find(|v| v.manifest.tool(name).is_some());
        let validated = if orchestration::is_orchestration_tool(name) {
            orchestration::validate_args(name, &call.args)
        } else if let Some(view) = owner {
            crate::registry::validate_action_args(view.manifest.tool(name).expect("owner has tool"), &call.args)
        } else {
            record_raw_call(self)?;
            return self.refuse(event, &call_id, name, json!({"error": "unknown_tool", "message": format!("unknown tool `{name}`")}));
        };
        let args = match validated {
            Ok(v) => v.0,
            Err(errors) => {
                record_raw_call(self)?;
                let details: Vec<Value> = errors.iter().map(|e| json!({"path": e.path, "reason": e.reason})).collect();
                let message = errors.iter().map(|e| format!("{}: {}", e.path, e.reason)).collect::<Vec<_>>().join("; ");
                return self.refuse(event, &call_id, name, json!({"error": "invalid_args", "message": message, "details": details}));
            }
        };
        self.append(sid, Event::ToolCall { call_id: call_id.clone(), name: name.to_string(), args: args.clone() })?;

        // before_tool_call
        session = self.session(sid)?;
        let pending = PendingCall { call_id: call_id.clone(), name: name.to_string(), args };
        let before = match pipeline.run_before_tool(&session, workspace, &pending) {
            Ok(b) => b,
            Err(fault) => return self.hook_fault(sid, event.cause, fault),
        };
        self.apply_states(sid, before.state_updates)?;
        let args = match before.gate {
            ToolGate::Allow { args } => args,
            ToolGate::Reject { skill_id, rejection } => {
                return self.refuse(
                    event,
                    &call_id,
                    name,
                    json!({
                        "error": "rejected",
                        "skill_id": skill_id,
                        "reason": rejection.reason,
                        "redirect_hint": rejection.redirect_hint,
                    }),
                );
            }
            ToolGate::BlockCompletion { skill_id, reasons } => {
                return self.refuse(
                    event,
                    &call_id,
                    name,
                    json!({"error": "completion_blocked", "skill_id": skill_id, "reason": reasons.join("; "), "reasons": reasons}),
                );
            }
        };

        // execution
        session = self.session(sid)?;
        match name {
            TOOL_FINISH => {
                let reasons = pipeline.completion_gates(&session);
                if !reasons.is_empty() {
                    return self.refuse(
                        event,
                        &call_id,
                        name,
                        json!({"error": "completion_blocked", "reason": reasons.join("; "), "reasons": reasons}),
                    );
                }
                let report = args["report_text"].as_str().unwrap_or_default().to_string();
                self.append(sid, Event::ToolResult { call_id, name: name.to_string(), ok: true, output: json!({"status": "completed"}) })?;
                let session = self.session(sid)?;
                self.finalize(&session, &report)?;
                return Ok(record(TurnOutcome::Completed));
            }
            TOOL_DELEGATE => return self.delegate(event, &session, &call_id, &args),
            _ => {}
        }
        let skill_view = self.routed_views(&session).into_iter().find(|v| v.manifest.tool(name).is_some());
        let ctx = ToolContext {
            session: &session,
            skill_id: skill_view.map(|v| v.manifest.skill_id.as_str()),
            policy: skill_view.map(|v| &v.manifest.policy),
            skill_config: skill_view.map(|v| &v.manifest.config),
            workspace,
        };
        let result = match skill_view {
            Some(view) => view.executors[name].execute(&ctx, &args),
            None => orchestration::executor(name).expect("visible orchestration tool").execute(&ctx, &args),
        };
        let (ok, output) = match result {
            Ok(v) => (true, v),
            Err(e) => (false, tool_error_output(&e)),
        };
        let seq = self.append(sid, Event::ToolResult { call_id: call_id.clone(), name: name.to_string(), ok, output: output.clone() })?;

        // after_tool_call
        session = self.session(sid)?;
        let outcome = ToolOutcome { call_id, name: name.to_string(), args, ok, output, seq };
        let after = match pipeline.run_after_tool(&session, workspace, &outcome) {
            Ok(a) => a,
            Err(fault) => return self.hook_fault(sid, event.cause, fault),
        };
        self.apply_states(sid, after.state_updates)?;
        for (skill, text) in after.injected {
            self.guidance(sid, &skill, text, false)?;
        }
        if let Some(tool) = after.force_action {
            self.guidance(sid, RUNTIME_SOURCE, format!("You must now call {tool}."), false)?;
            self.enqueue(sid, WakeupCause::ForcedAction);
        } else {
            self.enqueue(sid, WakeupCause::Followup);
        }
        Ok(record(TurnOutcome::ToolExecuted { name: name.to_string(), ok }))
    }

    fn delegate(&self, event: &WakeupEvent, parent: &Session, call_id: &str, args: &Value) -> Result<TurnRecord, RuntimeError> {
        let sid = parent.session_id.as_str();
        let subdir = args["subdir"].as_str().unwrap_or(".");
        let root: PathBuf = match workspace::resolve(&parent.workspace_root, subdir) {
            Ok(p) => p.resolved,
            Err(e) => return self.refuse(event, call_id, TOOL_DELEGATE, tool_error_output(&e)),
        };
        if let Err(e) = std::fs::create_dir_all(&root) {
            return self.refuse(event, call_id, TOOL_DELEGATE, tool_error_output(&ToolError::from(e)));
        }
        let task = DelegatedTask {
            task_text: args["task_text"].as_str().unwrap_or_default().to_string(),
            task_type: args["task_type"].as_str().unwrap_or_default().to_string(),
            workspace_root: root,
            done_when: args["done_when"].as_str().unwrap_or_default().to_string(),
        };
        let routed = router::route(&self.registry, &task, &self.config.router);
        let child = match self.spawn_subsession(sid, task, &routed) {
            Ok(c) => c,
            Err(RuntimeError::Store(e)) => {
                return self.refuse(event, call_id, TOOL_DELEGATE, json!({"error": "spawn_failed", "message": e.to_string()}))
            }
            Err(e) => return Err(e),
        };
        let output = json!({
            "status": "pending",
            "child_session_id": child,
            "routed_skills": routed.skill_ids(),
        });
        let mut store = self.store();
        store.append_event(sid, Event::ToolResult { call_id: call_id.to_string(), name: TOOL_DELEGATE.to_string(), ok: true, output })?;
        store.set_status(sid, SessionStatus::AwaitingFollowup)?;
        Ok(TurnRecord { session_id: sid.to_string(), cause: event.cause, outcome: TurnOutcome::AwaitingChild(child) })
    }

    fn claim(&self, steps: &AtomicUsize, max_steps: usize, abort: &AtomicBool) -> Option<WakeupEvent> {
        let mut q = self.queue.lock().unwrap();
        loop {
            if abort.load(Ordering::SeqCst) || steps.load(Ordering::SeqCst) >= max_steps {
                return None;
            }
            let pos = q.items.iter().position(|e| !q.in_flight.contains(&e.session_id));
            if let Some(pos) = pos {
                let event = q.items.remove(pos).expect("position is valid");
                q.in_flight.insert(event.session_id.clone());
                steps.fetch_add(1, Ordering::SeqCst);
                return Some(event);
            }
            if q.in_flight.is_empty() {
                return None;
            }
            q = self.queue_changed.wait(q).unwrap();
        }
    }

    fn release(&self, session_id: &str) {
        let mut q = self.queue.lock().unwrap();
        q.in_flight.remove(session_id);
        self.queue_changed.notify_all();
    }

    /// Drains wakeups FIFO until the queue is empty or `max_steps` wakeups
    /// have run.
    pub fn run_until_quiescent(&self, max_steps: usize) -> Result<RunSummary, RuntimeError> {
        let steps = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let failure: Mutex<Option<RuntimeError>> = Mutex::new(None);
        let workers = if self.config.planner.single_worker {
            1
        } else {
            std::thread::available_parallelism().map_or(2, |n| n.get())
        };
        let work = || {
            while let Some(event) = self.claim(&steps, max_steps, &abort) {
                let result = self.run_wakeup(&event);
                self.release(&event.session_id);
                if let Err(e) = result {
                    abort.store(true, Ordering::SeqCst);
                    failure.lock().unwrap().get_or_insert(e);
                    self.queue_changed.notify_all();
                }
            }
        };
        if workers == 1 {
            work();
        } else {
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(work);
                }
            });
        }
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        let pending: BTreeSet<String> = self.queue.lock().unwrap().items.iter().map(|e| e.session_id.clone()).collect();
        let stop = if pending.is_empty() { StopReason::Quiescent } else { StopReason::StepBudgetExhausted };
        {
            let mut store = self.store();
            for id in &pending {
                if store.get(id)?.status.is_open() {
                    store.set_status(id, SessionStatus::AwaitingFollowup)?;
                }
            }
        }
        Ok(RunSummary { steps: steps.into_inner(), stop, sessions: self.summaries() })
    }

    pub fn summaries(&self) -> Vec<SessionSummary> {
        self.store()
            .sessions()
            .map(|s| SessionSummary {
                session_id: s.session_id.clone(),
                parent_id: s.parent_id.clone(),
                status: s.status,
                routed_skills: s.routed_skills.clone(),
                turns: s.history.iter().filter(|e| matches!(e.event, Event::AssistantMessage { .. })).count(),
                usage: s.usage.clone(),
            })
            .collect()
    }
}
