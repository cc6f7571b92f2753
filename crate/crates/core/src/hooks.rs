//! The four-stage hook pipeline.
//!
//! Hook programs run synchronously at `before_llm_call`, `after_llm_response`,
//! `before_tool_call` and `after_tool_call`. Each returns a [`HookDecision`];
//! this module checks that the decision is legal for its stage and composes
//! the decisions of all hooks bound to a session into one effect. Hooks run
//! in skill registration order, then by declared `order`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{ModelResponse, ToolSpec};
use crate::registry::PolicyConfig;
use crate::session::Session;
use crate::workspace::WorkspaceConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookStage {
    BeforeLlmCall,
    AfterLlmResponse,
    BeforeToolCall,
    AfterToolCall,
}

impl fmt::Display for HookStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HookStage::BeforeLlmCall => "before_llm_call",
            HookStage::AfterLlmResponse => "after_llm_response",
            HookStage::BeforeToolCall => "before_tool_call",
            HookStage::AfterToolCall => "after_tool_call",
        })
    }
}

/// A validated tool call awaiting the `before_tool_call` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingCall {
    pub call_id: String,
    pub name: String,
    pub args: Value,
}

/// The recorded result of an executed (or refused) tool call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolOutcome {
    pub call_id: String,
    pub name: String,
    pub args: Value,
    pub ok: bool,
    pub output: Value,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy)]
pub enum StagePayload<'a> {
    DraftRequest { candidate_tools: &'a [ToolSpec] },
    ModelResponse(&'a ModelResponse),
    PendingCall(&'a PendingCall),
    ToolResult(&'a ToolOutcome),
}

pub struct HookContext<'a> {
    pub session: &'a Session,
    pub skill_id: &'a str,
    /// The hook's own skill state; other skills' state is not reachable.
    pub state: &'a Value,
    pub stage: HookStage,
    pub payload: StagePayload<'a>,
    pub policy: &'a PolicyConfig,
    pub config: &'a BTreeMap<String, Value>,
    pub workspace: &'a WorkspaceConfig,
}

impl HookContext<'_> {
    pub fn done_when(&self) -> &str {
        &self.session.done_when
    }
}

/// Inputs to a skill's completion gate.
pub struct GateContext<'a> {
    pub session: &'a Session,
    pub skill_id: &'a str,
    pub state: &'a Value,
    pub policy: &'a PolicyConfig,
    pub config: &'a BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub reason: String,
    pub redirect_hint: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookDecision {
    pub tool_filter: Option<BTreeSet<String>>,
    pub injected_messages: Vec<String>,
    pub reject: Option<Rejection>,
    /// Replacement arguments for the pending call (`before_tool_call` only).
    pub rewrite_args: Option<Value>,
    pub force_action: Option<String>,
    pub schedule_followup: bool,
    pub block_completion: Option<Vec<String>>,
    pub state_update: Option<Value>,
}

impl HookDecision {
    pub fn none() -> Self {
        Self::default()
    }

    /// Returns the first field that is not legal at `stage`.
    fn illegal_field(&self, stage: HookStage) -> Option<&'static str> {
        use HookStage::*;
        if self.reject.is_some() && stage != BeforeToolCall {
            return Some("reject");
        }
        if self.rewrite_args.is_some() && stage != BeforeToolCall {
            return Some("rewrite_args");
        }
        if self.tool_filter.is_some() && stage != BeforeLlmCall {
            return Some("tool_filter");
        }
        if self.force_action.is_some() && !matches!(stage, AfterLlmResponse | AfterToolCall) {
            return Some("force_action");
        }
        if self.schedule_followup && !matches!(stage, AfterLlmResponse | AfterToolCall) {
            return Some("schedule_followup");
        }
        None
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("hook `{program_id}` of skill `{skill_id}` failed at {stage}: {message}")]
pub struct HookFault {
    pub skill_id: String,
    pub program_id: String,
    pub stage: HookStage,
    pub message: String,
}

/// A deterministic boundary program bound to a manifest `program_id`.
pub trait HookProgram: Send + Sync {
    fn run(&self, ctx: &HookContext<'_>) -> Result<HookDecision, String>;

    /// Open completion-gate reasons for this skill; empty means the skill
    /// does not object to completion.
    fn completion_gate(&self, _ctx: &GateContext<'_>) -> Vec<String> {
        Vec::new()
    }
}

/// One hook bound to a session, with the skill data it runs against.
#[derive(Clone)]
pub struct BoundHook<'a> {
    pub skill_id: &'a str,
    pub program_id: &'a str,
    pub stage: HookStage,
    pub order: i64,
    pub program: Arc<dyn HookProgram>,
    pub policy: &'a PolicyConfig,
    pub config: &'a BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Continuation {
    ProceedToTool,
    ForceAction(String),
    ScheduleFollowup,
    AllowFinish,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BeforeLlmOutcome {
    pub visible_tools: Vec<ToolSpec>,
    /// `(skill_id, text)` in hook order; rendered as user-role messages.
    pub injected: Vec<(String, String)>,
    pub state_updates: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AfterLlmOutcome {
    pub decision: Continuation,
    pub block_reasons: Vec<String>,
    pub injected: Vec<(String, String)>,
    pub state_updates: BTreeMap<String, Value>,
    /// Later hooks whose non-proceed decision lost to an earlier one.
    pub conflicts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToolGate {
    Allow { args: Value },
    Reject { skill_id: String, rejection: Rejection },
    BlockCompletion { skill_id: String, reasons: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeforeToolOutcome {
    pub gate: ToolGate,
    pub state_updates: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AfterToolOutcome {
    pub state_updates: BTreeMap<String, Value>,
    pub followup_needed: bool,
    pub gate_reasons: Vec<String>,
    pub force_action: Option<String>,
    pub injected: Vec<(String, String)>,
}

/// The hooks bound to one session, sorted into execution order.
pub struct HookPipeline<'a> {
    hooks: Vec<BoundHook<'a>>,
    apply_tool_filters: bool,
}

impl<'a> HookPipeline<'a> {
    /// `hooks` must already be in skill registration order; the sort on
    /// `order` within a skill is stable.
    pub fn new(mut hooks: Vec<BoundHook<'a>>) -> Self {
        let skill_rank: Vec<&str> = {
            let mut seen = Vec::new();
            for h in &hooks {
                if !seen.contains(&h.skill_id) {
                    seen.push(h.skill_id);
                }
            }
            seen
        };
        hooks.sort_by_key(|h| (skill_rank.iter().position(|s| *s == h.skill_id), h.order));
        Self { hooks, apply_tool_filters: true }
    }

    /// Disables `tool_filter` composition (ablation runs); every other
    /// decision field still applies.
    pub fn with_tool_filters(mut self, enabled: bool) -> Self {
        self.apply_tool_filters = enabled;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub fn hooks(&self) -> &[BoundHook<'a>] {
        &self.hooks
    }

    fn run_stage(
        &self,
        session: &Session,
        workspace: &WorkspaceConfig,
        stage: HookStage,
        payload: StagePayload<'_>,
        states: &mut BTreeMap<String, Value>,
        mut visit: impl FnMut(&BoundHook<'a>, HookDecision) -> bool,
    ) -> Result<(), HookFault> {
        for hook in self.hooks.iter().filter(|h| h.stage == stage) {
            let state = states
                .get(hook.skill_id)
                .cloned()
                .unwrap_or_else(|| session.skill_state(hook.skill_id));
            let ctx = HookContext {
                session,
                skill_id: hook.skill_id,
                state: &state,
                stage,
                payload,
                policy: hook.policy,
                config: hook.config,
                workspace,
            };
            let fault = |message: String| HookFault {
                skill_id: hook.skill_id.to_string(),
                program_id: hook.program_id.to_string(),
                stage,
                message,
            };
            let mut decision = hook.program.run(&ctx).map_err(fault)?;
            if let Some(field) = decision.illegal_field(stage) {
                return Err(fault(format!("decision field `{field}` is not allowed at {stage}")));
            }
            if let Some(update) = decision.state_update.take() {
                states.insert(hook.skill_id.to_string(), update);
            }
            if !visit(hook, decision) {
                break;
            }
        }
        Ok(())
    }

    pub fn run_before_llm(
        &self,
        session: &Session,
        workspace: &WorkspaceConfig,
        candidate_tools: &[ToolSpec],
    ) -> Result<BeforeLlmOutcome, HookFault> {
        let mut states = BTreeMap::new();
        let mut filter: Option<BTreeSet<String>> = None;
        let mut injected = Vec::new();
        let apply = self.apply_tool_filters;
        self.run_stage(
            session,
            workspace,
            HookStage::BeforeLlmCall,
            StagePayload::DraftRequest { candidate_tools },
            &mut states,
            |hook, decision| {
                if let (true, Some(f)) = (apply, decision.tool_filter) {
                    filter = Some(match filter.take() {
                        Some(acc) => acc.intersection(&f).cloned().collect(),
                        None => f,
                    });
                }
                injected.extend(decision.injected_messages.into_iter().map(|m| (hook.skill_id.to_string(), m)));
                true
            },
        )?;
        let visible_tools = candidate_tools
            .iter()
            .filter(|t| filter.as_ref().is_none_or(|f| f.contains(&t.name)))
            .cloned()
            .collect();
        Ok(BeforeLlmOutcome { visible_tools, injected, state_updates: states })
    }

    pub fn run_after_llm(
        &self,
        session: &Session,
        workspace: &WorkspaceConfig,
        response: &ModelResponse,
    ) -> Result<AfterLlmOutcome, HookFault> {
        let mut states = BTreeMap::new();
        let mut decision: Option<Continuation> = None;
        let mut block_reasons = Vec::new();
        let mut injected = Vec::new();
        let mut conflicts = Vec::new();
        self.run_stage(
            session,
            workspace,
            HookStage::AfterLlmResponse,
            StagePayload::ModelResponse(response),
            &mut states,
            |hook, d| {
                injected.extend(d.injected_messages.into_iter().map(|m| (hook.skill_id.to_string(), m)));
                if let Some(reasons) = d.block_completion {
                    block_reasons.extend(reasons);
                }
                let wanted = match (d.force_action, d.schedule_followup) {
                    (Some(tool), _) => Some(Continuation::ForceAction(tool)),
                    (None, true) => Some(Continuation::ScheduleFollowup),
                    (None, false) => None,
                };
                match (&decision, wanted) {
                    (None, Some(w)) => decision = Some(w),
                    (Some(first), Some(w)) if *first != w => {
                        conflicts.push(format!("{}: {:?} ignored in favour of {:?}", hook.skill_id, w, first));
                    }
                    _ => {}
                }
                true
            },
        )?;
        let decision = match decision {
            Some(d) => d,
            None if response.tool_call.is_some() => Continuation::ProceedToTool,
            None if !block_reasons.is_empty() => Continuation::ScheduleFollowup,
            None => Continuation::AllowFinish,
        };
        for c in &conflicts {
            tracing::warn!(session = %session.session_id, "hook conflict: {c}");
        }
        Ok(AfterLlmOutcome { decision, block_reasons, injected, state_updates: states, conflicts })
    }

    /// Runs `before_tool_call` hooks; the first rejection short-circuits.
    pub fn run_before_tool(
        &self,
        session: &Session,
        workspace: &WorkspaceConfig,
        call: &PendingCall,
    ) -> Result<BeforeToolOutcome, HookFault> {
        let mut states = BTreeMap::new();
        let mut current = call.clone();
        let mut gate = None;
        for hook in self.hooks.iter().filter(|h| h.stage == HookStage::BeforeToolCall) {
            let single = HookPipeline { hooks: vec![hook.clone()], apply_tool_filters: true };
            let mut rewrite = None;
            single.run_stage(
                session,
                workspace,
                HookStage::BeforeToolCall,
                StagePayload::PendingCall(&current),
                &mut states,
                |hook, d| {
                    if let Some(rejection) = d.reject {
                        gate = Some(ToolGate::Reject { skill_id: hook.skill_id.to_string(), rejection });
                    } else if let Some(reasons) = d.block_completion.filter(|r| !r.is_empty()) {
                        gate = Some(ToolGate::BlockCompletion { skill_id: hook.skill_id.to_string(), reasons });
                    } else {
                        rewrite = d.rewrite_args;
                    }
                    true
                },
            )?;
            if let Some(args) = rewrite {
                current.args = args;
            }
            if gate.is_some() {
                break;
            }
        }
        Ok(BeforeToolOutcome { gate: gate.unwrap_or(ToolGate::Allow { args: current.args }), state_updates: states })
    }

    pub fn run_after_tool(
        &self,
        session: &Session,
        workspace: &WorkspaceConfig,
        outcome: &ToolOutcome,
    ) -> Result<AfterToolOutcome, HookFault> {
        let mut states = BTreeMap::new();
        let mut out = AfterToolOutcome::default();
        self.run_stage(
            session,
            workspace,
            HookStage::AfterToolCall,
            StagePayload::ToolResult(outcome),
            &mut states,
            |hook, d| {
                out.injected.extend(d.injected_messages.into_iter().map(|m| (hook.skill_id.to_string(), m)));
                if d.schedule_followup {
                    out.followup_needed = true;
                }
                if let Some(reasons) = d.block_completion.filter(|r| !r.is_empty()) {
                    out.followup_needed = true;
                    out.gate_reasons.extend(reasons);
                }
                if out.force_action.is_none() {
                    out.force_action = d.force_action;
                }
                true
            },
        )?;
        out.state_updates = states;
        Ok(out)
    }

    /// Collects open completion-gate reasons across every bound skill.
    /// A skill with several hook programs is asked once per program.
    pub fn completion_gates(&self, session: &Session) -> Vec<String> {
        let mut reasons = Vec::new();
        let mut asked: BTreeSet<(&str, &str)> = BTreeSet::new();
        for hook in &self.hooks {
            if !asked.insert((hook.skill_id, hook.program_id)) {
                continue;
            }
            let state = session.skill_state(hook.skill_id);
            let ctx = GateContext {
                session,
                skill_id: hook.skill_id,
                state: &state,
                policy: hook.policy,
                config: hook.config,
            };
            for reason in hook.program.completion_gate(&ctx) {
                if !reasons.contains(&reason) {
                    reasons.push(reason);
                }
            }
        }
        reasons
    }
}
