//! The four repair hook programs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde_json::Value;

use super::artifacts::{completion_gate, infer_required_artifacts, normalize_relative, DEFAULT_ARTIFACT_EXTENSIONS};
use super::patch;
use super::state::{is_edge, LastTool, Phase, RepairState};
use super::tools::{parse_checks, CheckType, EvidenceSource};
use super::{TOOL_ARTIFACT, TOOL_EVIDENCE, TOOL_PATCH, TOOL_VERIFY};
use crate::hooks::{GateContext, HookContext, HookDecision, HookProgram, Rejection, StagePayload};
use crate::planner::orchestration::{TOOL_FINISH, TOOL_WRITE};
use crate::registry::PolicyConfig;
use crate::session::Session;
use crate::workspace::{self, ToolContext};

pub const CHECK_FAILED_PREFIX: &str = "check failed: ";

pub fn artifact_extensions(config: &BTreeMap<String, Value>) -> Vec<String> {
    config
        .get("artifact_extensions")
        .and_then(|v| serde_json::from_value::<Vec<String>>(v.clone()).ok())
        .unwrap_or_else(|| DEFAULT_ARTIFACT_EXTENSIONS.iter().map(|s| s.to_string()).collect())
}

pub fn contextual_diagnosis(config: &BTreeMap<String, Value>) -> bool {
    config.get("contextual_diagnosis").and_then(Value::as_bool).unwrap_or(false)
}

/// Reads the stored state and refreshes the artifacts required by
/// `done_when`.
pub fn load_state(state: &Value, session: &Session, config: &BTreeMap<String, Value>) -> Result<RepairState, String> {
    let mut s = RepairState::from_value(state)?;
    s.required_artifacts = infer_required_artifacts(&session.done_when, &artifact_extensions(config));
    s.prune_produced(&session.workspace_root);
    Ok(s)
}

fn step(state: &mut RepairState, to: Phase) -> Result<(), String> {
    if !is_edge(state.phase, to) {
        return Err(format!("illegal phase transition {} -> {to}", state.phase));
    }
    state.transition(to);
    Ok(())
}

/// Gate reasons plus the names of checks that failed the last verification.
fn refresh_gate_reasons(state: &mut RepairState, root: &Path) {
    let carried: Vec<String> = if state.verification_passed {
        Vec::new()
    } else {
        state.gate_fail_reasons.iter().filter(|r| r.starts_with(CHECK_FAILED_PREFIX)).cloned().collect()
    };
    state.gate_fail_reasons = completion_gate(state, root);
    state.gate_fail_reasons.extend(carried);
}

fn update_if_changed(before: &Value, state: &RepairState) -> Option<Value> {
    let after = state.to_value();
    (after != *before).then_some(after)
}

fn gate(ctx: &GateContext<'_>) -> Vec<String> {
    match load_state(ctx.state, ctx.session, ctx.config) {
        Ok(s) => completion_gate(&s, &ctx.session.workspace_root),
        Err(e) => vec![e],
    }
}

/// The tool names this skill leaves visible in `phase`.
pub fn phase_filter(phase: Phase) -> BTreeSet<String> {
    phase
        .visible_repair_tools()
        .iter()
        .chain(phase.visible_orchestration_tools())
        .map(|s| s.to_string())
        .collect()
}

pub fn workflow_message(phase: Phase, visible: &[String], required: &[String]) -> String {
    let required = if required.is_empty() { "none".to_string() } else { required.join(", ") };
    format!(
        "Repair phase: {phase}\n\
         Visible tools: {}\n\
         Workflow: reproduce -> patch -> verify -> report\n\
         Completion is blocked until {TOOL_VERIFY} has passed.\n\
         Required artifacts: {required}\n\
         Edit code only through {TOOL_PATCH}.\n\
         Verification checks are {{name,type,args}} with type one of command_exit_zero, file_exists, file_contains, output_matches.",
        visible.join(", ")
    )
}

pub struct BeforeLlm;

impl HookProgram for BeforeLlm {
    fn run(&self, ctx: &HookContext<'_>) -> Result<HookDecision, String> {
        let state = load_state(ctx.state, ctx.session, ctx.config)?;
        let filter = phase_filter(state.phase);
        let visible: Vec<String> = match ctx.payload {
            StagePayload::DraftRequest { candidate_tools } => {
                candidate_tools.iter().filter(|t| filter.contains(&t.name)).map(|t| t.name.clone()).collect()
            }
            _ => filter.iter().cloned().collect(),
        };
        Ok(HookDecision {
            injected_messages: vec![workflow_message(state.phase, &visible, &state.required_artifacts)],
            state_update: update_if_changed(ctx.state, &state),
            tool_filter: Some(filter),
            ..Default::default()
        })
    }

    fn completion_gate(&self, ctx: &GateContext<'_>) -> Vec<String> {
        gate(ctx)
    }
}

pub struct AfterLlm;

impl HookProgram for AfterLlm {
    fn run(&self, ctx: &HookContext<'_>) -> Result<HookDecision, String> {
        let StagePayload::ModelResponse(response) = ctx.payload else {
            return Ok(HookDecision::none());
        };
        if response.tool_call.is_some() {
            return Ok(HookDecision::none());
        }
        let state = load_state(ctx.state, ctx.session, ctx.config)?;
        let force = |tool: &str| HookDecision { force_action: Some(tool.to_string()), ..Default::default() };
        Ok(match state.phase {
            Phase::Reproduce => force(TOOL_EVIDENCE),
            Phase::Verify => force(TOOL_VERIFY),
            phase => {
                let reasons = completion_gate(&state, &ctx.session.workspace_root);
                if reasons.is_empty() {
                    HookDecision::none()
                } else {
                    let next = phase.visible_repair_tools().join(", ");
                    HookDecision {
                        injected_messages: vec![format!(
                            "Completion blocked in phase {phase}: {}. Continue with {next}.",
                            reasons.join("; ")
                        )],
                        schedule_followup: true,
                        block_completion: Some(reasons),
                        ..Default::default()
                    }
                }
            }
        })
    }

    fn completion_gate(&self, ctx: &GateContext<'_>) -> Vec<String> {
        gate(ctx)
    }
}

fn reject(reason: impl Into<String>) -> HookDecision {
    HookDecision { reject: Some(Rejection { reason: reason.into(), redirect_hint: None }), ..Default::default() }
}

fn protected_redirect(target: &str, glob: &str, policy: &PolicyConfig) -> HookDecision {
    HookDecision {
        reject: Some(Rejection {
            reason: format!("`{target}` is protected by `{glob}`"),
            redirect_hint: Some(format!(
                "Do not edit protected files. Record the intended change as a note with {TOOL_ARTIFACT} under `{}/` in the report phase.",
                policy.artifact_dir
            )),
        }),
        ..Default::default()
    }
}

fn command_allowed(ctx: &HookContext<'_>, argv: &[String]) -> Result<(), String> {
    let tool_ctx = ToolContext {
        session: ctx.session,
        skill_id: Some(ctx.skill_id),
        policy: Some(ctx.policy),
        skill_config: Some(ctx.config),
        workspace: ctx.workspace,
    };
    match argv.first() {
        None => Err("empty command".into()),
        Some(p) if !tool_ctx.command_policy().allows(p) => Err(format!("command `{p}` is not in the allowlist")),
        Some(_) => Ok(()),
    }
}

/// Guards for a patch call; `None` means the call may proceed.
pub fn patch_guard(
    root: &Path,
    policy: &PolicyConfig,
    target: &str,
    body: &str,
) -> Option<HookDecision> {
    let scoped = match workspace::resolve(root, target) {
        Ok(p) => p,
        Err(e) => return Some(reject(e.to_string())),
    };
    let relative = normalize_relative(target);
    if let Some(glob) = policy.protected_by(&relative) {
        return Some(protected_redirect(&relative, &glob, policy));
    }
    if !body.lines().any(|l| l.starts_with("@@")) {
        return Some(reject("patch has no `@@` hunk marker"));
    }
    let parsed = match patch::parse(body) {
        Ok(p) => p,
        Err(e) => return Some(reject(format!("malformed patch: {e}"))),
    };
    match std::fs::read_to_string(scoped.as_path()) {
        Err(_) if !parsed.is_creation() => {
            return Some(reject(format!("target `{relative}` does not exist and the patch is not a file creation")))
        }
        Ok(original) if parsed.is_append_only(&original) => {
            return Some(reject(format!("append-only edit on existing file `{relative}`; change the code in place")))
        }
        _ => {}
    }
    let changed = parsed.changed_lines();
    if changed > policy.max_patch_lines as usize {
        return Some(reject(format!("patch changes {changed} lines, over the limit of {}", policy.max_patch_lines)));
    }
    None
}

fn verification_guard(ctx: &HookContext<'_>, args: &Value) -> Option<HookDecision> {
    let checks = match parse_checks(args) {
        Ok(c) => c,
        Err(e) => return Some(reject(e.to_string())),
    };
    if checks.is_empty() {
        return Some(reject("verification requires a non-empty check list"));
    }
    for check in &checks {
        if let Some(problem) = check.shape_error() {
            return Some(reject(problem));
        }
        if matches!(check.kind, CheckType::CommandExitZero | CheckType::OutputMatches) {
            if let Err(e) = command_allowed(ctx, check.args.argv.as_deref().unwrap_or_default()) {
                return Some(reject(format!("check `{}`: {e}", check.name)));
            }
        }
        if let Some(path) = &check.args.path {
            if let Err(e) = workspace::resolve(&ctx.session.workspace_root, path) {
                return Some(reject(format!("check `{}`: {e}", check.name)));
            }
        }
    }
    None
}

pub struct BeforeTool;

impl HookProgram for BeforeTool {
    fn run(&self, ctx: &HookContext<'_>) -> Result<HookDecision, String> {
        let StagePayload::PendingCall(call) = ctx.payload else {
            return Ok(HookDecision::none());
        };
        let state = load_state(ctx.state, ctx.session, ctx.config)?;
        let root = &ctx.session.workspace_root;
        let args = &call.args;
        let str_arg = |k: &str| args.get(k).and_then(Value::as_str).unwrap_or_default();
        let is_repair_tool = [TOOL_EVIDENCE, TOOL_PATCH, TOOL_VERIFY, TOOL_ARTIFACT].contains(&call.name.as_str());
        if is_repair_tool && !state.phase.visible_repair_tools().contains(&call.name.as_str()) {
            return Ok(reject(format!("`{}` is not available in phase {}", call.name, state.phase)));
        }
        let decision = match call.name.as_str() {
            TOOL_EVIDENCE => match EvidenceSource::from_args(args) {
                Err(e) => Some(reject(e.to_string())),
                Ok(EvidenceSource::Command { command }) => command_allowed(ctx, &command).err().map(reject),
                Ok(EvidenceSource::Log { log_path }) => workspace::resolve(root, &log_path).err().map(|e| reject(e.to_string())),
            },
            TOOL_PATCH => patch_guard(root, ctx.policy, str_arg("target"), str_arg("patch")),
            TOOL_VERIFY => verification_guard(ctx, args),
            TOOL_ARTIFACT => workspace::resolve(root, str_arg("path")).err().map(|e| reject(e.to_string())),
            TOOL_WRITE => {
                let relative = normalize_relative(str_arg("path"));
                ctx.policy.protected_by(&relative).map(|g| protected_redirect(&relative, &g, ctx.policy))
            }
            TOOL_FINISH => {
                let reasons = completion_gate(&state, root);
                (!reasons.is_empty()).then(|| HookDecision { block_completion: Some(reasons), ..Default::default() })
            }
            _ => None,
        };
        Ok(decision.unwrap_or_default())
    }

    fn completion_gate(&self, ctx: &GateContext<'_>) -> Vec<String> {
        gate(ctx)
    }
}

/// Applies the phase effect of one finished repair tool.
pub fn apply_outcome(state: &mut RepairState, name: &str, ok: bool, output: &Value, contextual: bool) -> Result<(), String> {
    if !ok {
        return Ok(());
    }
    match name {
        TOOL_EVIDENCE => {
            if let Some(sig) = output.get("signature").and_then(Value::as_str) {
                state.failure_signature = Some(sig.to_string());
            }
            if state.phase == Phase::Reproduce {
                step(state, if contextual { Phase::Diagnose } else { Phase::Patch })?;
            }
        }
        TOOL_PATCH => {
            if state.phase == Phase::Diagnose {
                step(state, Phase::Patch)?;
            }
            step(state, Phase::Verify)?;
        }
        TOOL_VERIFY => {
            let passed = output.get("all_passed").and_then(Value::as_bool).unwrap_or(false);
            state.verification_passed = passed;
            if passed {
                state.gate_fail_reasons.retain(|r| !r.starts_with(CHECK_FAILED_PREFIX));
                step(state, Phase::Report)?;
            } else {
                let failed = output.get("failed").and_then(Value::as_array).cloned().unwrap_or_default();
                state.gate_fail_reasons.retain(|r| !r.starts_with(CHECK_FAILED_PREFIX));
                state
                    .gate_fail_reasons
                    .extend(failed.iter().filter_map(Value::as_str).map(|n| format!("{CHECK_FAILED_PREFIX}{n}")));
                step(state, Phase::Patch)?;
            }
        }
        TOOL_ARTIFACT => {
            if let Some(path) = output.get("path").and_then(Value::as_str) {
                state.add_produced(path.to_string());
            }
        }
        _ => {}
    }
    Ok(())
}

pub struct AfterTool;

impl HookProgram for AfterTool {
    fn run(&self, ctx: &HookContext<'_>) -> Result<HookDecision, String> {
        let StagePayload::ToolResult(outcome) = ctx.payload else {
            return Ok(HookDecision::none());
        };
        let mut state = load_state(ctx.state, ctx.session, ctx.config)?;
        let root = &ctx.session.workspace_root;
        let target = match outcome.name.as_str() {
            TOOL_PATCH => outcome.args.get("target"),
            TOOL_ARTIFACT | TOOL_WRITE => outcome.args.get("path"),
            _ => None,
        };
        state.last_tool = Some(LastTool {
            name: outcome.name.clone(),
            ok: outcome.ok,
            seq: outcome.seq,
            target: target.and_then(Value::as_str).map(str::to_string),
        });
        apply_outcome(&mut state, &outcome.name, outcome.ok, &outcome.output, contextual_diagnosis(ctx.config))?;
        state.prune_produced(root);
        refresh_gate_reasons(&mut state, root);
        let open = completion_gate(&state, root);
        Ok(HookDecision {
            schedule_followup: state.phase != Phase::Report || !open.is_empty(),
            block_completion: (!open.is_empty()).then_some(open),
            state_update: update_if_changed(ctx.state, &state),
            ..Default::default()
        })
    }

    fn completion_gate(&self, ctx: &GateContext<'_>) -> Vec<String> {
        gate(ctx)
    }
}
