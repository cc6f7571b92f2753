mod common;

use common::*;
use serde_json::json;
use skillrun::backend::{read_usage_log, BackendError, ModelBackend, ModelRequest, ModelResponse, ScriptStep, UsageLog};
use skillrun::hooks::{HookContext, HookDecision, HookProgram};
use skillrun::planner::{Runtime, StopReason};
use skillrun::registry::{Bindings, Registry};
use skillrun::repair::{self, Phase, RepairState};
use skillrun::session::{Event, SessionStatus, SessionStore, UsageTotals};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

fn usage_from_log(lines: &[skillrun::backend::UsageLine], sid: &str) -> UsageTotals {
    let mut t = UsageTotals::default();
    for l in lines.iter().filter(|l| l.session_id == sid) {
        t.input_tokens += l.input_tokens;
        t.output_tokens += l.output_tokens;
        t.cache_tokens += l.cache_tokens;
        t.total_tokens += l.total_tokens;
        t.request_count += 1;
    }
    t
}

fn dump(s: &skillrun::session::Session) -> String {
    s.history.iter().map(|e| serde_json::to_string(e).unwrap()).collect::<Vec<_>>().join("\n")
}

#[test]
fn delegated_repair_completes_and_reports_to_parent() {
    let f = Fixture::repair();
    let rt = on_disk_runtime(&f, delegating_repair_script(), config_with(&["python3"]));
    let root = rt.start_session(task(&f.workspace, "Coordinate the fix.", "orchestration", ""), false).unwrap();
    let summary = rt.run_until_quiescent(100).unwrap();
    assert_eq!(summary.stop, StopReason::Quiescent);

    let parent = rt.session(&root).unwrap();
    let child = rt.session("s0002").unwrap();
    assert_eq!(child.parent_id.as_deref(), Some(root.as_str()));
    assert_eq!(child.routed_skills, vec![repair::SKILL_ID.to_string()]);
    assert_eq!(child.status, SessionStatus::Completed, "{}", dump(&child));
    assert_eq!(parent.status, SessionStatus::Completed, "{}", dump(&parent));
    assert!(parent.history.iter().any(|e| matches!(&e.event,
        Event::UserMessage { text, source: Some(s) } if s == "child_report" && text.contains("Sub-session s0002 completed"))));

    let state = RepairState::from_value(&child.skill_state(repair::SKILL_ID)).unwrap();
    assert!(state.verification_passed);
    assert_eq!(state.phase_trail, vec![Phase::Reproduce, Phase::Patch, Phase::Verify, Phase::Report]);
    assert_eq!(state.produced_artifacts, vec!["out/report.md".to_string()]);
    assert!(state.failure_signature.as_deref().is_some_and(|s| s.contains("AssertionError")), "{state:?}");
    assert!(f.workspace.join("out/report.md").is_file());
    assert!(std::fs::read_to_string(f.workspace.join("src/calc.py")).unwrap().contains("a + b"));
    let tests_dir = std::fs::read_to_string(f.workspace.join("tests/test_calc.py")).unwrap();
    assert_eq!(tests_dir, TEST_CALC_PY);

    drop(rt);
    let lines = read_usage_log(&f.store.join("requests.jsonl")).unwrap();
    let store = SessionStore::open(&f.store).unwrap();
    for s in store.sessions() {
        assert_eq!(s.usage, usage_from_log(&lines, &s.session_id), "session {}", s.session_id);
    }
}

#[test]
fn finish_before_verification_is_refused() {
    let f = Fixture::repair();
    let mut steps = vec![
        ScriptStep::call("finish", json!({"report_text": "done already"})),
        ScriptStep::text("all done"),
    ];
    steps.extend(child_repair_steps());
    let rt = in_memory_runtime(&f, steps, config_with(&["python3"])).with_tool_filters(false);
    let sid = rt.start_session(repair_task(&f.workspace), true).unwrap();
    rt.run_until_quiescent(100).unwrap();
    let s = rt.session(&sid).unwrap();
    assert_eq!(s.status, SessionStatus::Completed);
    let first = s.history.iter().find_map(|e| match &e.event {
        Event::ToolResult { name, ok, output, .. } if name == "finish" => Some((*ok, output.clone())),
        _ => None,
    });
    let (ok, output) = first.unwrap();
    assert!(!ok);
    assert!(output.to_string().contains("repair_run_verification") || output.to_string().contains("verification"), "{output}");
}

#[test]
fn step_budget_exhaustion_leaves_sessions_open() {
    let f = Fixture::repair();
    let rt = in_memory_runtime(&f, delegating_repair_script(), config_with(&["python3"]));
    let root = rt.start_session(task(&f.workspace, "Coordinate the fix.", "orchestration", ""), false).unwrap();
    let summary = rt.run_until_quiescent(3).unwrap();
    assert_eq!(summary.stop, StopReason::StepBudgetExhausted);
    assert_eq!(summary.steps, 3);
    assert!(rt.session(&root).unwrap().status.is_open());
    assert!(!rt.pending_wakeups().is_empty());
}

struct Flaky {
    failures: AtomicUsize,
    inner: skillrun::backend::ScriptedBackend,
}

impl ModelBackend for Flaky {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        if self.failures.load(Ordering::SeqCst) > 0 {
            self.failures.fetch_sub(1, Ordering::SeqCst);
            return Err(BackendError::Model { status: Some(503), message: "overloaded".into(), retryable: true });
        }
        self.inner.complete(request)
    }
}

fn flaky_runtime(f: &Fixture, failures: usize) -> Runtime {
    let backend = Flaky {
        failures: AtomicUsize::new(failures),
        inner: skillrun::backend::ScriptedBackend::new(vec![ScriptStep::text("nothing to do")]),
    };
    Runtime::new(Arc::new(f.registry()), SessionStore::in_memory(), Box::new(backend), UsageLog::in_memory(), config_with(&[]))
        .unwrap()
}

#[test]
fn retryable_backend_errors_are_retried_then_fail_the_session() {
    let f = Fixture::new();
    let rt = flaky_runtime(&f, 2);
    let sid = rt.start_session(task(&f.workspace, "say hi", "chat", ""), false).unwrap();
    rt.run_until_quiescent(20).unwrap();
    assert_eq!(rt.session(&sid).unwrap().status, SessionStatus::Completed);

    let rt = flaky_runtime(&f, 3);
    let sid = rt.start_session(task(&f.workspace, "say hi", "chat", ""), false).unwrap();
    rt.run_until_quiescent(20).unwrap();
    let s = rt.session(&sid).unwrap();
    assert_eq!(s.status, SessionStatus::Failed);
    assert_eq!(s.usage.request_count, 0);
}

struct Broken;

impl HookProgram for Broken {
    fn run(&self, _ctx: &HookContext<'_>) -> Result<HookDecision, String> {
        Ok(HookDecision { reject: Some(skillrun::hooks::Rejection { reason: "x".into(), redirect_hint: None }), ..Default::default() })
    }
}

#[test]
fn illegal_hook_decision_is_a_recorded_fault() {
    let f = Fixture::repair();
    let mut bindings = Bindings::builtin();
    bindings.register_hook("code_repair_ops.before_llm", Arc::new(Broken));
    let mut registry = Registry::new(bindings);
    registry.load_dir(&f.skills).unwrap();
    let rt = runtime(registry, SessionStore::in_memory(), child_repair_steps(), UsageLog::in_memory(), config_with(&["python3"]));
    let sid = rt.start_session(repair_task(&f.workspace), true).unwrap();
    let summary = rt.run_until_quiescent(10).unwrap();
    assert_eq!(summary.stop, StopReason::Quiescent);
    let s = rt.session(&sid).unwrap();
    assert_eq!(s.usage.request_count, 0);
    assert!(s.history.iter().any(|e| matches!(&e.event, Event::SystemNote { text } if text.contains("hook fault") && text.contains("reject"))));
}
