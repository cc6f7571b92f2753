#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use skillrun::backend::{ScriptStep, ScriptedBackend, StepPredicate, UsageLog};
use skillrun::config::RuntimeConfig;
use skillrun::planner::Runtime;
use skillrun::registry::Registry;
use skillrun::repair;
use skillrun::router::DelegatedTask;
use skillrun::session::SessionStore;

pub const CALC_PY: &str = "def add(a, b):\n    return a - b\n";
pub const TEST_CALC_PY: &str = "import os\nimport sys\n\nsys.path.insert(0, os.path.join(os.path.dirname(__file__), \"..\", \"src\"))\n\nfrom calc import add\n\nassert add(2, 3) == 5, \"add(2, 3) returned %r\" % add(2, 3)\nprint(\"ok\")\n";
pub const FIX_PATCH: &str = "--- a/src/calc.py\n+++ b/src/calc.py\n@@ -1,2 +1,2 @@\n def add(a, b):\n-    return a - b\n+    return a + b\n";
pub const REPAIR_TASK: &str = "Fix the failing test: add returns the wrong result. This is a bug.";
pub const REPAIR_DONE_WHEN: &str = "tests pass and the summary is written to `out/report.md`";

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub workspace: PathBuf,
    pub skills: PathBuf,
    pub store: PathBuf,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let workspace = dir.path().join("ws");
        let skills = dir.path().join("skills");
        let store = dir.path().join("store");
        std::fs::create_dir_all(&workspace).unwrap();
        std::fs::create_dir_all(&skills).unwrap();
        repair::write_package(&skills).unwrap();
        Self { dir, workspace, skills, store }
    }

    /// The single-bug python program with its failing test.
    pub fn repair() -> Self {
        let f = Self::new();
        write(&f.workspace, "src/calc.py", CALC_PY);
        write(&f.workspace, "tests/test_calc.py", TEST_CALC_PY);
        f
    }

    pub fn registry(&self) -> Registry {
        let mut r = Registry::with_builtin_bindings();
        r.load_dir(&self.skills).unwrap();
        r
    }

    pub fn write_script(&self, steps: &[ScriptStep]) -> PathBuf {
        let path = self.dir.path().join("script.json");
        std::fs::write(&path, serde_json::to_string_pretty(steps).unwrap()).unwrap();
        path
    }

    pub fn write_config(&self, config: &Value) -> PathBuf {
        let path = self.dir.path().join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
        path
    }
}

pub fn write(root: &Path, rel: &str, content: &str) {
    let p = root.join(rel);
    std::fs::create_dir_all(p.parent().unwrap()).unwrap();
    std::fs::write(p, content).unwrap();
}

pub fn config_with(allow: &[&str]) -> RuntimeConfig {
    let mut c = RuntimeConfig::default();
    c.workspace.command_allowlist = allow.iter().map(|s| s.to_string()).collect();
    c
}

pub fn task(workspace: &Path, text: &str, task_type: &str, done_when: &str) -> DelegatedTask {
    DelegatedTask {
        task_text: text.into(),
        task_type: task_type.into(),
        workspace_root: workspace.to_path_buf(),
        done_when: done_when.into(),
    }
}

pub fn repair_task(workspace: &Path) -> DelegatedTask {
    task(workspace, REPAIR_TASK, "code_repair", REPAIR_DONE_WHEN)
}

pub fn when_phase(mut step: ScriptStep, needle: &str) -> ScriptStep {
    let mut when = step.when.take().unwrap_or_default();
    when.phase_contains = Some(needle.to_string());
    step.when = Some(when);
    step
}

pub fn step_when(step: ScriptStep, predicate: StepPredicate) -> ScriptStep {
    ScriptStep { when: Some(predicate), ..step }
}

/// Steps a routed repair session takes from reproduce to finish.
pub fn child_repair_steps() -> Vec<ScriptStep> {
    vec![
        ScriptStep::call_when_visible(repair::TOOL_EVIDENCE, json!({"command": ["python3", "-B", "tests/test_calc.py"]})),
        ScriptStep::call_when_visible(repair::TOOL_PATCH, json!({"target": "src/calc.py", "patch": FIX_PATCH})),
        ScriptStep::call_when_visible(
            repair::TOOL_VERIFY,
            json!({"checks": [
                {"name": "test_calc", "type": "command_exit_zero", "args": {"argv": ["python3", "-B", "tests/test_calc.py"]}},
                {"name": "fixed_source", "type": "file_contains", "args": {"path": "src/calc.py", "needle": "a + b"}}
            ]}),
        ),
        ScriptStep::call_when_visible(
            repair::TOOL_ARTIFACT,
            json!({"path": "out/report.md", "content": "# Repair report\n\nadd() subtracted; patched to add. test_calc passes.\n"}),
        ),
        when_phase(
            ScriptStep::call_when_visible("finish", json!({"report_text": "add() fixed; verification passed; report at out/report.md"})),
            "Repair phase: report",
        ),
    ]
}

/// Unrouted root that delegates the repair and finishes on the child report.
pub fn delegating_repair_script() -> Vec<ScriptStep> {
    let mut steps = vec![
        ScriptStep::call(
            "delegate_subtask",
            json!({"task_text": REPAIR_TASK, "task_type": "code_repair", "subdir": ".", "done_when": REPAIR_DONE_WHEN}),
        ),
        when_phase(
            ScriptStep::call("finish", json!({"report_text": "delegated repair finished"})),
            "Sub-session s0002 completed",
        ),
    ];
    steps.extend(child_repair_steps());
    steps
}

pub fn runtime(registry: Registry, store: SessionStore, steps: Vec<ScriptStep>, usage: UsageLog, config: RuntimeConfig) -> Runtime {
    Runtime::new(Arc::new(registry), store, Box::new(ScriptedBackend::new(steps)), usage, config).unwrap()
}

pub fn in_memory_runtime(f: &Fixture, steps: Vec<ScriptStep>, config: RuntimeConfig) -> Runtime {
    runtime(f.registry(), SessionStore::in_memory(), steps, UsageLog::in_memory(), config)
}

pub fn on_disk_runtime(f: &Fixture, steps: Vec<ScriptStep>, config: RuntimeConfig) -> Runtime {
    std::fs::create_dir_all(&f.store).unwrap();
    let store = SessionStore::open(&f.store).unwrap();
    let usage = UsageLog::open(f.store.join("requests.jsonl")).unwrap();
    runtime(f.registry(), store, steps, usage, config)
}
