mod common;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use common::*;
use serde_json::json;
use skillrun::backend::ScriptStep;
use skillrun::repair;
use skillrun::session::Event;

/// Hash of every path, file body and symlink target under `dir`.
fn checksum(dir: &Path) -> u64 {
    fn walk(dir: &Path, h: &mut DefaultHasher) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            p.hash(h);
            let meta = p.symlink_metadata().unwrap();
            if meta.file_type().is_symlink() {
                std::fs::read_link(&p).unwrap().hash(h);
            } else if meta.is_dir() {
                walk(&p, h);
            } else {
                std::fs::read(&p).unwrap().hash(h);
            }
        }
    }
    let mut h = DefaultHasher::new();
    walk(dir, &mut h);
    h.finish()
}

#[cfg(unix)]
#[test]
fn nothing_outside_the_root_changes() {
    let f = Fixture::repair();
    let decoy = f.dir.path().join("decoy");
    write(&decoy, "victim.txt", "keep me\n");
    write(&decoy, "nested/calc.py", "def add(a, b):\n    return a - b\n");
    std::os::unix::fs::symlink(&decoy, f.workspace.join("link")).unwrap();
    std::os::unix::fs::symlink(decoy.join("victim.txt"), f.workspace.join("src/alias.txt")).unwrap();
    let before = checksum(&decoy);
    let abs = decoy.join("victim.txt").display().to_string();

    let attacks = vec![
        ScriptStep::call("fs_write", json!({"path": "../decoy/victim.txt", "content": "pwned"})),
        ScriptStep::call("fs_write", json!({"path": abs, "content": "pwned"})),
        ScriptStep::call("fs_write", json!({"path": "link/victim.txt", "content": "pwned"})),
        ScriptStep::call("fs_write", json!({"path": "link/new.txt", "content": "pwned"})),
        ScriptStep::call("fs_write", json!({"path": "src/alias.txt", "content": "pwned"})),
        ScriptStep::call("fs_write", json!({"path": "src/../../decoy/x.txt", "content": "pwned"})),
        ScriptStep::call("run_command", json!({"argv": ["cp", "src/calc.py", "../decoy/victim.txt"]})),
        ScriptStep::call("run_command", json!({"argv": ["cp", "src/calc.py", abs]})),
        ScriptStep::call("run_command", json!({"argv": ["cp", "src/calc.py", "link/victim.txt"]})),
        ScriptStep::call("run_command", json!({"argv": ["touch", "--reference=../decoy/victim.txt", "src/calc.py"]})),
        ScriptStep::call(repair::TOOL_EVIDENCE, json!({"log_path": "../decoy/victim.txt"})),
        ScriptStep::call(repair::TOOL_EVIDENCE, json!({"command": ["cat", "src/calc.py"]})),
        ScriptStep::call(repair::TOOL_PATCH, json!({"target": "link/nested/calc.py", "patch": FIX_PATCH})),
        ScriptStep::call(repair::TOOL_PATCH, json!({"target": "../decoy/nested/calc.py", "patch": FIX_PATCH})),
        ScriptStep::call(repair::TOOL_PATCH, json!({"target": "src/alias.txt", "patch": "@@ -1,1 +1,1 @@\n-keep me\n+pwned\n"})),
        ScriptStep::call(repair::TOOL_PATCH, json!({"target": "src/calc.py", "patch": FIX_PATCH})),
        ScriptStep::call(
            repair::TOOL_VERIFY,
            json!({"checks": [{"name": "t", "type": "file_exists", "args": {"path": "../decoy/victim.txt"}}]}),
        ),
        ScriptStep::call(
            repair::TOOL_VERIFY,
            json!({"checks": [{"name": "t", "type": "file_contains", "args": {"path": "src/calc.py", "needle": "a + b"}}]}),
        ),
        ScriptStep::call(repair::TOOL_ARTIFACT, json!({"path": "../decoy/report.md", "content": "pwned"})),
        ScriptStep::call(repair::TOOL_ARTIFACT, json!({"path": "link/report.md", "content": "pwned"})),
        ScriptStep::call(repair::TOOL_ARTIFACT, json!({"path": abs, "content": "pwned"})),
        ScriptStep::call("delegate_subtask", json!({"task_text": "escape", "task_type": "chat", "subdir": "../decoy"})),
        ScriptStep::call("delegate_subtask", json!({"task_text": "escape", "task_type": "chat", "subdir": "link"})),
        ScriptStep::text("stop"),
    ];
    let rt = in_memory_runtime(&f, attacks, config_with(&["cp", "cat", "touch"])).with_tool_filters(false);
    let sid = rt.start_session(repair_task(&f.workspace), true).unwrap();
    rt.run_until_quiescent(200).unwrap();

    assert_eq!(checksum(&decoy), before, "decoy tree changed");
    let s = rt.session(&sid).unwrap();
    let results: Vec<(String, bool)> = s
        .history
        .iter()
        .filter_map(|e| match &e.event {
            Event::ToolResult { name, ok, .. } => Some((name.clone(), *ok)),
            _ => None,
        })
        .collect();
    // Only the honest evidence, patch and verification calls succeed.
    let ok: Vec<&str> = results.iter().filter(|(_, ok)| *ok).map(|(n, _)| n.as_str()).collect();
    assert_eq!(ok, [repair::TOOL_EVIDENCE, repair::TOOL_PATCH, repair::TOOL_VERIFY], "{results:?}");
    assert_eq!(rt.store().len(), 1, "no sub-session may be rooted outside the workspace");
}
