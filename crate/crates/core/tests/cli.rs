mod common;

use std::path::Path;
use std::process::Command;

use common::*;
use serde_json::json;
use skillrun::cli::{run_cli, EXIT_BUDGET, EXIT_DONE, EXIT_ERROR};

fn run_args(f: &Fixture, script: &Path, config: Option<&Path>) -> Vec<String> {
    let mut args = vec![
        "skillrun".to_string(),
        "run".into(),
        "--skills".into(),
        f.skills.display().to_string(),
        "--store".into(),
        f.store.display().to_string(),
        "--workspace".into(),
        f.workspace.display().to_string(),
        "--task".into(),
        "Coordinate the fix.".into(),
        "--task-type".into(),
        "orchestration".into(),
        "--script".into(),
        script.display().to_string(),
    ];
    if let Some(c) = config {
        args.push("--config".into());
        args.push(c.display().to_string());
    }
    args
}

fn cli(args: &[String]) -> (i32, String) {
    let mut out = String::new();
    let code = run_cli(args, &mut out);
    (code, out)
}

#[test]
fn run_prints_summary_and_phase_path() {
    let f = Fixture::repair();
    let script = f.write_script(&delegating_repair_script());
    let config = f.write_config(&json!({"workspace": {"command_allowlist": ["python3"]}}));
    let (code, out) = cli(&run_args(&f, &script, Some(&config)));
    assert_eq!(code, EXIT_DONE, "{out}");
    assert!(out.contains("(quiescent)"), "{out}");
    assert!(out.contains("session s0002 parent=s0001 status=completed"), "{out}");
    assert!(out.contains("skills=[code_repair_ops]"), "{out}");
    assert!(out.contains("phases: reproduce -> patch -> verify -> report"), "{out}");
}

#[test]
fn missing_skills_directory_names_the_path() {
    let f = Fixture::repair();
    let script = f.write_script(&delegating_repair_script());
    let mut args = run_args(&f, &script, None);
    let missing = f.dir.path().join("no-such-skills");
    args[3] = missing.display().to_string();
    let (code, out) = cli(&args);
    assert_eq!(code, EXIT_ERROR);
    assert!(out.contains(&missing.display().to_string()), "{out}");
}

#[test]
fn exhausted_budget_exits_two() {
    let f = Fixture::repair();
    let script = f.write_script(&delegating_repair_script());
    let config = f.write_config(&json!({"planner": {"max_steps": 2}, "workspace": {"command_allowlist": ["python3"]}}));
    let (code, out) = cli(&run_args(&f, &script, Some(&config)));
    assert_eq!(code, EXIT_BUDGET, "{out}");
    assert!(out.contains("step budget exhausted"), "{out}");
}

#[test]
fn bad_config_is_an_error() {
    let f = Fixture::repair();
    let script = f.write_script(&delegating_repair_script());
    let config = f.write_config(&json!({"skills": {"nope": {"x": 1}}}));
    let (code, out) = cli(&run_args(&f, &script, Some(&config)));
    assert_eq!(code, EXIT_ERROR);
    assert!(out.contains("nope"), "{out}");
}

#[test]
fn skills_lists_the_repair_package() {
    let f = Fixture::new();
    let (code, out) = cli(&["skillrun".into(), "skills".into(), "--skills".into(), f.skills.display().to_string()]);
    assert_eq!(code, EXIT_DONE);
    assert!(out.starts_with("code_repair_ops 1.0.0 tools=[repair_collect_evidence, repair_apply_unified_patch"), "{out}");
    assert!(out.contains("task_types=[code_repair, debugging]"), "{out}");
}

#[test]
fn trace_lists_sessions_and_annotates_phases() {
    let f = Fixture::repair();
    let script = f.write_script(&delegating_repair_script());
    let config = f.write_config(&json!({"workspace": {"command_allowlist": ["python3"]}}));
    assert_eq!(cli(&run_args(&f, &script, Some(&config))).0, EXIT_DONE);
    let store = f.store.display().to_string();

    let (code, out) = cli(&["skillrun".into(), "trace".into(), "--store".into(), store.clone()]);
    assert_eq!(code, EXIT_DONE);
    assert_eq!(out.lines().count(), 2, "{out}");
    assert!(out.contains("s0002 parent=s0001 status=completed"), "{out}");

    let (code, out) = cli(&["skillrun".into(), "trace".into(), "--store".into(), store.clone(), "--session".into(), "s0002".into()]);
    assert_eq!(code, EXIT_DONE);
    for change in ["start -> reproduce", "reproduce -> patch", "patch -> verify", "verify -> report"] {
        assert!(out.contains(&format!("phase [code_repair_ops] {change}")), "{change}\n{out}");
    }
    assert!(out.contains("usage: input="), "{out}");

    let (code, out) = cli(&["skillrun".into(), "trace".into(), "--store".into(), store, "--session".into(), "s0099".into()]);
    assert_eq!(code, EXIT_ERROR);
    assert!(out.contains("s0099"), "{out}");
}

#[test]
fn trace_of_an_empty_store_prints_nothing() {
    let f = Fixture::new();
    std::fs::create_dir_all(&f.store).unwrap();
    let (code, out) = cli(&["skillrun".into(), "trace".into(), "--store".into(), f.store.display().to_string()]);
    assert_eq!(code, EXIT_DONE);
    assert!(out.is_empty(), "{out}");
}

fn normalized_run() -> (String, Vec<serde_json::Value>) {
    let f = Fixture::repair();
    let script = f.write_script(&delegating_repair_script());
    let config = f.write_config(&json!({"workspace": {"command_allowlist": ["python3"]}}));
    assert_eq!(cli(&run_args(&f, &script, Some(&config))).0, EXIT_DONE);
    let ws = f.workspace.canonicalize().unwrap().display().to_string();
    let mut logs = String::new();
    for id in ["s0001", "s0002"] {
        logs.push_str(&std::fs::read_to_string(f.store.join("sessions").join(format!("{id}.log"))).unwrap());
    }
    let requests = std::fs::read_to_string(f.store.join("requests.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("ts");
            v
        })
        .collect();
    (logs.replace(&ws, "<ws>"), requests)
}

#[test]
fn scripted_runs_replay_identically() {
    let (logs_a, req_a) = normalized_run();
    let (logs_b, req_b) = normalized_run();
    assert_eq!(logs_a, logs_b);
    assert_eq!(req_a, req_b);
}

#[test]
fn binary_exit_codes() {
    let f = Fixture::repair();
    let script = f.write_script(&delegating_repair_script());
    let config = f.write_config(&json!({"workspace": {"command_allowlist": ["python3"]}}));
    let args = run_args(&f, &script, Some(&config));
    let status = Command::new(env!("CARGO_BIN_EXE_skillrun")).args(&args[1..]).output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_DONE), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(String::from_utf8_lossy(&status.stdout).contains("status=completed"));

    let status = Command::new(env!("CARGO_BIN_EXE_skillrun")).args(["trace", "--store", "/nonexistent/store"]).output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_ERROR));
}
