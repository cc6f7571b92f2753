mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use serde_json::{json, Value};
use skillrun::backend::{ScriptStep, UsageRecord};
use skillrun::registry::{validate_action_args, Bindings, Registry, SkillManifest};
use skillrun::repair::{self, patch};
use skillrun::router::{self, DelegatedTask, RouterConfig};
use skillrun::session::{Event, NewSession, SessionStore, UsageTotals};
use skillrun::workspace;

#[derive(Debug, Clone)]
enum Op {
    User(String),
    Assistant(String, u64, u64),
    Guidance(String, bool),
    Note(String),
    State(String, i64),
}

fn op() -> impl Strategy<Value = Op> {
    let text = "[a-zA-Z0-9 \\n\"é{}]{0,24}";
    prop_oneof![
        text.prop_map(Op::User),
        (text, 0u64..5000, 0u64..500).prop_map(|(t, i, o)| Op::Assistant(t, i, o)),
        (text, any::<bool>()).prop_map(|(t, b)| Op::Guidance(t, b)),
        text.prop_map(Op::Note),
        (prop_oneof![Just("alpha".to_string()), Just("beta".to_string())], any::<i64>()).prop_map(|(s, v)| Op::State(s, v)),
    ]
}

fn new_session(ws: &std::path::Path) -> NewSession {
    NewSession {
        task_text: "t".into(),
        task_type: "t".into(),
        workspace_root: ws.to_path_buf(),
        done_when: String::new(),
        parent_id: None,
        routed_skills: vec![],
    }
}

fn apply_op(store: &mut SessionStore, sid: &str, op: &Op) {
    match op {
        Op::User(t) => drop(store.append_event(sid, Event::UserMessage { text: t.clone(), source: None }).unwrap()),
        Op::Assistant(t, i, o) => drop(
            store
                .append_event(
                    sid,
                    Event::AssistantMessage {
                        text: Some(t.clone()),
                        tool_call: None,
                        usage: UsageRecord {
                            provider: "p".into(),
                            response_model: "m".into(),
                            input_tokens: *i,
                            output_tokens: *o,
                            cache_tokens: 0,
                            total_tokens: i + o,
                        },
                    },
                )
                .unwrap(),
        ),
        Op::Guidance(t, transient) => drop(
            store
                .append_event(sid, Event::GuidanceInjection { skill_id: "alpha".into(), text: t.clone(), transient: *transient })
                .unwrap(),
        ),
        Op::Note(t) => drop(store.append_event(sid, Event::SystemNote { text: t.clone() }).unwrap()),
        Op::State(skill, v) => drop(store.put_skill_state(sid, skill, json!({"v": v})).unwrap()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn history_round_trips_through_disk(ops in prop::collection::vec(op(), 0..60)) {
        let dir = tempfile::tempdir().unwrap();
        let ws = dir.path().join("ws");
        std::fs::create_dir_all(&ws).unwrap();
        let original = {
            let mut store = SessionStore::open(dir.path().join("store")).unwrap();
            let sid = store.create_session(new_session(&ws)).unwrap();
            for op in &ops {
                apply_op(&mut store, &sid, op);
            }
            store.get(&sid).unwrap().clone()
        };
        let reloaded = SessionStore::open(dir.path().join("store")).unwrap();
        let back = reloaded.get(&original.session_id).unwrap();
        prop_assert_eq!(back, &original);
        prop_assert!(reloaded.warnings().is_empty());

        let seqs: Vec<u64> = back.history.iter().map(|e| e.seq).collect();
        prop_assert_eq!(seqs, (1..=back.history.len() as u64).collect::<Vec<_>>());

        let mut usage = UsageTotals::default();
        for op in &ops {
            if let Op::Assistant(_, i, o) = op {
                usage.input_tokens += i;
                usage.output_tokens += o;
                usage.total_tokens += i + o;
                usage.request_count += 1;
            }
        }
        prop_assert_eq!(back.usage, usage);
    }

    #[test]
    fn skill_state_is_isolated_per_skill(ops in prop::collection::vec(op(), 0..40)) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = SessionStore::in_memory();
        let sid = store.create_session(new_session(dir.path())).unwrap();
        let mut last: BTreeMap<String, Value> = BTreeMap::new();
        for op in &ops {
            apply_op(&mut store, &sid, op);
            if let Op::State(skill, v) = op {
                last.insert(skill.clone(), json!({"v": v}));
            }
            for skill in ["alpha", "beta", "gamma"] {
                let expect = last.get(skill).cloned().unwrap_or_else(|| json!({}));
                prop_assert_eq!(store.get_skill_state(&sid, skill).unwrap(), expect);
            }
        }
    }
}

fn arb_json() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
        any::<i64>().prop_map(Value::from),
        any::<f64>().prop_filter("finite", |f| f.is_finite()).prop_map(Value::from),
        "[a-z_/.@ +-]{0,12}".prop_map(Value::from),
    ];
    leaf.prop_recursive(4, 48, 6, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..6).prop_map(Value::from),
            prop::collection::btree_map(
                prop_oneof![
                    Just("target".to_string()),
                    Just("patch".to_string()),
                    Just("checks".to_string()),
                    Just("command".to_string()),
                    Just("name".to_string()),
                    Just("type".to_string()),
                    Just("args".to_string()),
                    "[a-z]{1,6}"
                ],
                inner,
                0..5
            )
            .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

fn repair_manifest() -> SkillManifest {
    serde_json::from_str(repair::MANIFEST_JSON).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn validation_is_total_and_deterministic(args in arb_json()) {
        let m = repair_manifest();
        for tool in &m.tools {
            let a = validate_action_args(tool, &args);
            let b = validate_action_args(tool, &args);
            match (&a, &b) {
                (Ok(x), Ok(y)) => prop_assert_eq!(&x.0, &y.0),
                (Err(x), Err(y)) => {
                    prop_assert_eq!(x, y);
                    prop_assert!(!x.is_empty());
                }
                _ => prop_assert!(false, "validation not deterministic"),
            }
        }
    }

    #[test]
    fn exact_required_args_validate_to_themselves(target in "[a-z]{1,8}\\.py", body in "[ -~]{0,40}") {
        let m = repair_manifest();
        let args = json!({"target": target, "patch": body});
        let ok = validate_action_args(m.tool(repair::TOOL_PATCH).unwrap(), &args).unwrap();
        prop_assert_eq!(ok.0, args);
    }
}

#[test]
fn registry_load_is_deterministic_and_tool_names_resolve_once() {
    let f = Fixture::new();
    let a = f.registry();
    let b = f.registry();
    let ma: Vec<&SkillManifest> = a.skills().map(|s| &s.manifest).collect();
    let mb: Vec<&SkillManifest> = b.skills().map(|s| &s.manifest).collect();
    assert_eq!(ma, mb);
    let mut owners: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for s in a.skills() {
        for t in &s.manifest.tools {
            owners.entry(t.name.clone()).or_default().push(s.manifest.skill_id.clone());
        }
    }
    assert!(owners.values().all(|o| o.len() == 1));
}

fn skill(id: &str, types: Vec<String>, keywords: Vec<String>) -> SkillManifest {
    serde_json::from_value(json!({
        "skill_id": id, "version": "1.0.0", "description": "", "task_types": types, "trigger_keywords": keywords, "tools": []
    }))
    .unwrap()
}

const WORDS: [&str; 8] = ["bug", "fix", "test", "docs", "article", "data", "plot", "deploy"];
const TYPES: [&str; 4] = ["code_repair", "docs", "research", "ops"];

fn arb_skill() -> impl Strategy<Value = (Vec<String>, Vec<String>)> {
    (
        prop::sample::subsequence(TYPES.to_vec(), 0..=2).prop_map(|v| v.into_iter().map(String::from).collect()),
        prop::sample::subsequence(WORDS.to_vec(), 0..=4).prop_map(|v| v.into_iter().map(String::from).collect()),
    )
}

fn arb_task() -> impl Strategy<Value = (String, String)> {
    (prop::sample::subsequence(WORDS.to_vec(), 0..=5), prop::sample::select(TYPES.to_vec()))
        .prop_map(|(w, t)| (w.join(" "), t.to_string()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn routing_is_pure_monotone_and_scale_invariant(
        skills in prop::collection::vec(arb_skill(), 1..6),
        (text, task_type) in arb_task(),
        scale in 0.01f64..100.0,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut registry = Registry::new(Bindings::new());
        for (i, (types, kws)) in skills.iter().enumerate() {
            registry.register(skill(&format!("s{i}"), types.clone(), kws.clone()), None).unwrap();
        }
        let t = DelegatedTask { task_text: text, task_type, workspace_root: dir.path().to_path_buf(), done_when: String::new() };
        let config = RouterConfig::default();
        let routed = router::route(&registry, &t, &config);
        prop_assert_eq!(&routed, &router::route(&registry, &t, &config));
        for w in routed.entries.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].skill_id < w[1].skill_id));
        }
        prop_assert!(routed.entries.iter().all(|e| e.score >= routed.threshold_used));

        let scaled = RouterConfig { threshold: config.threshold * scale, w_type: config.w_type * scale, w_keyword: config.w_keyword * scale };
        let order = |c: &RouterConfig| router::rank(&registry, &t, c).into_iter().map(|e| e.skill_id).collect::<Vec<_>>();
        prop_assert_eq!(order(&config), order(&scaled));

        // An unrelated skill scoring below threshold leaves the routed set alone.
        let mut bigger = Registry::new(Bindings::new());
        for (i, (types, kws)) in skills.iter().enumerate() {
            bigger.register(skill(&format!("s{i}"), types.clone(), kws.clone()), None).unwrap();
        }
        bigger.register(skill("zz_unrelated", vec!["gardening".into()], vec!["tulip".into()]), None).unwrap();
        prop_assert_eq!(router::route(&bigger, &t, &config).skill_ids(), routed.skill_ids());
    }
}

fn lines_text(lines: &[String]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn single_hunk_patches_apply_exactly(
        original in prop::collection::vec("[a-z]{0,6}", 1..20),
        replacement in prop::collection::vec("[A-Z]{1,6}", 0..5),
        start_frac in 0.0f64..1.0,
        len in 1usize..4,
        ctx in 0usize..3,
    ) {
        // Unique lines, so the hunk can only match at its own position.
        let original: Vec<String> = original.iter().enumerate().map(|(i, l)| format!("{i}{l}")).collect();
        let start = ((original.len() as f64) * start_frac) as usize % original.len();
        let end = (start + len).min(original.len());
        let before = start.saturating_sub(ctx);
        let after = (end + ctx).min(original.len());
        let mut body = format!(
            "--- a/f\n+++ b/f\n@@ -{},{} +{},{} @@\n",
            before + 1,
            after - before,
            before + 1,
            (start - before) + replacement.len() + (after - end)
        );
        for l in &original[before..start] { body.push_str(&format!(" {l}\n")); }
        for l in &original[start..end] { body.push_str(&format!("-{l}\n")); }
        for l in &replacement { body.push_str(&format!("+{l}\n")); }
        for l in &original[end..after] { body.push_str(&format!(" {l}\n")); }

        let mut expected = original[..start].to_vec();
        expected.extend(replacement.iter().cloned());
        expected.extend(original[end..].iter().cloned());

        let parsed = patch::parse(&body).unwrap();
        prop_assert_eq!(parsed.changed_lines(), (end - start) + replacement.len());
        prop_assert_eq!(patch::apply(&lines_text(&original), &parsed).unwrap(), lines_text(&expected));

        // Corrupting a removed line makes the whole patch fail.
        let mut wrong = original.clone();
        wrong[start] = format!("{}#", wrong[start]);
        prop_assert!(patch::apply(&lines_text(&wrong), &parsed).is_err());
    }

    #[test]
    fn signature_normalization_is_idempotent(line in "[ -~]{0,60}") {
        let once = repair::tools::normalize_signature_line(&line);
        prop_assert_eq!(repair::tools::normalize_signature_line(&once), once.clone());
    }

    #[test]
    fn resolved_paths_stay_inside_the_root(parts in prop::collection::vec(prop_oneof![Just(".."), Just("."), Just("a"), Just("b"), Just("")], 1..7)) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("root/a/b")).unwrap();
        let root = dir.path().join("root");
        let raw = parts.join("/");
        if let Ok(p) = workspace::resolve(&root, &raw) {
            prop_assert!(p.as_path().starts_with(root.canonicalize().unwrap()), "{} -> {}", raw, p.as_path().display());
        }
    }
}

fn decision_script(seed: &[u8]) -> Vec<ScriptStep> {
    seed.iter()
        .map(|b| match b % 5 {
            0 => ScriptStep::call("fs_read", json!({"path": "notes.txt"})),
            1 => ScriptStep::call("fs_write", json!({"path": "out.txt", "content": format!("{b}")})),
            2 => ScriptStep::call("run_command", json!({"argv": ["cat", "notes.txt"]})),
            3 => ScriptStep::call("fs_read", json!({"path": "../outside"})),
            _ => ScriptStep::text("working"),
        })
        .chain(std::iter::once(ScriptStep::text("done")))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn at_most_one_tool_result_per_decision(seed in prop::collection::vec(any::<u8>(), 0..12)) {
        let f = Fixture::new();
        write(&f.workspace, "notes.txt", "n\n");
        let rt = in_memory_runtime(&f, decision_script(&seed), config_with(&["cat"]));
        let sid = rt.start_session(task(&f.workspace, "poke around", "chat", ""), false).unwrap();
        rt.run_until_quiescent(200).unwrap();
        let s = rt.session(&sid).unwrap();
        let mut results_since_assistant = 0;
        for e in &s.history {
            match &e.event {
                Event::AssistantMessage { .. } => results_since_assistant = 0,
                Event::ToolResult { call_id, .. } => {
                    results_since_assistant += 1;
                    prop_assert!(results_since_assistant <= 1);
                    let called = s.history.iter().any(|c| c.seq < e.seq && matches!(&c.event, Event::ToolCall { call_id: id, .. } if id == call_id));
                    prop_assert!(called, "orphan result {}", call_id);
                }
                _ => {}
            }
        }
        let completions = s.history.iter().filter(|e| matches!(e.event, Event::Completion { .. })).count();
        prop_assert!(completions <= 1, "{} completions", completions);
    }
}
