//! Required-artifact inference and the completion gate.

use std::path::{Component, Path, PathBuf};

use super::state::RepairState;
use crate::workspace::is_lexically_inside;

pub const DEFAULT_ARTIFACT_EXTENSIONS: [&str; 4] = [".md", ".txt", ".json", ".patch"];

pub const REASON_NOT_VERIFIED: &str = "verification not passed";

const TRIM: &[char] = &['`', '"', '\'', ',', '.', ';', ':', '(', ')', '[', ']', '<', '>', '!', '?', '*'];

/// Lexically normalized workspace-relative form (`./a/../b` -> `b`).
pub fn normalize_relative(raw: &str) -> String {
    let mut parts: Vec<String> = Vec::new();
    for c in Path::new(raw).components() {
        match c {
            Component::Normal(p) => parts.push(p.to_string_lossy().into_owned()),
            Component::ParentDir => {
                parts.pop();
            }
            _ => {}
        }
    }
    parts.join("/")
}

fn is_artifact_token(token: &str, extensions: &[String]) -> bool {
    if token.is_empty() || token.contains("://") {
        return false;
    }
    let path_like = token.contains('/') || extensions.iter().any(|e| token.len() > e.len() && token.ends_with(e.as_str()));
    path_like && is_lexically_inside(token)
}

/// Extracts required artifact paths from a completion contract: every
/// backtick-quoted span or whitespace token that contains `/` or ends in a
/// known extension and stays inside the workspace. Order of first
/// appearance, no duplicates.
pub fn infer_required_artifacts(done_when: &str, extensions: &[String]) -> Vec<String> {
    let mut candidates: Vec<(usize, String)> = Vec::new();
    let mut outside = String::with_capacity(done_when.len());
    let mut rest = done_when;
    let mut offset = 0;
    while let Some(open) = rest.find('`') {
        let Some(close) = rest[open + 1..].find('`') else { break };
        let span = &rest[open + 1..open + 1 + close];
        candidates.push((offset + open, span.trim().to_string()));
        outside.push_str(&rest[..open]);
        outside.push_str(&" ".repeat(close + 2));
        offset += open + close + 2;
        rest = &rest[open + close + 2..];
    }
    outside.push_str(rest);

    let mut pos = 0;
    for word in outside.split_whitespace() {
        let at = outside[pos..].find(word).map_or(pos, |i| pos + i);
        pos = at + word.len();
        candidates.push((at, word.trim_matches(TRIM).to_string()));
    }
    candidates.sort_by_key(|(at, _)| *at);

    let mut out: Vec<String> = Vec::new();
    for (_, token) in candidates {
        if is_artifact_token(&token, extensions) {
            let normalized = normalize_relative(&token);
            if !out.contains(&normalized) {
                out.push(normalized);
            }
        }
    }
    out
}

pub fn missing_artifact_reason(path: &str) -> String {
    format!("missing artifact {path}")
}

/// Open completion reasons; empty means completion is permitted.
pub fn completion_gate(state: &RepairState, workspace_root: &Path) -> Vec<String> {
    let mut reasons = Vec::new();
    if !state.verification_passed {
        reasons.push(REASON_NOT_VERIFIED.to_string());
    }
    for artifact in &state.required_artifacts {
        let path: PathBuf = workspace_root.join(artifact);
        if !path.is_file() {
            reasons.push(missing_artifact_reason(artifact));
        }
    }
    reasons
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ext() -> Vec<String> {
        DEFAULT_ARTIFACT_EXTENSIONS.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn backtick_path() {
        assert_eq!(infer_required_artifacts("write the summary to `out/report.md`", &ext()), vec!["out/report.md"]);
    }

    #[test]
    fn no_paths() {
        assert!(infer_required_artifacts("all tests pass", &ext()).is_empty());
    }

    #[test]
    fn duplicates_collapse_and_order_is_kept() {
        let got = infer_required_artifacts(
            "put notes.txt and out/report.md in place; out/report.md must mention `notes.txt`.",
            &ext(),
        );
        assert_eq!(got, vec!["notes.txt", "out/report.md"]);
    }

    #[test]
    fn escapes_and_urls_are_ignored() {
        let got = infer_required_artifacts("see https://x.org/a.md, write ../up.md and /etc/x.txt", &ext());
        assert!(got.is_empty(), "{got:?}");
    }

    #[test]
    fn gate_reasons() {
        let root = tempfile::tempdir().unwrap();
        let mut s = RepairState { required_artifacts: vec!["out/report.md".into()], ..Default::default() };
        assert_eq!(completion_gate(&s, root.path()), vec![REASON_NOT_VERIFIED, "missing artifact out/report.md"]);
        s.verification_passed = true;
        assert_eq!(completion_gate(&s, root.path()), vec!["missing artifact out/report.md"]);
        std::fs::create_dir(root.path().join("out")).unwrap();
        std::fs::write(root.path().join("out/report.md"), "ok").unwrap();
        assert!(completion_gate(&s, root.path()).is_empty());
    }
}
