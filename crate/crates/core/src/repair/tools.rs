//! Executors for the four repair tools.
//!
//! Executors perform the action and report a structured result; phase
//! transitions are applied afterwards by the `after_tool_call` hook.

use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::artifacts::normalize_relative;
use super::patch::{self, PatchError};
use crate::workspace::{ToolContext, ToolError, ToolExecutor};

static ERROR_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(error|exception|traceback|fail(ed|ure|s)?|panic(ked)?|assert(ion)?)\b").expect("valid regex")
});
static EXCEPTION_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z_][\w.]*(Error|Exception)\b").expect("valid regex"));
static PATH_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[\w.~-]*(?:/+[\w.-]+)+/?").expect("valid regex"));
static DIGITS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").expect("valid regex"));

/// Normalizes one line: paths reduced to basenames, digit runs masked.
pub fn normalize_signature_line(line: &str) -> String {
    let line = PATH_TOKEN.replace_all(line.trim(), |caps: &regex::Captures<'_>| {
        caps[0].trim_end_matches('/').rsplit('/').next().unwrap_or_default().to_string()
    });
    let line = DIGITS.replace_all(&line, "#");
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalized identifier of a failure: the last `SomeError: ...` line if
/// there is one, else the first error-looking line other than a traceback
/// header. Falls back to the last non-empty line when the command failed
/// without an error keyword.
pub fn failure_signature(output: &str, failed: bool) -> Option<String> {
    if let Some(line) = output.lines().rev().find(|l| EXCEPTION_LINE.is_match(l)) {
        return Some(normalize_signature_line(line));
    }
    let header = |l: &str| l.trim_start().starts_with("Traceback (most recent call last)");
    if let Some(line) = output.lines().find(|l| ERROR_LINE.is_match(l) && !header(l)) {
        return Some(normalize_signature_line(line));
    }
    if failed {
        return output.lines().rev().find(|l| !l.trim().is_empty()).map(normalize_signature_line);
    }
    None
}

fn relative_to(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).map_or_else(|_| path.display().to_string(), |p| p.to_string_lossy().replace('\\', "/"))
}

fn string_list(value: &Value, field: &str) -> Result<Vec<String>, ToolError> {
    serde_json::from_value(value.clone()).map_err(|_| ToolError::InvalidArgs(format!("`{field}` must be a list of strings")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvidenceSource {
    Command { command: Vec<String> },
    Log { log_path: String },
}

impl EvidenceSource {
    pub fn from_args(args: &Value) -> Result<Self, ToolError> {
        match (args.get("command"), args.get("log_path")) {
            (Some(cmd), None) => {
                let command = string_list(cmd, "command")?;
                if command.is_empty() {
                    return Err(ToolError::InvalidArgs("`command` must not be empty".into()));
                }
                Ok(EvidenceSource::Command { command })
            }
            (None, Some(Value::String(p))) => Ok(EvidenceSource::Log { log_path: p.clone() }),
            _ => Err(ToolError::InvalidArgs("give exactly one of `command` or `log_path`".into())),
        }
    }
}

pub struct CollectEvidence;

impl ToolExecutor for CollectEvidence {
    fn execute(&self, ctx: &ToolContext<'_>, args: &Value) -> Result<Value, ToolError> {
        let empty = || ToolError::failed("empty_evidence", "no output and no error captured");
        let (source, exit_code, output, truncated) = match EvidenceSource::from_args(args)? {
            EvidenceSource::Command { command } => {
                let out = ctx.run(&command)?;
                let mut text = out.stdout.clone();
                if !out.stderr.is_empty() {
                    if !text.is_empty() && !text.ends_with('\n') {
                        text.push('\n');
                    }
                    text.push_str(&out.stderr);
                }
                if text.trim().is_empty() && out.success() {
                    return Err(empty());
                }
                ("command", out.exit_code, text, out.truncated)
            }
            EvidenceSource::Log { log_path } => {
                let path = ctx.resolve(&log_path)?;
                let text = std::fs::read_to_string(path.as_path()).map_err(|_| empty())?;
                if text.trim().is_empty() {
                    return Err(empty());
                }
                let cap = ctx.workspace.output_truncate_bytes;
                let truncated = text.len() > cap;
                let mut end = cap.min(text.len());
                while !text.is_char_boundary(end) {
                    end -= 1;
                }
                ("log", None, text[..end].to_string(), truncated)
            }
        };
        let failed = exit_code.is_some_and(|c| c != 0);
        Ok(json!({
            "source": source,
            "exit_code": exit_code,
            "output": output,
            "truncated": truncated,
            "signature": failure_signature(&output, failed),
        }))
    }
}

pub struct ApplyUnifiedPatch;

impl ToolExecutor for ApplyUnifiedPatch {
    fn execute(&self, ctx: &ToolContext<'_>, args: &Value) -> Result<Value, ToolError> {
        let target = args.get("target").and_then(Value::as_str).ok_or_else(|| ToolError::InvalidArgs("missing `target`".into()))?;
        let body = args.get("patch").and_then(Value::as_str).ok_or_else(|| ToolError::InvalidArgs("missing `patch`".into()))?;
        let scoped = ctx.resolve(target)?;
        let parsed = patch::parse(body).map_err(patch_error)?;
        let original = match std::fs::read_to_string(scoped.as_path()) {
            Ok(text) => text,
            Err(_) if parsed.is_creation() => String::new(),
            Err(_) => return Err(patch_error(PatchError::TargetMissing)),
        };
        let updated = patch::apply(&original, &parsed).map_err(patch_error)?;
        write_atomically(scoped.as_path(), updated.as_bytes())?;
        Ok(json!({
            "target": relative_to(ctx.root(), scoped.as_path()),
            "hunks": parsed.hunks.len(),
            "changed_lines": parsed.changed_lines(),
        }))
    }
}

pub fn patch_error(e: PatchError) -> ToolError {
    let code = match e {
        PatchError::MissingHunkMarker => "missing_hunk_marker",
        PatchError::Malformed { .. } => "malformed_patch",
        PatchError::HunkMismatch { .. } => "hunk_mismatch",
        PatchError::TargetMissing => "target_missing",
    };
    ToolError::failed(code, e.to_string())
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), ToolError> {
    let dir = path.parent().ok_or_else(|| ToolError::Io("target has no parent".into()))?;
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.patch-tmp"));
    std::fs::write(&tmp, bytes)?;
    if let Ok(meta) = std::fs::metadata(path) {
        std::fs::set_permissions(&tmp, meta.permissions())?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckType {
    CommandExitZero,
    FileExists,
    FileContains,
    OutputMatches,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckArgs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argv: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needle: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationCheck {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: CheckType,
    pub args: CheckArgs,
}

impl VerificationCheck {
    /// Checks that the type-specific arguments are present.
    pub fn shape_error(&self) -> Option<String> {
        let a = &self.args;
        let missing = match self.kind {
            CheckType::CommandExitZero if a.argv.as_ref().is_none_or(Vec::is_empty) => "argv",
            CheckType::FileExists if a.path.is_none() => "path",
            CheckType::FileContains if a.path.is_none() => "path",
            CheckType::FileContains if a.needle.is_none() => "needle",
            CheckType::OutputMatches if a.argv.as_ref().is_none_or(Vec::is_empty) => "argv",
            CheckType::OutputMatches if a.pattern.is_none() => "pattern",
            _ => return a.pattern.as_deref().and_then(|p| Regex::new(p).err()).map(|e| format!("check `{}`: {e}", self.name)),
        };
        Some(format!("check `{}` needs args.{missing}", self.name))
    }
}

pub fn parse_checks(args: &Value) -> Result<Vec<VerificationCheck>, ToolError> {
    let checks = args.get("checks").cloned().unwrap_or(Value::Null);
    serde_json::from_value(checks).map_err(|e| ToolError::InvalidArgs(format!("checks: {e}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn run_check(ctx: &ToolContext<'_>, check: &VerificationCheck) -> Result<CheckResult, ToolError> {
    if let Some(problem) = check.shape_error() {
        return Err(ToolError::InvalidArgs(problem));
    }
    let a = &check.args;
    let (passed, detail) = match check.kind {
        CheckType::CommandExitZero => {
            let out = ctx.run(a.argv.as_deref().unwrap_or_default())?;
            (out.success(), format!("exit code {:?}", out.exit_code))
        }
        CheckType::FileExists => {
            let p = ctx.resolve(a.path.as_deref().unwrap_or_default())?;
            let exists = p.as_path().is_file();
            (exists, if exists { "exists".into() } else { "missing".into() })
        }
        CheckType::FileContains => {
            let p = ctx.resolve(a.path.as_deref().unwrap_or_default())?;
            let needle = a.needle.as_deref().unwrap_or_default();
            match std::fs::read_to_string(p.as_path()) {
                Ok(text) if text.contains(needle) => (true, "needle found".into()),
                Ok(_) => (false, "needle not found".into()),
                Err(_) => (false, "file unreadable".into()),
            }
        }
        CheckType::OutputMatches => {
            let out = ctx.run(a.argv.as_deref().unwrap_or_default())?;
            let re = Regex::new(a.pattern.as_deref().unwrap_or_default()).map_err(|e| ToolError::InvalidArgs(e.to_string()))?;
            let text = format!("{}{}", out.stdout, out.stderr);
            let hit = re.is_match(&text);
            (hit, if hit { "pattern matched".into() } else { "pattern not matched".into() })
        }
    };
    Ok(CheckResult { name: check.name.clone(), passed, detail })
}

pub struct RunVerification;

impl ToolExecutor for RunVerification {
    fn execute(&self, ctx: &ToolContext<'_>, args: &Value) -> Result<Value, ToolError> {
        let checks = parse_checks(args)?;
        if checks.is_empty() {
            return Err(ToolError::InvalidArgs("verification needs a non-empty check list".into()));
        }
        let results: Vec<CheckResult> = checks
            .iter()
            .map(|c| match run_check(ctx, c) {
                Err(ToolError::CommandTimeout(s)) => Ok(CheckResult {
                    name: c.name.clone(),
                    passed: false,
                    detail: format!("timed out after {s} s"),
                }),
                other => other,
            })
            .collect::<Result<_, _>>()?;
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        Ok(json!({
            "all_passed": failed.is_empty(),
            "failed": failed,
            "checks": results,
        }))
    }
}

pub struct WriteArtifact;

impl ToolExecutor for WriteArtifact {
    fn execute(&self, ctx: &ToolContext<'_>, args: &Value) -> Result<Value, ToolError> {
        let raw = args.get("path").and_then(Value::as_str).ok_or_else(|| ToolError::InvalidArgs("missing `path`".into()))?;
        let content = args.get("content").and_then(Value::as_str).unwrap_or_default();
        let scoped = ctx.resolve(raw)?;
        if let Some(dir) = scoped.as_path().parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(scoped.as_path(), content)?;
        Ok(json!({
            "path": normalize_relative(&relative_to(ctx.root(), scoped.as_path())),
            "bytes": content.len(),
        }))
    }
}
