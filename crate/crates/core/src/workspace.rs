//! Workspace scoping and sandboxed command execution, plus the executor
//! interface every tool implementation plugs into.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::registry::PolicyConfig;
use crate::session::Session;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ToolError {
    #[error("path `{0}` escapes the workspace")]
    PathEscape(String),
    #[error("command `{0}` is not in the allowlist")]
    CommandNotAllowed(String),
    #[error("command timed out after {0} s")]
    CommandTimeout(u64),
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error("io error: {0}")]
    Io(String),
    /// Tool-specific failure with a stable code (e.g. `hunk_mismatch`).
    #[error("{code}: {message}")]
    Failed { code: String, message: String },
}

impl ToolError {
    pub fn failed(code: &str, message: impl Into<String>) -> Self {
        ToolError::Failed { code: code.to_string(), message: message.into() }
    }

    pub fn code(&self) -> &str {
        match self {
            ToolError::PathEscape(_) => "path_escape",
            ToolError::CommandNotAllowed(_) => "command_not_allowed",
            ToolError::CommandTimeout(_) => "command_timeout",
            ToolError::InvalidArgs(_) => "invalid_args",
            ToolError::Io(_) => "io",
            ToolError::Failed { code, .. } => code,
        }
    }
}

impl From<std::io::Error> for ToolError {
    fn from(e: std::io::Error) -> Self {
        ToolError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkspaceConfig {
    pub command_allowlist: Vec<String>,
    pub command_timeout_s: u64,
    pub output_truncate_bytes: usize,
}

impl Default for WorkspaceConfig {
    fn default() -> Self {
        Self { command_allowlist: Vec::new(), command_timeout_s: 60, output_truncate_bytes: 32 * 1024 }
    }
}

/// A model-supplied path proven to lie inside the workspace root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopedPath {
    pub raw: String,
    pub resolved: PathBuf,
}

impl ScopedPath {
    pub fn as_path(&self) -> &Path {
        &self.resolved
    }
}

/// Resolves `raw` against `root`, rejecting lexical traversal, absolute
/// paths outside the root, and symlinks whose targets leave the root.
pub fn resolve(root: &Path, raw: &str) -> Result<ScopedPath, ToolError> {
    let escape = || ToolError::PathEscape(raw.to_string());
    let root = root.canonicalize().map_err(|_| escape())?;
    let candidate = Path::new(raw);
    let relative = if candidate.is_absolute() {
        candidate.strip_prefix(&root).map_err(|_| escape())?.to_path_buf()
    } else {
        candidate.to_path_buf()
    };

    let mut clean = PathBuf::new();
    for component in relative.components() {
        match component {
            Component::Normal(part) => clean.push(part),
            Component::CurDir => {}
            Component::ParentDir => {
                if !clean.pop() {
                    return Err(escape());
                }
            }
            Component::RootDir | Component::Prefix(_) => return Err(escape()),
        }
    }

    // Physical check: the deepest existing ancestor must canonicalize
    // inside the root; the rest of the path is plain names.
    let mut existing = root.join(&clean);
    let mut tail = Vec::new();
    while existing.symlink_metadata().is_err() {
        match (existing.file_name(), existing.parent()) {
            (Some(name), Some(parent)) => {
                tail.push(name.to_os_string());
                existing = parent.to_path_buf();
            }
            _ => return Err(escape()),
        }
    }
    let mut resolved = existing.canonicalize().map_err(|_| escape())?;
    if !resolved.starts_with(&root) {
        return Err(escape());
    }
    for name in tail.into_iter().rev() {
        resolved.push(name);
    }
    Ok(ScopedPath { raw: raw.to_string(), resolved })
}

/// Lexical-only containment check, for paths that need not exist.
pub fn is_lexically_inside(raw: &str) -> bool {
    let path = Path::new(raw);
    if path.is_absolute() || raw.is_empty() {
        return false;
    }
    let mut depth = 0i32;
    for component in path.components() {
        match component {
            Component::Normal(_) => depth += 1,
            Component::CurDir => {}
            Component::ParentDir => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => return false,
        }
    }
    depth > 0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandOutput {
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub truncated: bool,
}

impl CommandOutput {
    pub fn success(&self) -> bool {
        self.exit_code == Some(0)
    }
}

/// Allowlist plus limits applied to one command invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandPolicy {
    pub allowlist: Vec<String>,
    pub timeout: Duration,
    pub truncate_bytes: usize,
}

impl CommandPolicy {
    pub fn allows(&self, program: &str) -> bool {
        self.allowlist.iter().any(|a| a == program)
    }
}

fn read_capped(mut reader: impl Read + Send + 'static, cap: usize) -> std::thread::JoinHandle<(Vec<u8>, bool)> {
    std::thread::spawn(move || {
        let mut kept = Vec::new();
        let mut truncated = false;
        let mut buf = [0u8; 8192];
        loop {
            match reader.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    if n > room {
                        truncated = true;
                    }
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        (kept, truncated)
    })
}

/// Rejects arguments that name a path outside `root`, including the value
/// part of `--flag=path`.
fn check_path_args(args: &[String], root: &Path) -> Result<(), ToolError> {
    for arg in args {
        let value = arg.split_once('=').map_or(arg.as_str(), |(_, v)| v);
        for candidate in [arg.as_str(), value] {
            if (candidate.contains('/') || candidate == "..") && resolve(root, candidate).is_err() {
                return Err(ToolError::PathEscape(arg.clone()));
            }
        }
    }
    Ok(())
}

/// Runs `argv` with `cwd` as working directory under `policy`. Arguments
/// that look like paths must stay inside `cwd`.
pub fn run_command(argv: &[String], cwd: &Path, policy: &CommandPolicy) -> Result<CommandOutput, ToolError> {
    let program = argv.first().ok_or_else(|| ToolError::InvalidArgs("empty argv".into()))?;
    if !policy.allows(program) {
        return Err(ToolError::CommandNotAllowed(program.clone()));
    }
    check_path_args(&argv[1..], cwd)?;
    let mut child = Command::new(program)
        .args(&argv[1..])
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let stdout = read_capped(child.stdout.take().expect("piped"), policy.truncate_bytes);
    let stderr = read_capped(child.stderr.take().expect("piped"), policy.truncate_bytes);
    let status = match child.wait_timeout(policy.timeout)? {
        Some(status) => status,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(ToolError::CommandTimeout(policy.timeout.as_secs()));
        }
    };
    let (out, out_cut) = stdout.join().unwrap_or_default();
    let (err, err_cut) = stderr.join().unwrap_or_default();
    Ok(CommandOutput {
        exit_code: status.code(),
        stdout: String::from_utf8_lossy(&out).into_owned(),
        stderr: String::from_utf8_lossy(&err).into_owned(),
        truncated: out_cut || err_cut,
    })
}

/// Everything an executor may consult while running one call.
pub struct ToolContext<'a> {
    pub session: &'a Session,
    /// Owning skill; `None` for orchestration tools.
    pub skill_id: Option<&'a str>,
    pub policy: Option<&'a PolicyConfig>,
    pub skill_config: Option<&'a BTreeMap<String, Value>>,
    pub workspace: &'a WorkspaceConfig,
}

impl ToolContext<'_> {
    pub fn root(&self) -> &Path {
        &self.session.workspace_root
    }

    pub fn resolve(&self, raw: &str) -> Result<ScopedPath, ToolError> {
        resolve(self.root(), raw)
    }

    /// Run-level allowlist, narrowed by the skill's own allowlist when it
    /// declares one.
    pub fn command_policy(&self) -> CommandPolicy {
        let allowlist = match self.policy {
            Some(p) if !p.command_allowlist.is_empty() => self
                .workspace
                .command_allowlist
                .iter()
                .filter(|c| p.command_allowlist.contains(c))
                .cloned()
                .collect(),
            _ => self.workspace.command_allowlist.clone(),
        };
        CommandPolicy {
            allowlist,
            timeout: Duration::from_secs(self.workspace.command_timeout_s),
            truncate_bytes: self.workspace.output_truncate_bytes,
        }
    }

    pub fn run(&self, argv: &[String]) -> Result<CommandOutput, ToolError> {
        run_command(argv, self.root(), &self.command_policy())
    }
}

/// An in-process action implementation bound to a manifest `executor_id`.
pub trait ToolExecutor: Send + Sync {
    fn execute(&self, ctx: &ToolContext<'_>, args: &Value) -> Result<Value, ToolError>;
}
