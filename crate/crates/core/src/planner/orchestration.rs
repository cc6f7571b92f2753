//! The always-available orchestration tools.
//!
//! `fs_read`, `fs_write` and `run_command` are plain executors. `delegate_subtask`
//! and `finish` need the runtime and are dispatched by the planner itself.

use serde_json::{json, Value};

use crate::backend::ToolSpec;
use crate::registry::{validate, ParamSchema, ValidatedArgs, ValidationError};
use crate::workspace::{ToolContext, ToolError, ToolExecutor};

pub const TOOL_READ: &str = "fs_read";
pub const TOOL_WRITE: &str = "fs_write";
pub const TOOL_RUN: &str = "run_command";
pub const TOOL_DELEGATE: &str = "delegate_subtask";
pub const TOOL_FINISH: &str = "finish";

pub const ORCHESTRATION_TOOLS: [&str; 5] = [TOOL_READ, TOOL_WRITE, TOOL_RUN, TOOL_DELEGATE, TOOL_FINISH];

fn schema_json(name: &str) -> Value {
    match name {
        TOOL_READ => json!({
            "type": "object",
            "properties": {"path": {"type": "string", "description": "workspace-relative path"}},
            "required": ["path"]
        }),
        TOOL_WRITE => json!({
            "type": "object",
            "properties": {
                "path": {"type": "string", "description": "workspace-relative path"},
                "content": {"type": "string"}
            },
            "required": ["path", "content"]
        }),
        TOOL_RUN => json!({
            "type": "object",
            "properties": {"argv": {"type": "array", "items": {"type": "string"}, "minItems": 1}},
            "required": ["argv"]
        }),
        TOOL_DELEGATE => json!({
            "type": "object",
            "properties": {
                "task_text": {"type": "string"},
                "task_type": {"type": "string"},
                "subdir": {"type": "string", "description": "workspace-relative root for the sub-task", "default": "."},
                "done_when": {"type": "string", "default": ""}
            },
            "required": ["task_text", "task_type"]
        }),
        TOOL_FINISH => json!({
            "type": "object",
            "properties": {"report_text": {"type": "string", "default": ""}}
        }),
        _ => json!({"type": "object"}),
    }
}

fn description(name: &str) -> &'static str {
    match name {
        TOOL_READ => "Read a workspace file.",
        TOOL_WRITE => "Write a workspace file, creating parent directories.",
        TOOL_RUN => "Run an allowlisted command in the workspace root.",
        TOOL_DELEGATE => "Hand a narrower sub-task to a new sub-session; its report arrives later.",
        TOOL_FINISH => "Finish the session with a report. Refused while completion gates are open.",
        _ => "",
    }
}

pub fn params(name: &str) -> ParamSchema {
    serde_json::from_value(schema_json(name)).expect("orchestration schemas are valid")
}

pub fn tool_specs() -> Vec<ToolSpec> {
    ORCHESTRATION_TOOLS
        .iter()
        .map(|n| ToolSpec { name: n.to_string(), description: description(n).to_string(), params: schema_json(n) })
        .collect()
}

pub fn is_orchestration_tool(name: &str) -> bool {
    ORCHESTRATION_TOOLS.contains(&name)
}

pub fn validate_args(name: &str, args: &Value) -> Result<ValidatedArgs, Vec<ValidationError>> {
    validate(&params(name), args)
}

fn truncate(text: &str, cap: usize) -> (String, bool) {
    if text.len() <= cap {
        return (text.to_string(), false);
    }
    let mut end = cap;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    (text[..end].to_string(), true)
}

pub struct FsRead;

impl ToolExecutor for FsRead {
    fn execute(&self, ctx: &ToolContext<'_>, args: &Value) -> Result<Value, ToolError> {
        let raw = args["path"].as_str().unwrap_or_default();
        let path = ctx.resolve(raw)?;
        let text = std::fs::read_to_string(path.as_path())?;
        let (content, truncated) = truncate(&text, ctx.workspace.output_truncate_bytes);
        Ok(json!({"path": raw, "content": content, "truncated": truncated}))
    }
}

pub struct FsWrite;

impl ToolExecutor for FsWrite {
    fn execute(&self, ctx: &ToolContext<'_>, args: &Value) -> Result<Value, ToolError> {
        let raw = args["path"].as_str().unwrap_or_default();
        let content = args["content"].as_str().unwrap_or_default();
        let path = ctx.resolve(raw)?;
        if let Some(dir) = path.as_path().parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path.as_path(), content)?;
        Ok(json!({"path": raw, "bytes": content.len()}))
    }
}

pub struct RunCommand;

impl ToolExecutor for RunCommand {
    fn execute(&self, ctx: &ToolContext<'_>, args: &Value) -> Result<Value, ToolError> {
        let argv: Vec<String> =
            serde_json::from_value(args["argv"].clone()).map_err(|e| ToolError::InvalidArgs(e.to_string()))?;
        let out = ctx.run(&argv)?;
        Ok(json!({
            "exit_code": out.exit_code,
            "stdout": out.stdout,
            "stderr": out.stderr,
            "truncated": out.truncated,
        }))
    }
}

/// Executor for the three plain orchestration tools.
pub fn executor(name: &str) -> Option<&'static dyn ToolExecutor> {
    match name {
        TOOL_READ => Some(&FsRead),
        TOOL_WRITE => Some(&FsWrite),
        TOOL_RUN => Some(&RunCommand),
        _ => None,
    }
}
