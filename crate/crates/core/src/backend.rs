//! The model boundary: request/response types, the scripted backend used by
//! tests and replays, a chat-completions HTTP backend, and the per-request
//! usage log (`requests.jsonl`).

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::session::RawToolCall;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
}

impl ChatMessage {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self { role, text: text.into() }
    }
}

/// A tool definition as the model sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub session_id: String,
    pub messages: Vec<ChatMessage>,
    pub tools: Vec<ToolSpec>,
}

impl ModelRequest {
    pub fn has_tool(&self, name: &str) -> bool {
        self.tools.iter().any(|t| t.name == name)
    }

    /// Messages after the most recent assistant turn.
    pub fn current_turn(&self) -> &[ChatMessage] {
        let start = self
            .messages
            .iter()
            .rposition(|m| m.role == Role::Assistant)
            .map_or(0, |i| i + 1);
        &self.messages[start..]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub provider: String,
    pub response_model: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cache_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: Option<String>,
    pub tool_call: Option<RawToolCall>,
    pub usage: UsageRecord,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("script exhausted: no step matches the request")]
    ScriptExhausted,
    #[error("script calls `{0}`, which is not visible in this request")]
    ScriptToolNotVisible(String),
    #[error("model backend error (status {status:?}, retryable {retryable}): {message}")]
    Model {
        status: Option<u16>,
        retryable: bool,
        message: String,
    },
}

impl BackendError {
    pub fn retryable(&self) -> bool {
        matches!(self, BackendError::Model { retryable: true, .. })
    }
}

pub trait ModelBackend: Send + Sync {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError>;
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// Characters per synthetic token.
pub const SCRIPT_CHARS_PER_UNIT: u64 = 4;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepPredicate {
    /// Matches when a message of the current turn contains this text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_contains: Option<String>,
    /// Matches when the named tool is in the request's tool list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_visible: Option<String>,
}

impl StepPredicate {
    fn matches(&self, request: &ModelRequest) -> bool {
        let phase_ok = self
            .phase_contains
            .as_ref()
            .is_none_or(|needle| request.current_turn().iter().any(|m| m.text.contains(needle.as_str())));
        let tool_ok = self.tool_visible.as_ref().is_none_or(|name| request.has_tool(name));
        phase_ok && tool_ok
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<RawToolCall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<StepPredicate>,
    pub respond: ScriptResponse,
}

impl ScriptStep {
    pub fn text(text: &str) -> Self {
        Self { when: None, respond: ScriptResponse { text: Some(text.to_string()), tool_call: None } }
    }

    pub fn call(name: &str, args: Value) -> Self {
        Self {
            when: None,
            respond: ScriptResponse { text: None, tool_call: Some(RawToolCall { name: name.to_string(), args }) },
        }
    }

    /// Same call, but only eligible while `name` is visible.
    pub fn call_when_visible(name: &str, args: Value) -> Self {
        let mut step = Self::call(name, args);
        step.when = Some(StepPredicate { tool_visible: Some(name.to_string()), phase_contains: None });
        step
    }
}

/// Replays a fixed list of steps; each request consumes the first unconsumed
/// step whose predicate matches.
#[derive(Debug)]
pub struct ScriptedBackend {
    steps: Vec<ScriptStep>,
    consumed: Mutex<Vec<bool>>,
}

impl ScriptedBackend {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        let consumed = Mutex::new(vec![false; steps.len()]);
        Self { steps, consumed }
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let steps: Vec<ScriptStep> =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self::new(steps))
    }

    pub fn remaining(&self) -> usize {
        self.consumed.lock().unwrap().iter().filter(|c| !**c).count()
    }
}

fn units(chars: usize) -> u64 {
    (chars as u64).div_ceil(SCRIPT_CHARS_PER_UNIT)
}

/// Deterministic synthetic size of a request, in script units.
pub fn request_units(request: &ModelRequest) -> u64 {
    let message_chars: usize = request.messages.iter().map(|m| m.text.chars().count()).sum();
    let tool_chars: usize = request
        .tools
        .iter()
        .map(|t| serde_json::to_string(t).expect("tool spec serializes").chars().count())
        .sum();
    units(message_chars + tool_chars)
}

fn response_units(response: &ScriptResponse) -> u64 {
    let text = response.text.as_deref().map_or(0, |t| t.chars().count());
    let call = response
        .tool_call
        .as_ref()
        .map_or(0, |c| serde_json::to_string(c).expect("call serializes").chars().count());
    units(text + call)
}

impl ModelBackend for ScriptedBackend {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        let mut consumed = self.consumed.lock().unwrap();
        let index = self
            .steps
            .iter()
            .enumerate()
            .find(|(i, step)| !consumed[*i] && step.when.as_ref().is_none_or(|w| w.matches(request)))
            .map(|(i, _)| i)
            .ok_or(BackendError::ScriptExhausted)?;
        consumed[index] = true;
        let respond = &self.steps[index].respond;
        if let Some(call) = &respond.tool_call {
            if !request.has_tool(&call.name) {
                return Err(BackendError::ScriptToolNotVisible(call.name.clone()));
            }
        }
        let input_tokens = request_units(request);
        let output_tokens = response_units(respond);
        Ok(ModelResponse {
            text: respond.text.clone(),
            tool_call: respond.tool_call.clone(),
            usage: UsageRecord {
                provider: "scripted".into(),
                response_model: "script".into(),
                input_tokens,
                output_tokens,
                cache_tokens: 0,
                total_tokens: input_tokens + output_tokens,
            },
        })
    }
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl EndpointConfig {
    /// Reads `MODEL_BASE_URL`, `MODEL_API_KEY` and `MODEL_NAME`.
    pub fn from_env() -> Result<Self, String> {
        let base_url = std::env::var("MODEL_BASE_URL").map_err(|_| "MODEL_BASE_URL is not set".to_string())?;
        let model = std::env::var("MODEL_NAME").map_err(|_| "MODEL_NAME is not set".to_string())?;
        Ok(Self {
            base_url,
            api_key: std::env::var("MODEL_API_KEY").ok(),
            model,
            timeout: Duration::from_secs(120),
        })
    }
}

pub struct HttpBackend {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Model { status: None, retryable: false, message: e.to_string() })?;
        Ok(Self { config, client })
    }
}

/// Chat-completions request body for `request`.
pub fn chat_completions_body(model: &str, request: &ModelRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| json!({"role": m.role, "content": m.text}))
        .collect();
    let mut body = json!({"model": model, "messages": messages});
    if !request.tools.is_empty() {
        body["tools"] = request
            .tools
            .iter()
            .map(|t| {
                json!({"type": "function", "function": {
                    "name": t.name, "description": t.description, "parameters": t.params
                }})
            })
            .collect();
    }
    body
}

fn parse_error(message: impl Into<String>) -> BackendError {
    BackendError::Model { status: None, retryable: false, message: message.into() }
}

/// Normalizes a chat-completions response body.
pub fn parse_chat_completion(body: &Value, provider: &str) -> Result<ModelResponse, BackendError> {
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| parse_error("response has no choices[0].message"))?;
    let text = message.get("content").and_then(Value::as_str).map(str::to_string);
    let calls = message.get("tool_calls").and_then(Value::as_array).cloned().unwrap_or_default();
    if calls.len() > 1 {
        return Err(parse_error(format!("{} tool calls in one response; exactly one allowed", calls.len())));
    }
    let tool_call = match calls.first() {
        None => None,
        Some(call) => {
            let name = call
                .pointer("/function/name")
                .and_then(Value::as_str)
                .ok_or_else(|| parse_error("tool call without function.name"))?;
            let args = match call.pointer("/function/arguments") {
                Some(Value::String(raw)) => serde_json::from_str(raw)
                    .map_err(|e| parse_error(format!("tool arguments are not JSON: {e}")))?,
                Some(v @ Value::Object(_)) => v.clone(),
                None => json!({}),
                Some(other) => return Err(parse_error(format!("unexpected tool arguments {other}"))),
            };
            Some(RawToolCall { name: name.to_string(), args })
        }
    };
    let usage = body.get("usage").cloned().unwrap_or_else(|| json!({}));
    let field = |p: &str| usage.pointer(p).and_then(Value::as_u64).unwrap_or(0);
    let prompt = field("/prompt_tokens");
    let cache = field("/prompt_tokens_details/cached_tokens").min(prompt);
    let input_tokens = prompt - cache;
    let output_tokens = field("/completion_tokens");
    let total_tokens = usage
        .get("total_tokens")
        .and_then(Value::as_u64)
        .unwrap_or(input_tokens + output_tokens + cache);
    Ok(ModelResponse {
        text,
        tool_call,
        usage: UsageRecord {
            provider: provider.to_string(),
            response_model: body.get("model").and_then(Value::as_str).unwrap_or("unknown").to_string(),
            input_tokens,
            output_tokens,
            cache_tokens: cache,
            total_tokens,
        },
    })
}

impl ModelBackend for HttpBackend {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut builder = self.client.post(&url).json(&chat_completions_body(&self.config.model, request));
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| BackendError::Model {
            status: None,
            retryable: e.is_timeout() || e.is_connect(),
            message: e.to_string(),
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Model {
            status: Some(status.as_u16()),
            retryable: true,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(BackendError::Model {
                status: Some(status.as_u16()),
                retryable: status.as_u16() == 429 || status.is_server_error(),
                message: text.chars().take(500).collect(),
            });
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| BackendError::Model {
            status: Some(status.as_u16()),
            retryable: false,
            message: format!("unparseable response body: {e}"),
        })?;
        parse_chat_completion(&body, "http")
    }
}

// ---------------------------------------------------------------------------
// Usage log
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
#[error("usage log write failed on {path}: {source}")]
pub struct LogWriteError {
    pub path: PathBuf,
    #[source]
    pub source: std::io::Error,
}

/// One `requests.jsonl` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageLine {
    pub ts: f64,
    pub session_id: String,
    pub provider: String,
    pub response_model: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cache_tokens: u64,
    pub total_tokens: u64,
    pub assistant_text: Option<String>,
    pub tool_call: Option<RawToolCall>,
}

/// Append-only request log. Without a path it only keeps lines in memory.
#[derive(Debug, Default)]
pub struct UsageLog {
    path: Option<PathBuf>,
    file: Option<File>,
    lines: Vec<UsageLine>,
}

impl UsageLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, LogWriteError> {
        let path = path.into();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| LogWriteError { path: path.clone(), source })?;
        Ok(Self { path: Some(path), file: Some(file), lines: Vec::new() })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Lines appended through this handle.
    pub fn lines(&self) -> &[UsageLine] {
        &self.lines
    }

    pub fn append(&mut self, session_id: &str, response: &ModelResponse) -> Result<&UsageLine, LogWriteError> {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        let usage = &response.usage;
        let line = UsageLine {
            ts,
            session_id: session_id.to_string(),
            provider: usage.provider.clone(),
            response_model: usage.response_model.clone(),
            input_tokens: usage.input_tokens,
            output_tokens: usage.output_tokens,
            cache_tokens: usage.cache_tokens,
            total_tokens: usage.total_tokens,
            assistant_text: response.text.clone(),
            tool_call: response.tool_call.clone(),
        };
        if let (Some(file), Some(path)) = (self.file.as_mut(), self.path.as_ref()) {
            let mut text = serde_json::to_string(&line).expect("usage line serializes");
            text.push('\n');
            file.write_all(text.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| LogWriteError { path: path.clone(), source })?;
        }
        self.lines.push(line);
        Ok(self.lines.last().expect("just pushed"))
    }
}

/// Parses a `requests.jsonl` file.
pub fn read_usage_log(path: &Path) -> std::io::Result<Vec<UsageLine>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}
