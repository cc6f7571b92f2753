//! Sessions, the typed history log and skill-local state.
//!
//! Each session owns an append-only event log at `<store>/sessions/<id>.log`,
//! one JSON record per line. Skill state writes are recorded inline as
//! `skill_state_snapshot` records carrying the seq of the last history event,
//! so any record-boundary prefix of a log reconstructs a consistent session.
//! `<store>/index.json` is the session directory.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::UsageRecord;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown parent session `{0}`")]
    UnknownParent(String),
    #[error("workspace `{child}` is outside parent workspace `{parent}`")]
    WorkspaceEscape { child: PathBuf, parent: PathBuf },
    #[error("workspace root `{0}` does not exist")]
    MissingWorkspace(PathBuf),
    #[error("session `{0}` is closed")]
    SessionClosed(String),
    #[error("tool result for unknown call id `{0}`")]
    OrphanToolResult(String),
    #[error("session `{0}` already has a completion event")]
    DuplicateCompletion(String),
    #[error("corrupt store at {path}:{line}: {reason}")]
    CorruptStore { path: PathBuf, line: usize, reason: String },
    #[error("store io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    AwaitingFollowup,
    Completed,
    Failed,
}

impl SessionStatus {
    pub fn is_open(self) -> bool {
        matches!(self, SessionStatus::Active | SessionStatus::AwaitingFollowup)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Active => "active",
            SessionStatus::AwaitingFollowup => "awaiting_followup",
            SessionStatus::Completed => "completed",
            SessionStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cache_tokens: u64,
    pub total_tokens: u64,
    pub request_count: u64,
}

impl UsageTotals {
    pub fn add(&mut self, record: &UsageRecord) {
        self.input_tokens += record.input_tokens;
        self.output_tokens += record.output_tokens;
        self.cache_tokens += record.cache_tokens;
        self.total_tokens += record.total_tokens;
        self.request_count += 1;
    }
}

/// A tool call exactly as the model produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawToolCall {
    pub name: String,
    pub args: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Event {
    UserMessage {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<String>,
    },
    AssistantMessage {
        #[serde(default)]
        text: Option<String>,
        #[serde(default)]
        tool_call: Option<RawToolCall>,
        usage: UsageRecord,
    },
    ToolCall {
        call_id: String,
        name: String,
        args: Value,
    },
    ToolResult {
        call_id: String,
        name: String,
        ok: bool,
        output: Value,
    },
    GuidanceInjection {
        skill_id: String,
        text: String,
        /// Per-turn guidance: kept for the trace, not replayed into later requests.
        #[serde(default)]
        transient: bool,
    },
    Completion {
        report: String,
    },
    SystemNote {
        text: String,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::UserMessage { .. } => "user_message",
            Event::AssistantMessage { .. } => "assistant_message",
            Event::ToolCall { .. } => "tool_call",
            Event::ToolResult { .. } => "tool_result",
            Event::GuidanceInjection { .. } => "guidance_injection",
            Event::Completion { .. } => "completion",
            Event::SystemNote { .. } => "system_note",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub event: Event,
}

/// Skill state as of a given history seq.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub seq: u64,
    pub skill_id: String,
    pub state: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub parent_id: Option<String>,
    pub workspace_root: PathBuf,
    pub done_when: String,
    pub task_text: String,
    pub task_type: String,
    pub routed_skills: Vec<String>,
    pub status: SessionStatus,
    pub history: Vec<HistoryEvent>,
    pub skill_state: BTreeMap<String, Value>,
    /// Every skill state write in order; the trace uses it for phase annotations.
    pub snapshots: Vec<StateSnapshot>,
    pub usage: UsageTotals,
}

impl Session {
    pub fn last_seq(&self) -> u64 {
        self.history.last().map_or(0, |e| e.seq)
    }

    pub fn skill_state(&self, skill_id: &str) -> Value {
        self.skill_state.get(skill_id).cloned().unwrap_or_else(empty_state)
    }

    pub fn has_completion(&self) -> bool {
        self.history.iter().any(|e| matches!(e.event, Event::Completion { .. }))
    }

    fn has_call(&self, call_id: &str) -> bool {
        self.history
            .iter()
            .any(|e| matches!(&e.event, Event::ToolCall { call_id: c, .. } if c == call_id))
    }
}

/// The document returned for skill state that was never written.
pub fn empty_state() -> Value {
    Value::Object(Default::default())
}

/// Parameters for a new session.
#[derive(Debug, Clone)]
pub struct NewSession {
    pub task_text: String,
    pub task_type: String,
    pub workspace_root: PathBuf,
    pub done_when: String,
    pub parent_id: Option<String>,
    pub routed_skills: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    session_id: String,
    parent_id: Option<String>,
    status: SessionStatus,
    workspace_root: PathBuf,
    task_text: String,
    task_type: String,
    done_when: String,
    routed_skills: Vec<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Index {
    sessions: Vec<IndexEntry>,
}

#[derive(Serialize)]
struct SnapshotLine<'a> {
    seq: u64,
    kind: &'static str,
    skill_id: &'a str,
    state: &'a Value,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LogLine {
    Snapshot {
        seq: u64,
        #[allow(dead_code)]
        kind: SnapshotTag,
        skill_id: String,
        state: Value,
    },
    Event(HistoryEvent),
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum SnapshotTag {
    SkillStateSnapshot,
}

/// Owns all sessions. With a backing directory every mutation is written
/// and synced before the call returns.
#[derive(Debug, Default)]
pub struct SessionStore {
    dir: Option<PathBuf>,
    sessions: BTreeMap<String, Session>,
    next_id: u64,
    warnings: Vec<String>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a store directory and loads every session in it.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        let sessions_dir = dir.join("sessions");
        fs::create_dir_all(&sessions_dir).map_err(io_err(&sessions_dir))?;
        let mut store = SessionStore { dir: Some(dir.clone()), ..Default::default() };

        let index_path = dir.join("index.json");
        let index: Index = match fs::read(&index_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptStore {
                path: index_path.clone(),
                line: e.line(),
                reason: e.to_string(),
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Index::default(),
            Err(e) => return Err(io_err(&index_path)(e)),
        };

        for entry in index.sessions {
            let log_path = sessions_dir.join(format!("{}.log", entry.session_id));
            let mut session = Session {
                session_id: entry.session_id.clone(),
                parent_id: entry.parent_id,
                workspace_root: entry.workspace_root,
                done_when: entry.done_when,
                task_text: entry.task_text,
                task_type: entry.task_type,
                routed_skills: entry.routed_skills,
                status: entry.status,
                history: Vec::new(),
                skill_state: BTreeMap::new(),
                snapshots: Vec::new(),
                usage: UsageTotals::default(),
            };
            if let Some(warning) = load_log(&log_path, &mut session)? {
                tracing::warn!("{warning}");
                store.warnings.push(warning);
            }
            // completion is only real if the log says so
            if session.has_completion() {
                session.status = SessionStatus::Completed;
            } else if session.status == SessionStatus::Completed {
                session.status = SessionStatus::AwaitingFollowup;
            }
            if let Some(n) = parse_id(&session.session_id) {
                store.next_id = store.next_id.max(n);
            }
            store.sessions.insert(session.session_id.clone(), session);
        }
        Ok(store)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Warnings produced while loading (torn tails that were truncated).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn get(&self, session_id: &str) -> Result<&Session, StoreError> {
        self.sessions
            .get(session_id)
            .ok_or_else(|| StoreError::UnknownSession(session_id.to_string()))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn create_session(&mut self, new: NewSession) -> Result<String, StoreError> {
        let root = new
            .workspace_root
            .canonicalize()
            .map_err(|_| StoreError::MissingWorkspace(new.workspace_root.clone()))?;
        if !root.is_dir() {
            return Err(StoreError::MissingWorkspace(new.workspace_root));
        }
        if let Some(parent_id) = &new.parent_id {
            let parent = self
                .sessions
                .get(parent_id)
                .ok_or_else(|| StoreError::UnknownParent(parent_id.clone()))?;
            if !root.starts_with(&parent.workspace_root) {
                return Err(StoreError::WorkspaceEscape { child: root, parent: parent.workspace_root.clone() });
            }
        }
        self.next_id += 1;
        let session_id = format_id(self.next_id);
        let session = Session {
            session_id: session_id.clone(),
            parent_id: new.parent_id,
            workspace_root: root,
            done_when: new.done_when,
            task_text: new.task_text.clone(),
            task_type: new.task_type,
            routed_skills: new.routed_skills,
            status: SessionStatus::Active,
            history: Vec::new(),
            skill_state: BTreeMap::new(),
            snapshots: Vec::new(),
            usage: UsageTotals::default(),
        };
        if let Some(dir) = &self.dir {
            let log = dir.join("sessions").join(format!("{session_id}.log"));
            File::create(&log).map_err(io_err(&log))?;
        }
        self.sessions.insert(session_id.clone(), session);
        self.write_index()?;
        self.append_event(&session_id, Event::UserMessage { text: new.task_text, source: None })?;
        Ok(session_id)
    }

    /// Appends an event; returns its seq. Durable before return when the
    /// store is directory-backed.
    pub fn append_event(&mut self, session_id: &str, event: Event) -> Result<u64, StoreError> {
        let session = self
            .sessions
            .get(session_id)
            .ok_or_else(|| StoreError::UnknownSession(session_id.to_string()))?;
        if !session.status.is_open() {
            return Err(StoreError::SessionClosed(session_id.to_string()));
        }
        match &event {
            Event::ToolResult { call_id, .. } if !session.has_call(call_id) => {
                return Err(StoreError::OrphanToolResult(call_id.clone()));
            }
            Event::Completion { .. } if session.has_completion() => {
                return Err(StoreError::DuplicateCompletion(session_id.to_string()));
            }
            _ => {}
        }
        let record = HistoryEvent { seq: session.last_seq() + 1, event };
        let line = serde_json::to_string(&record).expect("event serializes");
        self.write_line(session_id, &line)?;
        let session = self.sessions.get_mut(session_id).expect("checked above");
        if let Event::AssistantMessage { usage, .. } = &record.event {
            session.usage.add(usage);
        }
        let seq = record.seq;
        session.history.push(record);
        Ok(seq)
    }

    pub fn get_skill_state(&self, session_id: &str, skill_id: &str) -> Result<Value, StoreError> {
        Ok(self.get(session_id)?.skill_state(skill_id))
    }

    pub fn put_skill_state(&mut self, session_id: &str, skill_id: &str, state: Value) -> Result<Value, StoreError> {
        let session = self.get(session_id)?;
        if !session.status.is_open() {
            return Err(StoreError::SessionClosed(session_id.to_string()));
        }
        let seq = session.last_seq();
        let line = serde_json::to_string(&SnapshotLine {
            seq,
            kind: "skill_state_snapshot",
            skill_id,
            state: &state,
        })
        .expect("snapshot serializes");
        self.write_line(session_id, &line)?;
        let session = self.sessions.get_mut(session_id).expect("checked above");
        session.skill_state.insert(skill_id.to_string(), state.clone());
        session.snapshots.push(StateSnapshot { seq, skill_id: skill_id.to_string(), state: state.clone() });
        Ok(state)
    }

    pub fn set_status(&mut self, session_id: &str, status: SessionStatus) -> Result<(), StoreError> {
        let session = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| StoreError::UnknownSession(session_id.to_string()))?;
        if session.status == status {
            return Ok(());
        }
        session.status = status;
        self.write_index()
    }

    fn write_line(&self, session_id: &str, line: &str) -> Result<(), StoreError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join("sessions").join(format!("{session_id}.log"));
        let mut file = OpenOptions::new().append(true).create(true).open(&path).map_err(io_err(&path))?;
        file.write_all(format!("{line}\n").as_bytes()).map_err(io_err(&path))?;
        file.sync_data().map_err(io_err(&path))
    }

    fn write_index(&self) -> Result<(), StoreError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let index = Index {
            sessions: self
                .sessions
                .values()
                .map(|s| IndexEntry {
                    session_id: s.session_id.clone(),
                    parent_id: s.parent_id.clone(),
                    status: s.status,
                    workspace_root: s.workspace_root.clone(),
                    task_text: s.task_text.clone(),
                    task_type: s.task_type.clone(),
                    done_when: s.done_when.clone(),
                    routed_skills: s.routed_skills.clone(),
                })
                .collect(),
        };
        let path = dir.join("index.json");
        let tmp = dir.join("index.json.tmp");
        let bytes = serde_json::to_vec_pretty(&index).expect("index serializes");
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}

fn format_id(n: u64) -> String {
    format!("s{n:04}")
}

fn parse_id(id: &str) -> Option<u64> {
    id.strip_prefix('s')?.parse().ok()
}

/// Replays one session log. A torn final record is cut off (and the file
/// truncated to the last good boundary); damage anywhere else is fatal.
fn load_log(path: &Path, session: &mut Session) -> Result<Option<String>, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut offset = 0usize;
    let mut line_no = 0usize;
    let mut warning = None;
    while offset < bytes.len() {
        line_no += 1;
        let rest = &bytes[offset..];
        let (line, terminated) = match rest.iter().position(|&b| b == b'\n') {
            Some(end) => (&rest[..end], true),
            None => (rest, false),
        };
        let parsed = serde_json::from_slice::<LogLine>(line);
        let is_last = offset + line.len() + usize::from(terminated) >= bytes.len();
        let record = match parsed {
            Ok(record) if terminated => record,
            Ok(_) | Err(_) if is_last => {
                warning = Some(format!(
                    "{}: dropped torn record at line {line_no} ({} bytes)",
                    path.display(),
                    rest.len()
                ));
                let file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
                file.set_len(offset as u64).map_err(io_err(path))?;
                file.sync_data().map_err(io_err(path))?;
                break;
            }
            Ok(_) => unreachable!("unterminated line is always the last"),
            Err(e) => {
                return Err(StoreError::CorruptStore {
                    path: path.to_path_buf(),
                    line: line_no,
                    reason: e.to_string(),
                })
            }
        };
        match record {
            LogLine::Event(event) => {
                if event.seq != session.last_seq() + 1 {
                    return Err(StoreError::CorruptStore {
                        path: path.to_path_buf(),
                        line: line_no,
                        reason: format!("expected seq {}, found {}", session.last_seq() + 1, event.seq),
                    });
                }
                if let Event::AssistantMessage { usage, .. } = &event.event {
                    session.usage.add(usage);
                }
                session.history.push(event);
            }
            LogLine::Snapshot { seq, skill_id, state, .. } => {
                session.skill_state.insert(skill_id.clone(), state.clone());
                session.snapshots.push(StateSnapshot { seq, skill_id, state });
            }
        }
        offset += line.len() + 1;
    }
    Ok(warning)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn new_session(root: &Path, parent: Option<&str>) -> NewSession {
        NewSession {
            task_text: "fix it".into(),
            task_type: "code_repair".into(),
            workspace_root: root.to_path_buf(),
            done_when: "tests pass".into(),
            parent_id: parent.map(str::to_string),
            routed_skills: vec![],
        }
    }

    #[test]
    fn child_inside_parent_root_is_created() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir(tmp.path().join("sub")).unwrap();
        let mut store = SessionStore::in_memory();
        let parent = store.create_session(new_session(tmp.path(), None)).unwrap();
        let child = store.create_session(new_session(&tmp.path().join("sub"), Some(&parent))).unwrap();
        assert_eq!(store.get(&child).unwrap().parent_id.as_deref(), Some(parent.as_str()));
        assert_eq!(store.get(&parent).unwrap().parent_id, None);
        let first = &store.get(&child).unwrap().history[0];
        assert_eq!(first.seq, 1);
        assert!(matches!(&first.event, Event::UserMessage { text, .. } if text == "fix it"));
    }

    #[test]
    fn child_outside_parent_root_escapes() {
        let parent_root = tempfile::tempdir().unwrap();
        let elsewhere = tempfile::tempdir().unwrap();
        let mut store = SessionStore::in_memory();
        let parent = store.create_session(new_session(parent_root.path(), None)).unwrap();
        let err = store.create_session(new_session(elsewhere.path(), Some(&parent))).unwrap_err();
        assert!(matches!(err, StoreError::WorkspaceEscape { .. }));
        let err = store.create_session(new_session(parent_root.path(), Some("s9999"))).unwrap_err();
        assert!(matches!(err, StoreError::UnknownParent(_)));
    }

    #[test]
    fn orphan_result_and_monotone_seq() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = SessionStore::in_memory();
        let id = store.create_session(new_session(tmp.path(), None)).unwrap();
        let err = store
            .append_event(&id, Event::ToolResult { call_id: "c1".into(), name: "x".into(), ok: true, output: json!({}) })
            .unwrap_err();
        assert!(matches!(err, StoreError::OrphanToolResult(_)));
        let a = store.append_event(&id, Event::SystemNote { text: "a".into() }).unwrap();
        let b = store.append_event(&id, Event::SystemNote { text: "b".into() }).unwrap();
        assert_eq!(b, a + 1);
    }

    #[test]
    fn skill_state_defaults_and_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = SessionStore::in_memory();
        let id = store.create_session(new_session(tmp.path(), None)).unwrap();
        assert_eq!(store.get_skill_state(&id, "repair").unwrap(), json!({}));
        store.put_skill_state(&id, "repair", json!({"phase": "patch"})).unwrap();
        assert_eq!(store.get_skill_state(&id, "repair").unwrap(), json!({"phase": "patch"}));
        assert_eq!(store.get_skill_state(&id, "other").unwrap(), json!({}));
    }

    #[test]
    fn closed_session_rejects_writes() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = SessionStore::in_memory();
        let id = store.create_session(new_session(tmp.path(), None)).unwrap();
        store.set_status(&id, SessionStatus::Completed).unwrap();
        assert!(matches!(
            store.append_event(&id, Event::SystemNote { text: "x".into() }),
            Err(StoreError::SessionClosed(_))
        ));
        assert!(matches!(store.put_skill_state(&id, "a", json!({})), Err(StoreError::SessionClosed(_))));
    }

    #[test]
    fn reload_round_trip_and_torn_tail() {
        let ws = tempfile::tempdir().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let mut store = SessionStore::open(dir.path()).unwrap();
            let id = store.create_session(new_session(ws.path(), None)).unwrap();
            for i in 0..9 {
                store.append_event(&id, Event::SystemNote { text: format!("note {i}") }).unwrap();
            }
            id
        };
        let store = SessionStore::open(dir.path()).unwrap();
        assert_eq!(store.get(&id).unwrap().history.len(), 10);
        assert!(store.warnings().is_empty());

        let log = dir.path().join("sessions").join(format!("{id}.log"));
        let bytes = fs::read(&log).unwrap();
        fs::write(&log, &bytes[..bytes.len() - 7]).unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        assert_eq!(store.get(&id).unwrap().history.len(), 9);
        assert_eq!(store.warnings().len(), 1);
    }

    #[test]
    fn empty_store_has_no_sessions() {
        let dir = tempfile::tempdir().unwrap();
        assert!(SessionStore::open(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn mid_log_damage_is_corrupt() {
        let ws = tempfile::tempdir().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let mut store = SessionStore::open(dir.path()).unwrap();
            let id = store.create_session(new_session(ws.path(), None)).unwrap();
            store.append_event(&id, Event::SystemNote { text: "x".into() }).unwrap();
            id
        };
        let log = dir.path().join("sessions").join(format!("{id}.log"));
        let text = fs::read_to_string(&log).unwrap();
        fs::write(&log, format!("garbage\n{text}")).unwrap();
        assert!(matches!(SessionStore::open(dir.path()), Err(StoreError::CorruptStore { .. })));
    }

    #[test]
    fn log_line_shape() {
        let line = serde_json::to_value(HistoryEvent { seq: 3, event: Event::Completion { report: "r".into() } }).unwrap();
        assert_eq!(line, json!({"seq": 3, "kind": "completion", "payload": {"report": "r"}}));
    }
}
