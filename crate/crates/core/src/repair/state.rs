//! Repair phase state and its transition rules.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{TOOL_ARTIFACT, TOOL_EVIDENCE, TOOL_PATCH, TOOL_VERIFY};
use crate::planner::orchestration::{TOOL_FINISH, TOOL_READ};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Reproduce,
    Diagnose,
    Patch,
    Verify,
    Report,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::Reproduce, Phase::Diagnose, Phase::Patch, Phase::Verify, Phase::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Reproduce => "reproduce",
            Phase::Diagnose => "diagnose",
            Phase::Patch => "patch",
            Phase::Verify => "verify",
            Phase::Report => "report",
        }
    }

    /// Repair tools visible in this phase.
    pub fn visible_repair_tools(self) -> &'static [&'static str] {
        match self {
            Phase::Reproduce => &[TOOL_EVIDENCE],
            Phase::Diagnose | Phase::Patch => &[TOOL_EVIDENCE, TOOL_PATCH],
            Phase::Verify => &[TOOL_VERIFY],
            Phase::Report => &[TOOL_ARTIFACT],
        }
    }

    /// Orchestration tools left visible alongside the repair tools.
    pub fn visible_orchestration_tools(self) -> &'static [&'static str] {
        match self {
            Phase::Report => &[TOOL_READ, TOOL_FINISH],
            _ => &[TOOL_READ],
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The allowed phase edges.
pub const PHASE_EDGES: [(Phase, Phase); 6] = [
    (Phase::Reproduce, Phase::Patch),
    (Phase::Reproduce, Phase::Diagnose),
    (Phase::Diagnose, Phase::Patch),
    (Phase::Patch, Phase::Verify),
    (Phase::Verify, Phase::Report),
    (Phase::Verify, Phase::Patch),
];

pub fn is_edge(from: Phase, to: Phase) -> bool {
    PHASE_EDGES.contains(&(from, to))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LastTool {
    pub name: String,
    pub ok: bool,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepairState {
    pub phase: Phase,
    pub verification_passed: bool,
    pub failure_signature: Option<String>,
    pub required_artifacts: Vec<String>,
    pub produced_artifacts: Vec<String>,
    pub gate_fail_reasons: Vec<String>,
    pub last_tool: Option<LastTool>,
    /// Every phase entered, in order, starting with the initial phase.
    pub phase_trail: Vec<Phase>,
}

impl Default for RepairState {
    fn default() -> Self {
        Self {
            phase: Phase::Reproduce,
            verification_passed: false,
            failure_signature: None,
            required_artifacts: Vec::new(),
            produced_artifacts: Vec::new(),
            gate_fail_reasons: Vec::new(),
            last_tool: None,
            phase_trail: vec![Phase::Reproduce],
        }
    }
}

impl RepairState {
    /// Reads a state document; the empty document is the initial state.
    pub fn from_value(value: &Value) -> Result<Self, String> {
        if value.as_object().is_some_and(|o| o.is_empty()) {
            return Ok(Self::default());
        }
        serde_json::from_value(value.clone()).map_err(|e| format!("invalid repair state: {e}"))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("repair state serializes")
    }

    /// Moves to `to`, panicking on an edge outside the phase graph.
    pub fn transition(&mut self, to: Phase) {
        assert!(is_edge(self.phase, to), "illegal phase transition {} -> {}", self.phase, to);
        self.phase = to;
        self.phase_trail.push(to);
    }

    pub fn add_produced(&mut self, path: String) {
        if !self.produced_artifacts.contains(&path) {
            self.produced_artifacts.push(path);
        }
    }

    /// Drops produced artifacts that no longer exist on disk.
    pub fn prune_produced(&mut self, root: &Path) {
        self.produced_artifacts.retain(|p| root.join(p).is_file());
    }
}
