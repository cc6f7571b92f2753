//! Runtime configuration file (`--config FILE`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::router::RouterConfig;
use crate::workspace::WorkspaceConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub max_steps: usize,
    /// Attempts per wakeup for retryable backend errors.
    pub backend_retries: u32,
    pub single_worker: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { max_steps: 200, backend_retries: 3, single_worker: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub router: RouterConfig,
    pub planner: PlannerConfig,
    pub workspace: WorkspaceConfig,
    /// Per-skill overrides layered over each package's `config.json`.
    pub skills: BTreeMap<String, BTreeMap<String, Value>>,
}

impl RuntimeConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
