//! The code-repair reference skill: four tools, four hooks, a five-phase
//! state machine, patch guards, structured verification and completion
//! gates.

pub mod artifacts;
pub mod hooks;
pub mod patch;
pub mod state;
pub mod tools;

use std::path::Path;
use std::sync::Arc;

use crate::registry::Bindings;

pub use artifacts::{completion_gate, infer_required_artifacts};
pub use state::{Phase, RepairState, PHASE_EDGES};

pub const SKILL_ID: &str = "code_repair_ops";
pub const TOOL_EVIDENCE: &str = "repair_collect_evidence";
pub const TOOL_PATCH: &str = "repair_apply_unified_patch";
pub const TOOL_VERIFY: &str = "repair_run_verification";
pub const TOOL_ARTIFACT: &str = "repair_write_artifact";

pub const REPAIR_TOOLS: [&str; 4] = [TOOL_EVIDENCE, TOOL_PATCH, TOOL_VERIFY, TOOL_ARTIFACT];

pub const MANIFEST_JSON: &str = include_str!("../../skills/code_repair_ops/manifest.json");
pub const CONFIG_JSON: &str = include_str!("../../skills/code_repair_ops/config.json");

/// Binds the skill's executor and hook ids.
pub fn register(bindings: &mut Bindings) {
    bindings.register_executor("code_repair_ops.collect_evidence", Arc::new(tools::CollectEvidence));
    bindings.register_executor("code_repair_ops.apply_unified_patch", Arc::new(tools::ApplyUnifiedPatch));
    bindings.register_executor("code_repair_ops.run_verification", Arc::new(tools::RunVerification));
    bindings.register_executor("code_repair_ops.write_artifact", Arc::new(tools::WriteArtifact));
    bindings.register_hook("code_repair_ops.before_llm", Arc::new(hooks::BeforeLlm));
    bindings.register_hook("code_repair_ops.after_llm", Arc::new(hooks::AfterLlm));
    bindings.register_hook("code_repair_ops.before_tool", Arc::new(hooks::BeforeTool));
    bindings.register_hook("code_repair_ops.after_tool", Arc::new(hooks::AfterTool));
}

/// Writes the bundled package to `dir/code_repair_ops` and returns that path.
pub fn write_package(dir: &Path) -> std::io::Result<std::path::PathBuf> {
    let pkg = dir.join(SKILL_ID);
    std::fs::create_dir_all(&pkg)?;
    std::fs::write(pkg.join("manifest.json"), MANIFEST_JSON)?;
    std::fs::write(pkg.join("config.json"), CONFIG_JSON)?;
    Ok(pkg)
}
