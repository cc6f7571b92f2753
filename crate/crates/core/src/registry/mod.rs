//! Capability registry: loads skill packages, validates their manifests and
//! resolves executor and hook bindings against an in-process table.
//!
//! A package is a directory holding `manifest.json` and `config.json`
//! (plus optional `assets/`). Unknown manifest keys are rejected.

mod glob;
mod schema;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use glob::Glob;
pub use schema::{validate, ParamSchema, ParamType, ValidatedArgs, ValidationError};

use crate::hooks::{HookProgram, HookStage};
use crate::workspace::ToolExecutor;

pub const MAX_DESCRIPTION_CHARS: usize = 200;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("malformed manifest in {path}{}: {reason}", position.map(|(l, c)| format!(" at {l}:{c}")).unwrap_or_default())]
    MalformedManifest {
        path: PathBuf,
        position: Option<(usize, usize)>,
        reason: String,
    },
    #[error("unresolved {kind} binding `{id}` in skill `{skill_id}`")]
    UnresolvedBinding { skill_id: String, kind: &'static str, id: String },
    #[error("skill `{skill_id}` version {version} is already loaded with different content")]
    DuplicateSkill { skill_id: String, version: String },
    #[error("tool `{tool}` is already provided by skill `{owner}`")]
    ToolCollision { tool: String, owner: String },
    #[error("not found: {0}")]
    NotFound(String),
}

/// Hard routing exclusions a skill can declare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteConstraint {
    /// The delegated workspace must be writable.
    WritableWorkspace,
    /// The delegated task must carry a non-empty `done_when`.
    DoneWhenPresent,
}

fn default_max_patch_lines() -> u32 {
    400
}

fn default_artifact_dir() -> String {
    "out".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default)]
    pub protected_path_globs: Vec<String>,
    #[serde(default)]
    pub command_allowlist: Vec<String>,
    #[serde(default = "default_max_patch_lines")]
    pub max_patch_lines: u32,
    #[serde(default = "default_artifact_dir")]
    pub artifact_dir: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requires: Vec<RouteConstraint>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            protected_path_globs: Vec::new(),
            command_allowlist: Vec::new(),
            max_patch_lines: default_max_patch_lines(),
            artifact_dir: default_artifact_dir(),
            requires: Vec::new(),
        }
    }
}

impl PolicyConfig {
    pub fn globs(&self) -> Vec<Glob> {
        self.protected_path_globs.iter().filter_map(|g| Glob::new(g).ok()).collect()
    }

    /// Returns the first protected glob matching a workspace-relative path.
    pub fn protected_by(&self, relative: &str) -> Option<String> {
        self.globs().into_iter().find(|g| g.is_match(relative)).map(|g| g.as_str().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSchema {
    pub name: String,
    pub description: String,
    pub params: ParamSchema,
    pub executor_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HookDeclaration {
    pub stage: HookStage,
    pub program_id: String,
    pub order: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillManifest {
    pub skill_id: String,
    pub version: String,
    pub description: String,
    /// Tool-name prefix; defaults to `skill_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub namespace: Option<String>,
    #[serde(default)]
    pub task_types: BTreeSet<String>,
    #[serde(default)]
    pub trigger_keywords: BTreeSet<String>,
    #[serde(default)]
    pub tools: Vec<ActionSchema>,
    #[serde(default)]
    pub hooks: Vec<HookDeclaration>,
    #[serde(default)]
    pub policy: PolicyConfig,
    /// Filled from `config.json`; not accepted in `manifest.json`.
    #[serde(default, skip_deserializing)]
    pub config: BTreeMap<String, Value>,
}

impl SkillManifest {
    pub fn tool_prefix(&self) -> String {
        format!("{}_", self.namespace.as_deref().unwrap_or(&self.skill_id))
    }

    pub fn tool(&self, name: &str) -> Option<&ActionSchema> {
        self.tools.iter().find(|t| t.name == name)
    }
}

/// In-process table that manifest `executor_id`s and `program_id`s resolve
/// against.
#[derive(Clone, Default)]
pub struct Bindings {
    executors: HashMap<String, Arc<dyn ToolExecutor>>,
    hooks: HashMap<String, Arc<dyn HookProgram>>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bindings for every skill shipped with this crate.
    pub fn builtin() -> Self {
        let mut b = Self::new();
        crate::repair::register(&mut b);
        b
    }

    pub fn register_executor(&mut self, id: &str, executor: Arc<dyn ToolExecutor>) {
        self.executors.insert(id.to_string(), executor);
    }

    pub fn register_hook(&mut self, id: &str, program: Arc<dyn HookProgram>) {
        self.hooks.insert(id.to_string(), program);
    }

    pub fn executor(&self, id: &str) -> Option<Arc<dyn ToolExecutor>> {
        self.executors.get(id).cloned()
    }

    pub fn hook(&self, id: &str) -> Option<Arc<dyn HookProgram>> {
        self.hooks.get(id).cloned()
    }
}

/// A registered skill with its bindings resolved.
#[derive(Clone)]
pub struct LoadedSkill {
    pub manifest: SkillManifest,
    pub executors: BTreeMap<String, Arc<dyn ToolExecutor>>,
    pub hook_programs: Vec<(HookDeclaration, Arc<dyn HookProgram>)>,
    pub diagnostics: Vec<String>,
    pub source: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupKey<'a> {
    SkillId(&'a str),
    ToolName(&'a str),
}

/// Built at startup, read-only afterwards; reloading needs `&mut`.
#[derive(Default)]
pub struct Registry {
    bindings: Bindings,
    skills: Vec<LoadedSkill>,
}

impl Registry {
    pub fn new(bindings: Bindings) -> Self {
        Self { bindings, skills: Vec::new() }
    }

    pub fn with_builtin_bindings() -> Self {
        Self::new(Bindings::builtin())
    }

    /// Loads every package directory directly below `dir`, in name order.
    pub fn load_dir(&mut self, dir: &Path) -> Result<Vec<String>, RegistryError> {
        let malformed = |reason: String| RegistryError::MalformedManifest {
            path: dir.to_path_buf(),
            position: None,
            reason,
        };
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| malformed(format!("cannot read skills directory: {e}")))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").is_file())
            .collect();
        entries.sort();
        entries.iter().map(|p| self.load_skill_package(p).map(|m| m.skill_id.clone())).collect()
    }

    pub fn load_skill_package(&mut self, package_dir: &Path) -> Result<&SkillManifest, RegistryError> {
        let manifest_path = package_dir.join("manifest.json");
        let config_path = package_dir.join("config.json");
        let malformed = |path: &Path, position, reason: String| RegistryError::MalformedManifest {
            path: path.to_path_buf(),
            position,
            reason,
        };
        let manifest_text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| malformed(&manifest_path, None, format!("cannot read manifest: {e}")))?;
        let config_text = std::fs::read_to_string(&config_path)
            .map_err(|e| malformed(&config_path, None, format!("cannot read config: {e}")))?;
        let manifest: SkillManifest = serde_json::from_str(&manifest_text)
            .map_err(|e| malformed(&manifest_path, Some((e.line(), e.column())), e.to_string()))?;
        let config: BTreeMap<String, Value> = serde_json::from_str(&config_text)
            .map_err(|e| malformed(&config_path, Some((e.line(), e.column())), e.to_string()))?;
        let manifest = apply_config(manifest, config).map_err(|r| malformed(&config_path, None, r))?;
        self.register(manifest, Some(package_dir.to_path_buf()))
    }

    /// Validates and registers a manifest. Re-registering the same
    /// `skill_id` replaces the old entry in place; the same version with
    /// different content is refused.
    pub fn register(&mut self, manifest: SkillManifest, source: Option<PathBuf>) -> Result<&SkillManifest, RegistryError> {
        let path = source.clone().unwrap_or_default().join("manifest.json");
        let diagnostics =
            check_manifest(&manifest).map_err(|reason| RegistryError::MalformedManifest { path, position: None, reason })?;

        let existing = self.skills.iter().position(|s| s.manifest.skill_id == manifest.skill_id);
        if let Some(i) = existing {
            let old = &self.skills[i].manifest;
            if old.version == manifest.version && *old != manifest {
                return Err(RegistryError::DuplicateSkill {
                    skill_id: manifest.skill_id.clone(),
                    version: manifest.version.clone(),
                });
            }
        }
        for tool in &manifest.tools {
            if let Some(owner) = self
                .skills
                .iter()
                .find(|s| s.manifest.skill_id != manifest.skill_id && s.manifest.tool(&tool.name).is_some())
            {
                return Err(RegistryError::ToolCollision { tool: tool.name.clone(), owner: owner.manifest.skill_id.clone() });
            }
        }

        let unresolved = |kind, id: &str| RegistryError::UnresolvedBinding {
            skill_id: manifest.skill_id.clone(),
            kind,
            id: id.to_string(),
        };
        let mut executors = BTreeMap::new();
        for tool in &manifest.tools {
            let exec = self.bindings.executor(&tool.executor_id).ok_or_else(|| unresolved("executor", &tool.executor_id))?;
            executors.insert(tool.name.clone(), exec);
        }
        let mut hook_programs = Vec::new();
        for decl in &manifest.hooks {
            let program = self.bindings.hook(&decl.program_id).ok_or_else(|| unresolved("hook", &decl.program_id))?;
            hook_programs.push((decl.clone(), program));
        }
        for d in &diagnostics {
            tracing::warn!(skill = %manifest.skill_id, "{d}");
        }
        let loaded = LoadedSkill { manifest, executors, hook_programs, diagnostics, source };
        let index = match existing {
            Some(i) => {
                self.skills[i] = loaded;
                i
            }
            None => {
                self.skills.push(loaded);
                self.skills.len() - 1
            }
        };
        Ok(&self.skills[index].manifest)
    }

    pub fn lookup(&self, key: LookupKey<'_>) -> Result<&SkillManifest, RegistryError> {
        self.loaded(key).map(|s| &s.manifest)
    }

    pub fn loaded(&self, key: LookupKey<'_>) -> Result<&LoadedSkill, RegistryError> {
        let found = match key {
            LookupKey::SkillId(id) => self.skills.iter().find(|s| s.manifest.skill_id == id),
            LookupKey::ToolName(name) => self
                .skills
                .iter()
                .find(|s| name.starts_with(&s.manifest.tool_prefix()) && s.manifest.tool(name).is_some()),
        };
        found.ok_or_else(|| {
            RegistryError::NotFound(match key {
                LookupKey::SkillId(id) => format!("skill `{id}`"),
                LookupKey::ToolName(name) => format!("tool `{name}`"),
            })
        })
    }

    /// Skills in registration order.
    pub fn skills(&self) -> impl Iterator<Item = &LoadedSkill> {
        self.skills.iter()
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    /// Validates `args` against the schema of tool `tool_name`.
    pub fn validate_action_args(&self, tool_name: &str, args: &Value) -> Result<ValidatedArgs, Vec<ValidationError>> {
        match self.lookup(LookupKey::ToolName(tool_name)).ok().and_then(|m| m.tool(tool_name)) {
            Some(schema) => validate_action_args(schema, args),
            None => Err(vec![ValidationError { path: "$".into(), reason: format!("unknown tool `{tool_name}`") }]),
        }
    }
}

pub fn validate_action_args(schema: &ActionSchema, args: &Value) -> Result<ValidatedArgs, Vec<ValidationError>> {
    validate(&schema.params, args)
}

/// The manifest with `overrides` layered over its `config.json` values;
/// policy keys are re-applied.
pub fn with_config_overrides(manifest: &SkillManifest, overrides: &BTreeMap<String, Value>) -> Result<SkillManifest, String> {
    let mut config = manifest.config.clone();
    config.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
    let merged = apply_config(manifest.clone(), config)?;
    check_manifest(&merged)?;
    Ok(merged)
}

/// Config keys that override policy fields.
fn apply_config(mut manifest: SkillManifest, config: BTreeMap<String, Value>) -> Result<SkillManifest, String> {
    let bad = |key: &str, want: &str| format!("config key `{key}` must be {want}");
    for (key, value) in &config {
        match key.as_str() {
            "protected_path_globs" | "command_allowlist" => {
                let list: Vec<String> = serde_json::from_value(value.clone()).map_err(|_| bad(key, "a list of strings"))?;
                if key == "protected_path_globs" {
                    manifest.policy.protected_path_globs = list;
                } else {
                    manifest.policy.command_allowlist = list;
                }
            }
            "max_patch_lines" => {
                manifest.policy.max_patch_lines = value
                    .as_u64()
                    .and_then(|v| u32::try_from(v).ok())
                    .ok_or_else(|| bad(key, "a positive integer"))?;
            }
            "artifact_dir" => {
                manifest.policy.artifact_dir = value.as_str().ok_or_else(|| bad(key, "a string"))?.to_string();
            }
            _ => {}
        }
    }
    manifest.config = config;
    Ok(manifest)
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        && !s.starts_with(|c: char| c.is_ascii_digit())
}

fn is_semver(s: &str) -> bool {
    let core = s.split(['-', '+']).next().unwrap_or("");
    let parts: Vec<&str> = core.split('.').collect();
    parts.len() == 3 && parts.iter().all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_digit()))
}

/// Structural checks; returns non-fatal diagnostics on success.
fn check_manifest(m: &SkillManifest) -> Result<Vec<String>, String> {
    let mut diagnostics = Vec::new();
    if !is_identifier(&m.skill_id) {
        return Err(format!("skill_id `{}` must be a lowercase identifier", m.skill_id));
    }
    if let Some(ns) = &m.namespace {
        if !is_identifier(ns) {
            return Err(format!("namespace `{ns}` must be a lowercase identifier"));
        }
    }
    if !is_semver(&m.version) {
        return Err(format!("version `{}` is not semver", m.version));
    }
    if m.description.chars().count() > MAX_DESCRIPTION_CHARS {
        return Err(format!("description longer than {MAX_DESCRIPTION_CHARS} characters"));
    }
    if let Some(k) = m.trigger_keywords.iter().find(|k| k.is_empty() || k.chars().any(|c| c.is_uppercase() || c.is_whitespace())) {
        return Err(format!("trigger keyword `{k}` must be a single lowercase word"));
    }
    let prefix = m.tool_prefix();
    let mut names = BTreeSet::new();
    for tool in &m.tools {
        if !names.insert(tool.name.as_str()) {
            return Err(format!("duplicate tool name `{}`", tool.name));
        }
        if !tool.name.starts_with(&prefix) || tool.name.len() == prefix.len() {
            return Err(format!("tool `{}` must be prefixed with `{prefix}`", tool.name));
        }
        if tool.description.chars().count() > MAX_DESCRIPTION_CHARS {
            return Err(format!("tool `{}` description longer than {MAX_DESCRIPTION_CHARS} characters", tool.name));
        }
        if tool.params.kind != ParamType::Object {
            return Err(format!("tool `{}` params must be an object schema", tool.name));
        }
        tool.params.check(&format!("{}.params", tool.name))?;
    }
    if m.tools.is_empty() {
        diagnostics.push(format!("skill `{}` declares no tools (hooks only)", m.skill_id));
    }
    let mut slots = BTreeSet::new();
    for hook in &m.hooks {
        if !slots.insert((hook.stage, hook.order)) {
            return Err(format!("duplicate hook order {} at stage {}", hook.order, hook.stage));
        }
    }
    for g in &m.policy.protected_path_globs {
        Glob::new(g)?;
    }
    if m.policy.max_patch_lines < 1 {
        return Err("policy.max_patch_lines must be at least 1".into());
    }
    if !crate::workspace::is_lexically_inside(&m.policy.artifact_dir) {
        return Err(format!("policy.artifact_dir `{}` must be workspace-relative", m.policy.artifact_dir));
    }
    Ok(diagnostics)
}
