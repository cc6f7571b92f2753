//! Skill routing for delegated sub-tasks.
//!
//! `score = w_type * type_match + w_keyword * keyword_overlap`, zeroed when
//! the skill declares a route constraint the task violates. Scores are exact
//! rationals so ordering is stable under any common rescaling of weights.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::registry::{Registry, RouteConstraint, SkillManifest};

pub type Score = Ratio<i64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub threshold: f64,
    pub w_type: f64,
    pub w_keyword: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self { threshold: 0.5, w_type: 0.6, w_keyword: 0.4 }
    }
}

fn ratio(x: f64) -> Score {
    Ratio::approximate_float(x).unwrap_or_else(|| Ratio::from_integer(0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelegatedTask {
    pub task_text: String,
    pub task_type: String,
    pub workspace_root: PathBuf,
    pub done_when: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutedEntry {
    pub skill_id: String,
    pub score: Score,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutedSkillSet {
    pub entries: Vec<RoutedEntry>,
    pub threshold_used: Score,
}

impl RoutedSkillSet {
    pub fn skill_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.skill_id.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Lowercased word tokens of free text.
pub fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn workspace_writable(root: &Path) -> bool {
    std::fs::metadata(root).is_ok_and(|m| !m.permissions().readonly())
}

fn constraint_holds(constraint: RouteConstraint, task: &DelegatedTask) -> bool {
    match constraint {
        RouteConstraint::WritableWorkspace => workspace_writable(&task.workspace_root),
        RouteConstraint::DoneWhenPresent => !task.done_when.trim().is_empty(),
    }
}

pub fn keyword_overlap(manifest: &SkillManifest, task: &DelegatedTask) -> Score {
    if manifest.trigger_keywords.is_empty() {
        return Ratio::from_integer(0);
    }
    let words = tokens(&task.task_text);
    let hits = manifest.trigger_keywords.iter().filter(|k| words.contains(*k)).count();
    Ratio::new(hits as i64, manifest.trigger_keywords.len() as i64)
}

pub fn score_candidate(manifest: &SkillManifest, task: &DelegatedTask, config: &RouterConfig) -> Score {
    if manifest.policy.requires.iter().any(|c| !constraint_holds(*c, task)) {
        return Ratio::from_integer(0);
    }
    let type_match = if manifest.task_types.contains(&task.task_type) { 1 } else { 0 };
    ratio(config.w_type) * Ratio::from_integer(type_match) + ratio(config.w_keyword) * keyword_overlap(manifest, task)
}

/// Scores every registered skill, sorted by (score desc, skill_id asc).
pub fn rank(registry: &Registry, task: &DelegatedTask, config: &RouterConfig) -> Vec<RoutedEntry> {
    let mut entries: Vec<RoutedEntry> = registry
        .skills()
        .map(|s| RoutedEntry { skill_id: s.manifest.skill_id.clone(), score: score_candidate(&s.manifest, task, config) })
        .collect();
    entries.sort_by(|a, b| b.score.cmp(&a.score).then_with(|| a.skill_id.cmp(&b.skill_id)));
    entries
}

pub fn route(registry: &Registry, task: &DelegatedTask, config: &RouterConfig) -> RoutedSkillSet {
    let threshold = ratio(config.threshold);
    let entries = rank(registry, task, config).into_iter().filter(|e| e.score >= threshold).collect();
    RoutedSkillSet { entries, threshold_used: threshold }
}
