//! Python bindings: registry loading and routing, the repair skill's pure
//! helpers, and the `skillrun` command line as a function.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde_json::Value;
use skillrun::registry::{LookupKey, Registry as CoreRegistry};
use skillrun::repair::{self, patch, RepairState};
use skillrun::router::{self, DelegatedTask, RouterConfig};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_json(text: &str) -> PyResult<Value> {
    serde_json::from_str(text).map_err(value_error)
}

fn delegated(task_text: &str, task_type: &str, workspace: PathBuf, done_when: &str) -> DelegatedTask {
    DelegatedTask {
        task_text: task_text.to_string(),
        task_type: task_type.to_string(),
        workspace_root: workspace,
        done_when: done_when.to_string(),
    }
}

/// Skills loaded from a directory of packages, bound to the built-in
/// executors and hooks.
#[pyclass(unsendable)]
pub struct Registry {
    inner: CoreRegistry,
}

#[pymethods]
impl Registry {
    #[new]
    fn new(skills_dir: PathBuf) -> PyResult<Self> {
        let mut inner = CoreRegistry::with_builtin_bindings();
        inner.load_dir(&skills_dir).map_err(value_error)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn skill_ids(&self) -> Vec<String> {
        self.inner.skills().map(|s| s.manifest.skill_id.clone()).collect()
    }

    /// Manifest of one skill as a JSON string.
    fn manifest(&self, skill_id: &str) -> PyResult<String> {
        let m = self.inner.lookup(LookupKey::SkillId(skill_id)).map_err(value_error)?;
        serde_json::to_string(m).map_err(value_error)
    }

    fn tools(&self, skill_id: &str) -> PyResult<Vec<String>> {
        let m = self.inner.lookup(LookupKey::SkillId(skill_id)).map_err(value_error)?;
        Ok(m.tools.iter().map(|t| t.name.clone()).collect())
    }

    /// Validates JSON arguments for a tool; returns the list of errors.
    fn validate(&self, tool_name: &str, args_json: &str) -> PyResult<Vec<String>> {
        let args = parse_json(args_json)?;
        Ok(match self.inner.validate_action_args(tool_name, &args) {
            Ok(_) => Vec::new(),
            Err(errors) => errors.iter().map(ToString::to_string).collect(),
        })
    }

    /// `(skill_id, score)` for every skill, best first.
    #[pyo3(signature = (task_text, task_type, workspace, done_when = ""))]
    fn rank(&self, task_text: &str, task_type: &str, workspace: PathBuf, done_when: &str) -> Vec<(String, f64)> {
        let task = delegated(task_text, task_type, workspace, done_when);
        router::rank(&self.inner, &task, &RouterConfig::default())
            .into_iter()
            .map(|e| (e.skill_id, ratio_to_f64(e.score)))
            .collect()
    }

    /// Skill ids at or above the default threshold, best first.
    #[pyo3(signature = (task_text, task_type, workspace, done_when = ""))]
    fn route(&self, task_text: &str, task_type: &str, workspace: PathBuf, done_when: &str) -> Vec<String> {
        let task = delegated(task_text, task_type, workspace, done_when);
        router::route(&self.inner, &task, &RouterConfig::default()).skill_ids()
    }
}

fn ratio_to_f64(r: router::Score) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Writes the bundled repair package below `dir`; returns its path.
#[pyfunction]
fn write_repair_package(dir: PathBuf) -> PyResult<PathBuf> {
    repair::write_package(&dir).map_err(|e| PyOSError::new_err(e.to_string()))
}

#[pyfunction]
#[pyo3(signature = (done_when, extensions = None))]
fn infer_required_artifacts(done_when: &str, extensions: Option<Vec<String>>) -> Vec<String> {
    let extensions = extensions.unwrap_or_else(|| {
        let config: std::collections::BTreeMap<String, Value> =
            serde_json::from_str(repair::CONFIG_JSON).expect("bundled config parses");
        repair::hooks::artifact_extensions(&config)
    });
    repair::artifacts::infer_required_artifacts(done_when, &extensions)
}

/// Open completion reasons for a repair state document (JSON).
#[pyfunction]
fn completion_gate(state_json: &str, workspace: PathBuf) -> PyResult<Vec<String>> {
    let state = RepairState::from_value(&parse_json(state_json)?).map_err(value_error)?;
    Ok(repair::artifacts::completion_gate(&state, &workspace))
}

#[pyfunction]
fn apply_patch(original: &str, patch_text: &str) -> PyResult<String> {
    let parsed = patch::parse(patch_text).map_err(value_error)?;
    patch::apply(original, &parsed).map_err(value_error)
}

#[pyfunction]
#[pyo3(signature = (output, failed = true))]
fn failure_signature(output: &str, failed: bool) -> Option<String> {
    repair::tools::failure_signature(output, failed)
}

/// Runs the command line with `args` (without the program name); returns
/// `(exit_code, output)`.
#[pyfunction]
fn run_cli(args: Vec<String>) -> (i32, String) {
    let mut out = String::new();
    let argv = std::iter::once("skillrun".to_string()).chain(args);
    let code = skillrun::cli::run_cli(argv, &mut out);
    (code, out)
}

#[pymodule]
fn skillrun_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Registry>()?;
    m.add_function(wrap_pyfunction!(write_repair_package, m)?)?;
    m.add_function(wrap_pyfunction!(infer_required_artifacts, m)?)?;
    m.add_function(wrap_pyfunction!(completion_gate, m)?)?;
    m.add_function(wrap_pyfunction!(apply_patch, m)?)?;
    m.add_function(wrap_pyfunction!(failure_signature, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("EXIT_DONE", skillrun::cli::EXIT_DONE)?;
    m.add("EXIT_ERROR", skillrun::cli::EXIT_ERROR)?;
    m.add("EXIT_BUDGET", skillrun::cli::EXIT_BUDGET)?;
    Ok(())
}
