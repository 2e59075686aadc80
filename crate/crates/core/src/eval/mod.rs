//! Benchmark manifests, final verdicts, metrics and experiment grids.

pub mod grid;
pub mod metrics;
pub mod report;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{ProbeMode, ProbeReport};
use crate::index::{find_definition, index_file, CodeEntity};
use crate::pysyntax;
use crate::sandbox::{SandboxError, TestEnv, TestRunResult, Workspace};

pub use grid::{config_digest, load_configs, run_config, run_grid, ExperimentConfig, GridSpec, TaskArtifacts};
pub use metrics::{compute_metrics, solved_overlap, Aggregates, MetricsReport, OverlapRegion, TaskRow};
pub use report::{render_csv, render_grid_table, render_table};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("report: {0}")]
    Report(String),
}

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTarget {
    pub file_path: String,
    pub qualified_name: String,
    pub start_line: u32,
    pub end_line: u32,
}

/// One benchmark task. Relative paths are resolved against the manifest
/// file's directory when loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub task_id: String,
    pub repo_root: PathBuf,
    #[serde(default)]
    pub env: TestEnv,
    pub target: ManifestTarget,
    pub evaluation_test_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_report_path: Option<PathBuf>,
    /// Coverage-mode report over the ground-truth body.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_report_path: Option<PathBuf>,
}

impl TaskManifest {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Manifest(format!("task {}: {m}", self.task_id)));
        if self.task_id.trim().is_empty() {
            return Err(EvalError::Manifest("empty task_id".into()));
        }
        if self.evaluation_test_ids.is_empty() {
            return bad("evaluation_test_ids is empty".into());
        }
        let t = &self.target;
        if t.start_line == 0 || t.end_line < t.start_line {
            return bad(format!("bad target lines {}-{}", t.start_line, t.end_line));
        }
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut self.repo_root);
        if let Some(p) = self.probe_report_path.as_mut() {
            abs(p);
        }
        if let Some(p) = self.coverage_report_path.as_mut() {
            abs(p);
        }
    }
}

/// Read a manifest file (a JSON array of tasks).
pub fn load_manifests(path: &Path) -> Result<Vec<TaskManifest>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut tasks: Vec<TaskManifest> =
        serde_json::from_str(&text).map_err(|e| EvalError::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    for t in &mut tasks {
        t.validate()?;
        if !seen.insert(t.task_id.clone()) {
            return Err(EvalError::Manifest(format!("duplicate task_id {}", t.task_id)));
        }
        t.resolve(base);
    }
    Ok(tasks)
}

/// Run the full evaluation suite of a task in its workspace. The task
/// passes iff every evaluation test passes.
pub fn final_verdict(ws: &Workspace, task: &TaskManifest, timeout: Duration) -> Result<TestRunResult, SandboxError> {
    ws.run_tests(&task.evaluation_test_ids, timeout)
}

/// Lines of the body that can execute: after the docstring, excluding blank
/// and comment-only lines, lines inside multi-line strings, bare `else:` /
/// `finally:` clause lines and lines holding only closing brackets.
pub fn executable_lines(source: &str, entity: &CodeEntity) -> BTreeSet<u32> {
    let tree = pysyntax::parse(source);
    let Some(def) = find_definition(tree.root_node(), source, entity) else {
        return BTreeSet::new();
    };
    let Some(body) = def.child_by_field_name("body") else {
        return BTreeSet::new();
    };
    let first = match pysyntax::docstring_node(body) {
        Some(doc) => pysyntax::end_line(doc) + 1,
        None => pysyntax::start_line(body),
    };
    let last = pysyntax::end_line(body);
    let interior = pysyntax::string_interior_lines(source);
    let lines = pysyntax::lines(source);
    (first..=last)
        .filter(|&n| {
            let text = lines.get(n as usize - 1).map(|l| l.trim()).unwrap_or("");
            !(text.is_empty()
                || text.starts_with('#')
                || interior.contains(&(n as usize - 1))
                || matches!(text, "else:" | "finally:")
                || text.chars().all(|c| matches!(c, ')' | ']' | '}' | ',' | ' ')))
        })
        .collect()
}

/// Percentage of executable ground-truth lines run by `tests`, from a
/// coverage-mode report. `None` when the report or target is unusable.
pub fn coverage_pct(task: &TaskManifest, tests: &[String]) -> Option<f64> {
    let report = ProbeReport::load(task.coverage_report_path.as_ref()?).ok()?;
    if report.mode != ProbeMode::Coverage {
        return None;
    }
    let source = std::fs::read_to_string(task.repo_root.join(&task.target.file_path)).ok()?;
    let fi = index_file(&task.target.file_path, &source).ok()?;
    let entity = fi
        .entities
        .iter()
        .find(|e| e.qualified_name == task.target.qualified_name)?;
    let exec = executable_lines(&source, entity);
    if exec.is_empty() {
        return None;
    }
    let wanted: BTreeSet<&str> = tests.iter().map(String::as_str).collect();
    let covered: BTreeSet<u32> = report
        .records
        .iter()
        .filter(|r| wanted.contains(r.node_id.as_str()))
        .flat_map(|r| r.covered_lines.iter().copied())
        .filter(|l| exec.contains(l))
        .collect();
    Some(100.0 * covered.len() as f64 / exec.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn executable_lines_skip_docstring_and_clauses() {
        let src = "def f(x):\n    \"\"\"Doc\n    more.\"\"\"\n    # c\n\n    if x:\n        y = [\n            1,\n        ]\n    else:\n        y = '''a\nb'''\n    return y\n";
        let fi = index_file("m.py", src).unwrap();
        let e = &fi.entities[0];
        let got: Vec<u32> = executable_lines(src, e).into_iter().collect();
        assert_eq!(got, vec![6, 7, 8, 11, 13]);
    }
}
