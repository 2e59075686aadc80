//! Per-task rows and aggregate metrics over a set of trajectories.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{coverage_pct, EvalError, TaskManifest};
use crate::orchestrator::{AgentTrajectory, Event, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub verdict: Verdict,
    pub rounds_to_pass: Option<u32>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub api_calls: u32,
    /// Percentage of executable ground-truth lines covered by the tests
    /// shown to the model.
    pub coverage_pct: Option<f64>,
    pub usage_estimated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub tasks: usize,
    pub passed: usize,
    pub infrastructure_errors: usize,
    pub pass_at_1: f64,
    /// Pass rate over tasks that did not end in an infrastructure error.
    pub pass_at_1_valid_only: f64,
    pub avg_input_tokens: f64,
    pub avg_output_tokens: f64,
    pub avg_api_calls: f64,
    pub avg_coverage_pct: Option<f64>,
    pub solved_avg_input_tokens: Option<f64>,
    pub solved_avg_output_tokens: Option<f64>,
    pub solved_avg_api_calls: Option<f64>,
    pub avg_rounds_to_pass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_id: String,
    pub per_task: Vec<TaskRow>,
    pub aggregates: Aggregates,
    pub solved: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn aggregate(rows: &[TaskRow]) -> Aggregates {
    let passed: Vec<&TaskRow> = rows.iter().filter(|r| r.verdict == Verdict::Pass).collect();
    let infra = rows
        .iter()
        .filter(|r| r.verdict == Verdict::InfrastructureError)
        .count();
    Aggregates {
        tasks: rows.len(),
        passed: passed.len(),
        infrastructure_errors: infra,
        pass_at_1: ratio(passed.len(), rows.len()),
        pass_at_1_valid_only: ratio(passed.len(), rows.len() - infra),
        avg_input_tokens: mean(rows.iter().map(|r| r.input_tokens as f64)).unwrap_or(0.0),
        avg_output_tokens: mean(rows.iter().map(|r| r.output_tokens as f64)).unwrap_or(0.0),
        avg_api_calls: mean(rows.iter().map(|r| r.api_calls as f64)).unwrap_or(0.0),
        avg_coverage_pct: mean(rows.iter().filter_map(|r| r.coverage_pct)),
        solved_avg_input_tokens: mean(passed.iter().map(|r| r.input_tokens as f64)),
        solved_avg_output_tokens: mean(passed.iter().map(|r| r.output_tokens as f64)),
        solved_avg_api_calls: mean(passed.iter().map(|r| r.api_calls as f64)),
        avg_rounds_to_pass: mean(passed.iter().filter_map(|r| r.rounds_to_pass.map(f64::from))),
    }
}

impl MetricsReport {
    pub fn from_rows(config_id: &str, per_task: Vec<TaskRow>) -> Self {
        let aggregates = aggregate(&per_task);
        let solved = per_task
            .iter()
            .filter(|r| r.verdict == Verdict::Pass)
            .map(|r| r.task_id.clone())
            .collect();
        MetricsReport {
            config_id: config_id.to_string(),
            per_task,
            aggregates,
            solved,
        }
    }

    /// Aggregates must be reproducible from the rows alone.
    pub fn check(&self) -> Result<(), EvalError> {
        let again = MetricsReport::from_rows(&self.config_id, self.per_task.clone());
        if again != *self {
            return Err(EvalError::Report(format!(
                "aggregates of {} do not match its rows",
                self.config_id
            )));
        }
        Ok(())
    }
}

/// Tests listed in the trajectory's start event.
pub fn selected_tests(traj: &AgentTrajectory) -> Vec<String> {
    traj.iter_events()
        .find_map(|e| match e {
            Event::Start { selected_tests, .. } => Some(selected_tests.clone()),
            _ => None,
        })
        .unwrap_or_default()
}

pub fn task_row(traj: &AgentTrajectory, manifest: Option<&TaskManifest>) -> TaskRow {
    let coverage = manifest.and_then(|m| coverage_pct(m, &selected_tests(traj)));
    TaskRow {
        task_id: traj.task_id.clone(),
        verdict: traj.verdict,
        rounds_to_pass: traj.rounds_to_pass,
        input_tokens: traj.usage.input_tokens,
        output_tokens: traj.usage.output_tokens,
        api_calls: traj.api_call_count,
        coverage_pct: coverage,
        usage_estimated: traj.usage.estimated,
    }
}

/// Rows in manifest order, one per trajectory.
pub fn compute_metrics(config_id: &str, trajectories: &[AgentTrajectory], manifests: &[TaskManifest]) -> MetricsReport {
    let by_id: BTreeMap<&str, &TaskManifest> = manifests.iter().map(|m| (m.task_id.as_str(), m)).collect();
    let rows = trajectories
        .iter()
        .map(|t| task_row(t, by_id.get(t.task_id.as_str()).copied()))
        .collect();
    MetricsReport::from_rows(config_id, rows)
}

/// Tasks solved by exactly the configurations in `members`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapRegion {
    pub members: Vec<String>,
    pub tasks: Vec<String>,
}

/// Partition the solved tasks of several reports by which configurations
/// solved them. Tasks no configuration solved are left out.
pub fn solved_overlap(reports: &[MetricsReport]) -> Vec<OverlapRegion> {
    let mut by_task: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in reports {
        for t in &r.solved {
            by_task.entry(t.as_str()).or_default().insert(r.config_id.as_str());
        }
    }
    let mut regions: BTreeMap<Vec<String>, Vec<String>> = BTreeMap::new();
    for (task, members) in by_task {
        let key = members.into_iter().map(String::from).collect();
        regions.entry(key).or_default().push(task.to_string());
    }
    regions
        .into_iter()
        .map(|(members, tasks)| OverlapRegion { members, tasks })
        .collect()
}
