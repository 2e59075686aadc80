//! The report produced by running a test suite against the stubbed target.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::index::CodeSpan;

pub const PROBE_SCHEMA_VERSION: u32 = 1;

/// JSON Schema for [`ProbeReport`] documents.
pub const PROBE_REPORT_SCHEMA: &str = include_str!("../../schemas/probe_report.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    StubFailure,
    OtherFailure,
    Passed,
    Error,
    Skipped,
}

/// `stub` runs against the sentinel stub; `coverage` runs the real body with
/// a line tracer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    #[default]
    Stub,
    Coverage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub file_path: String,
    pub function_name: String,
    pub line: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTarget {
    pub file_path: String,
    pub qualified_name: String,
    pub start_line: u32,
    pub end_line: u32,
}

impl ProbeTarget {
    pub fn contains(&self, file_path: &str, line: u32) -> bool {
        file_path == self.file_path && self.start_line <= line && line <= self.end_line
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCaseRecord {
    pub node_id: String,
    pub outcome: Outcome,
    #[serde(default)]
    pub call_chain: Vec<FrameRef>,
    #[serde(default)]
    pub direct_caller: Option<String>,
    #[serde(default)]
    pub chain_depth: u32,
    #[serde(default)]
    pub covered_lines: Vec<u32>,
    #[serde(default)]
    pub assertion_bearing: bool,
    #[serde(default = "one")]
    pub cyclomatic_complexity: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<String>,
}

fn one() -> u32 {
    1
}

impl TestCaseRecord {
    /// Test file part of the node id.
    pub fn test_file(&self) -> &str {
        self.node_id.split("::").next().unwrap_or(&self.node_id)
    }

    /// Bare test function name, without class or parametrization.
    pub fn test_function(&self) -> &str {
        let last = self.node_id.rsplit("::").next().unwrap_or(&self.node_id);
        last.split('[').next().unwrap_or(last)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub schema_version: u32,
    #[serde(default)]
    pub mode: ProbeMode,
    pub target: ProbeTarget,
    pub records: Vec<TestCaseRecord>,
    pub suite_runtime_s: f64,
    pub runner_version: String,
}

impl ProbeReport {
    pub fn from_json(text: &str) -> Result<ProbeReport, HarnessError> {
        let report: ProbeReport = serde_json::from_str(text).map_err(|e| HarnessError::InvalidReport(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<ProbeReport, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::InvalidReport(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn stub_failures(&self) -> impl Iterator<Item = &TestCaseRecord> {
        self.records.iter().filter(|r| r.outcome == Outcome::StubFailure)
    }

    pub fn record(&self, node_id: &str) -> Option<&TestCaseRecord> {
        self.records.iter().find(|r| r.node_id == node_id)
    }

    /// Check the structural invariants every consumer relies on.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::InvalidReport(msg));
        if self.schema_version != PROBE_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.node_id.as_str()) {
                return bad(format!("duplicate node_id {}", r.node_id));
            }
            if let Some(f) = r.call_chain.iter().find(|f| f.line == 0) {
                return bad(format!("{}: frame {} has line 0", r.node_id, f.function_name));
            }
            let expected = r.call_chain.len().saturating_sub(1) as u32;
            if r.chain_depth != expected {
                return bad(format!(
                    "{}: chain_depth {} but call_chain has {} frames",
                    r.node_id,
                    r.chain_depth,
                    r.call_chain.len()
                ));
            }
            if self.mode == ProbeMode::Stub {
                if r.outcome == Outcome::StubFailure {
                    if r.chain_depth < 1 || r.direct_caller.is_none() {
                        return bad(format!("{}: stub_failure without a call chain", r.node_id));
                    }
                    let last = r.call_chain.last().expect("depth >= 1");
                    if !self.target.contains(&last.file_path, last.line) {
                        return bad(format!(
                            "{}: last frame {}:{} is outside the target",
                            r.node_id, last.file_path, last.line
                        ));
                    }
                } else if !r.call_chain.is_empty() {
                    return bad(format!("{}: {:?} record with a call chain", r.node_id, r.outcome));
                }
            }
        }
        Ok(())
    }

    /// Whether the target recorded in the report is the one at `span`.
    pub fn targets(&self, span: &CodeSpan) -> bool {
        self.target.file_path == span.file_path && self.target.start_line == span.start_line
    }
}
