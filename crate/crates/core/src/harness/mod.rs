//! Dynamic-analysis results and the strategies that pick tests from them.

pub mod complexity;
pub mod probe;
pub mod select;

use thiserror::Error;

pub use complexity::{cyclomatic_complexity, detect_failure_revealing};
pub use probe::{FrameRef, Outcome, ProbeMode, ProbeReport, ProbeTarget, TestCaseRecord};
pub use select::{
    cluster_by_caller, is_failure_revealing, select, select_frs, select_ips, select_rs, select_ss, select_thm, Budget,
    CallerCluster, Rationale, SelectionPlan, SelectionStrategy, StrategyKind,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("invalid probe report: {0}")]
    InvalidReport(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("cannot analyze test source: {0}")]
    Analysis(String),
}
