//! Test-driven, repository-level function generation.
//!
//! The pipeline: index a Python repository ([`index`]), pick a small and
//! diverse set of failing tests from a dynamic-analysis report ([`harness`]),
//! let a model explore the code base through search tools ([`retrieval`]),
//! and drive generate / validate / reflect / refine cycles ([`orchestrator`])
//! inside an isolated working copy ([`sandbox`]). [`eval`] runs experiment
//! grids and computes the metrics.

pub mod eval;
pub mod harness;
pub mod index;
pub mod llm;
pub mod orchestrator;
pub mod pysyntax;
pub mod retrieval;
pub mod sandbox;
