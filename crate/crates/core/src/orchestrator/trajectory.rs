//! The replayable event log of one task run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Phase, StagePolicy};
use crate::llm::{Role, TokenUsage};
use crate::sandbox::TestStatus;

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    BudgetExhausted,
    InfrastructureError,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::BudgetExhausted => "budget_exhausted",
            Verdict::InfrastructureError => "infrastructure_error",
        }
    }
}

/// Which tests a validation ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationScope {
    /// The selected tests, inside the loop.
    Selected,
    /// The candidate did not parse; no tests ran.
    Syntax,
    /// The full evaluation suite, after the loop.
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Start {
        task_id: String,
        policy: StagePolicy,
        effective_policy: StagePolicy,
        selected_tests: Vec<String>,
    },
    Warning {
        message: String,
    },
    Prompt {
        role: Role,
        phase: Phase,
        content: String,
    },
    Assistant {
        phase: Phase,
        content: String,
        usage: TokenUsage,
        totals: TokenUsage,
    },
    ToolCall {
        phase: Phase,
        api_name: Option<String>,
        raw: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        rejected: Option<String>,
        cached: bool,
        api_calls: u32,
    },
    ToolResult {
        api_name: Option<String>,
        payload: String,
    },
    RrwPhase {
        attempt_index: u32,
        phase: Phase,
    },
    Candidate {
        attempt_index: u32,
        body: String,
    },
    Validation {
        scope: ValidationScope,
        attempt_index: u32,
        passed: bool,
        per_test: BTreeMap<String, TestStatus>,
        #[serde(default)]
        timed_out: bool,
        output: String,
    },
    Verdict {
        verdict: Verdict,
        rounds_to_pass: Option<u32>,
        #[serde(skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub seq: u32,
    #[serde(flatten)]
    pub event: Event,
}

/// Final record of a trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub kind: String,
    pub schema_version: u32,
    pub task_id: String,
    pub verdict: Verdict,
    pub rounds_to_pass: Option<u32>,
    pub usage: TokenUsage,
    pub api_call_count: u32,
    pub llm_calls: u32,
    pub retrieval_rounds: u32,
    pub forced_generations: u32,
    pub refinement_attempts: u32,
    pub rrw_exchanges: Vec<u32>,
    pub selected_passed: Option<bool>,
    pub evaluation_passed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrajectory {
    pub task_id: String,
    pub events: Vec<LoggedEvent>,
    pub usage: TokenUsage,
    pub api_call_count: u32,
    pub llm_calls: u32,
    pub retrieval_rounds: u32,
    pub forced_generations: u32,
    pub refinement_attempts: u32,
    /// Tool exchanges per refinement attempt, in attempt order.
    pub rrw_exchanges: Vec<u32>,
    pub rounds_to_pass: Option<u32>,
    pub verdict: Verdict,
    pub selected_passed: Option<bool>,
    pub evaluation_passed: Option<bool>,
}

impl AgentTrajectory {
    pub fn new(task_id: &str) -> Self {
        AgentTrajectory {
            task_id: task_id.to_string(),
            events: Vec::new(),
            usage: TokenUsage::default(),
            api_call_count: 0,
            llm_calls: 0,
            retrieval_rounds: 0,
            forced_generations: 0,
            refinement_attempts: 0,
            rrw_exchanges: Vec::new(),
            rounds_to_pass: None,
            verdict: Verdict::Fail,
            selected_passed: None,
            evaluation_passed: None,
        }
    }

    pub fn push(&mut self, event: Event) {
        let seq = self.events.len() as u32;
        self.events.push(LoggedEvent { seq, event });
    }

    pub fn summary(&self) -> TrajectorySummary {
        TrajectorySummary {
            kind: "summary".into(),
            schema_version: TRAJECTORY_SCHEMA_VERSION,
            task_id: self.task_id.clone(),
            verdict: self.verdict,
            rounds_to_pass: self.rounds_to_pass,
            usage: self.usage,
            api_call_count: self.api_call_count,
            llm_calls: self.llm_calls,
            retrieval_rounds: self.retrieval_rounds,
            forced_generations: self.forced_generations,
            refinement_attempts: self.refinement_attempts,
            rrw_exchanges: self.rrw_exchanges.clone(),
            selected_passed: self.selected_passed,
            evaluation_passed: self.evaluation_passed,
        }
    }

    /// One event per line followed by the summary record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.summary()).expect("summary serializes"));
        out.push('\n');
        out
    }

    /// Parse a log written by [`to_jsonl`](Self::to_jsonl).
    pub fn from_jsonl(text: &str) -> Result<AgentTrajectory, String> {
        let mut lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let last = lines.pop().ok_or("empty trajectory log")?;
        let summary: TrajectorySummary = serde_json::from_str(last).map_err(|e| format!("summary: {e}"))?;
        if summary.schema_version != TRAJECTORY_SCHEMA_VERSION {
            return Err(format!("unsupported trajectory schema {}", summary.schema_version));
        }
        let events = lines
            .iter()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
            .collect::<Result<Vec<LoggedEvent>, String>>()?;
        Ok(AgentTrajectory {
            task_id: summary.task_id,
            events,
            usage: summary.usage,
            api_call_count: summary.api_call_count,
            llm_calls: summary.llm_calls,
            retrieval_rounds: summary.retrieval_rounds,
            forced_generations: summary.forced_generations,
            refinement_attempts: summary.refinement_attempts,
            rrw_exchanges: summary.rrw_exchanges,
            rounds_to_pass: summary.rounds_to_pass,
            verdict: summary.verdict,
            selected_passed: summary.selected_passed,
            evaluation_passed: summary.evaluation_passed,
        })
    }

    pub fn iter_events(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().map(|e| &e.event)
    }

    /// Checks the accounting and ordering invariants that must hold for
    /// every trajectory: totals are running sums, api call counts are
    /// non-decreasing and final values match the summary.
    pub fn check_accounting(&self) -> Result<(), String> {
        let mut totals = TokenUsage::default();
        let mut calls = 0u32;
        let mut executed = 0u32;
        let mut replies = 0u32;
        for e in self.iter_events() {
            match e {
                Event::Assistant { usage, totals: t, .. } => {
                    replies += 1;
                    totals += *usage;
                    if *t != totals {
                        return Err(format!("running totals {t:?} differ from sum {totals:?}"));
                    }
                }
                Event::ToolCall { api_calls, .. } => {
                    executed += 1;
                    if *api_calls < calls || *api_calls != executed {
                        return Err(format!("api call counter {api_calls} after {executed} calls"));
                    }
                    calls = *api_calls;
                }
                _ => {}
            }
        }
        if totals != self.usage {
            return Err(format!(
                "summary usage {:?} differs from event sum {totals:?}",
                self.usage
            ));
        }
        if executed != self.api_call_count {
            return Err(format!(
                "summary api calls {} differ from {executed} events",
                self.api_call_count
            ));
        }
        if replies != self.llm_calls {
            return Err(format!(
                "summary llm calls {} differ from {replies} replies",
                self.llm_calls
            ));
        }
        Ok(())
    }
}
