//! The per-task agent loop: context assembly, retrieval, generation,
//! validation and reflective refinement.

pub mod dispatch;
pub mod prompts;
pub mod trajectory;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::TaskManifest;
use crate::harness::{select, ProbeReport, SelectionPlan, SelectionStrategy};
use crate::index::{build_index, resolve_target, RepoIndex, TargetLocator, DEFAULT_INCLUDE};
use crate::llm::{
    extract_candidate_body, extract_tool_requests, ChatMessage, Extraction, Provider, ProviderConfig, Role, ToolResult,
};
use crate::retrieval::{RetrievalConfig, Retriever};
use crate::sandbox::{
    runner::tail, CandidateBody, ProbeOptions, SandboxError, TestRunResult, Workspace, DEFAULT_DEBUGGER_TIMEOUT_S,
    DEFAULT_EVAL_TIMEOUT_S, DEFAULT_PER_TEST_TIMEOUT_S, DEFAULT_TEST_TIMEOUT_S,
};

pub use dispatch::{rejection_message, QueryResult, ToolContext, REPEAT_NOTICE};
pub use prompts::{api_list, render_selected_tests, PromptTemplates, TEST_APIS};
pub use trajectory::{AgentTrajectory, Event, LoggedEvent, TrajectorySummary, ValidationScope, Verdict};

/// Characters of runner output quoted back to the model.
const FEEDBACK_TAIL: usize = 3000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunBudgets {
    pub max_retrieval_rounds: u32,
    pub max_refinement_attempts: u32,
    pub max_rrw_rounds_per_attempt: u32,
    /// Optional cap on RRW exchanges summed over all attempts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rrw_rounds_total: Option<u32>,
}

impl Default for RunBudgets {
    fn default() -> Self {
        RunBudgets {
            max_retrieval_rounds: 15,
            max_refinement_attempts: 5,
            max_rrw_rounds_per_attempt: 15,
            max_rrw_rounds_total: None,
        }
    }
}

impl RunBudgets {
    pub fn new(retrieval: u32, attempts: u32, rrw: u32) -> Self {
        RunBudgets {
            max_retrieval_rounds: retrieval,
            max_refinement_attempts: attempts,
            max_rrw_rounds_per_attempt: rrw,
            max_rrw_rounds_total: None,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let all = [
            self.max_retrieval_rounds,
            self.max_refinement_attempts,
            self.max_rrw_rounds_per_attempt,
            self.max_rrw_rounds_total.unwrap_or(1),
        ];
        if all.contains(&0) {
            return Err(OrchestratorError::Config("budgets must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StagePolicy {
    NoTest,
    PreGen,
    PostGen,
    #[default]
    AllStage,
}

impl StagePolicy {
    pub const ALL: [StagePolicy; 4] = [
        StagePolicy::NoTest,
        StagePolicy::PreGen,
        StagePolicy::PostGen,
        StagePolicy::AllStage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StagePolicy::NoTest => "NoTest",
            StagePolicy::PreGen => "PreGen",
            StagePolicy::PostGen => "PostGen",
            StagePolicy::AllStage => "AllStage",
        }
    }

    /// Tests appear in the context before the first candidate.
    pub fn tests_before_generation(self) -> bool {
        matches!(self, StagePolicy::PreGen | StagePolicy::AllStage)
    }

    /// Selected tests validate candidates and drive refinement.
    pub fn validates_in_loop(self) -> bool {
        matches!(self, StagePolicy::PostGen | StagePolicy::AllStage)
    }
}

impl std::str::FromStr for StagePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        StagePolicy::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown stage policy `{s}` (NoTest, PreGen, PostGen, AllStage)"))
    }
}

impl std::fmt::Display for StagePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Retrieval,
    Generation,
    FaultLocalization,
    ContextReview,
    SufficiencyCheck,
    GatherMore,
    FixStrategy,
    Refine,
    Validate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sufficiency {
    Sufficient,
    NeedMore,
}

/// The first non-empty line must be exactly `SUFFICIENT` or `NEED_MORE`
/// (surrounding markdown emphasis and a trailing period are tolerated).
/// Anything else counts as `NEED_MORE`.
pub fn parse_sufficiency(reply: &str) -> Sufficiency {
    let first = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let token = first.trim_matches(|c: char| matches!(c, '*' | '`' | '.' | ':') || c.is_whitespace());
    if token == "SUFFICIENT" {
        Sufficiency::Sufficient
    } else {
        Sufficiency::NeedMore
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Timeouts {
    pub selected_s: u64,
    pub evaluation_s: u64,
    pub debugger_s: u64,
    pub per_test_s: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            selected_s: DEFAULT_TEST_TIMEOUT_S,
            evaluation_s: DEFAULT_EVAL_TIMEOUT_S,
            debugger_s: DEFAULT_DEBUGGER_TIMEOUT_S,
            per_test_s: DEFAULT_PER_TEST_TIMEOUT_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub budgets: RunBudgets,
    #[serde(default)]
    pub policy: StagePolicy,
    #[serde(default)]
    pub strategy: SelectionStrategy,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub timeouts: Timeouts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    /// Probe plugin used when a task has no precomputed report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_plugin: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(provider: ProviderConfig) -> Self {
        RunConfig {
            budgets: RunBudgets::default(),
            policy: StagePolicy::default(),
            strategy: SelectionStrategy::default(),
            provider,
            retrieval: RetrievalConfig::default(),
            timeouts: Timeouts::default(),
            templates_dir: None,
            probe_plugin: None,
        }
    }
}

/// Everything a task run leaves behind.
pub struct TaskOutcome {
    pub trajectory: AgentTrajectory,
    pub plan: Option<SelectionPlan>,
    /// The stub-mode report the plan was selected from.
    pub probe_report: Option<ProbeReport>,
    /// Unified diff of the final work tree against the source tree.
    pub patch: String,
}

enum Abort {
    Infra(String),
}

impl From<SandboxError> for Abort {
    fn from(e: SandboxError) -> Self {
        Abort::Infra(e.to_string())
    }
}

fn infra(e: impl std::fmt::Display) -> Abort {
    Abort::Infra(e.to_string())
}

struct Run<'a> {
    traj: AgentTrajectory,
    messages: Vec<ChatMessage>,
    provider: &'a mut dyn Provider,
    templates: PromptTemplates,
    cfg: &'a RunConfig,
}

fn failure_text(result: &TestRunResult) -> String {
    let mut lines: Vec<String> = result
        .per_test
        .iter()
        .map(|(id, s)| {
            format!(
                "{id}: {}",
                serde_json::to_value(s)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default()
            )
        })
        .collect();
    if result.timed_out {
        lines.push("(the run timed out)".into());
    }
    lines.push(String::new());
    lines.push(tail(&result.raw_output_tail, FEEDBACK_TAIL));
    lines.join("\n")
}

impl Run<'_> {
    fn prompt(&mut self, role: Role, phase: Phase, content: String) {
        self.traj.push(Event::Prompt {
            role,
            phase,
            content: content.clone(),
        });
        self.messages.push(match role {
            Role::System => ChatMessage::system(content),
            _ => ChatMessage::user(content),
        });
    }

    fn complete(&mut self, phase: Phase) -> Result<String, Abort> {
        let c = self.provider.complete(&self.messages).map_err(infra)?;
        self.traj.llm_calls += 1;
        self.traj.usage += c.usage;
        self.traj.push(Event::Assistant {
            phase,
            content: c.text.clone(),
            usage: c.usage,
            totals: self.traj.usage,
        });
        self.messages.push(ChatMessage::assistant(c.text.clone()));
        Ok(c.text)
    }

    /// Run every request of `ex` in order and answer with one tool message.
    fn execute(
        &mut self,
        phase: Phase,
        ex: &Extraction,
        ctx: &mut ToolContext,
        ws: &mut Workspace,
    ) -> Result<(), Abort> {
        let mut items: Vec<(usize, Result<&crate::llm::ToolRequest, &crate::llm::RejectedRequest>)> = ex
            .requests
            .iter()
            .map(|r| (r.span.start, Ok(r)))
            .chain(ex.rejected.iter().map(|r| (r.span.start, Err(r))))
            .collect();
        items.sort_by_key(|(start, _)| *start);
        let mut results = Vec::new();
        for (_, item) in items {
            self.traj.api_call_count += 1;
            let (api_name, raw, payload, rejected, cached) = match item {
                Ok(req) => {
                    let d = ctx.dispatch(req, ws)?;
                    (Some(req.api_name.clone()), req.raw.clone(), d.payload, None, d.cached)
                }
                Err(rej) => (
                    rej.api_name.clone(),
                    rej.raw.clone(),
                    rejection_message(rej),
                    Some(rej.reason.clone()),
                    false,
                ),
            };
            self.traj.push(Event::ToolCall {
                phase,
                api_name: api_name.clone(),
                raw: raw.clone(),
                rejected,
                cached,
                api_calls: self.traj.api_call_count,
            });
            self.traj.push(Event::ToolResult {
                api_name: api_name.clone(),
                payload: payload.clone(),
            });
            results.push(ToolResult {
                api_name: api_name.unwrap_or_default(),
                args_digest: crate::index::sha256_hex(raw.as_bytes())[..16].to_string(),
                payload,
            });
        }
        self.messages.push(ChatMessage::tool(results));
        Ok(())
    }

    /// Ask for a candidate, re-prompting once when none is found.
    fn candidate_from(
        &mut self,
        phase: Phase,
        first_reply: Option<String>,
        target_name: &str,
    ) -> Result<Option<String>, Abort> {
        let reply = match first_reply {
            Some(r) => r,
            None => self.complete(phase)?,
        };
        if let Ok(body) = extract_candidate_body(&reply, target_name) {
            return Ok(Some(body));
        }
        let nudge = self.templates.render("no_candidate", &[("target_name", target_name)]);
        self.prompt(Role::User, phase, nudge);
        let reply = self.complete(phase)?;
        Ok(extract_candidate_body(&reply, target_name).ok())
    }

    /// Apply and, when asked, validate a candidate. Returns the failure text
    /// or `None` when the selected tests passed.
    fn validate(
        &mut self,
        ws: &mut Workspace,
        ctx: &mut ToolContext,
        body: &str,
        attempt_index: u32,
        run_selected: bool,
    ) -> Result<Option<String>, Abort> {
        self.traj.push(Event::Candidate {
            attempt_index,
            body: body.to_string(),
        });
        ctx.close_debugger();
        let candidate = CandidateBody {
            body_text: body.to_string(),
            attempt_index,
        };
        match ws.apply_candidate(&candidate) {
            Ok(()) => {}
            Err(SandboxError::SyntacticCandidate { line, message }) => {
                let text = format!("The candidate does not parse (line {line}): {message}");
                self.traj.push(Event::Validation {
                    scope: ValidationScope::Syntax,
                    attempt_index,
                    passed: false,
                    per_test: Default::default(),
                    timed_out: false,
                    output: text.clone(),
                });
                return Ok(Some(text));
            }
            Err(SandboxError::EmptyCandidate) => return Ok(Some("The candidate body is empty.".into())),
            Err(e) => return Err(e.into()),
        }
        if !run_selected {
            return Ok(None);
        }
        let ids = ctx.plan.node_ids();
        let result = ws.run_tests(&ids, Duration::from_secs(self.cfg.timeouts.selected_s))?;
        let passed = result.all_passed();
        self.traj.push(Event::Validation {
            scope: ValidationScope::Selected,
            attempt_index,
            passed,
            per_test: result.per_test.clone(),
            timed_out: result.timed_out,
            output: tail(&result.raw_output_tail, FEEDBACK_TAIL),
        });
        Ok(if passed { None } else { Some(failure_text(&result)) })
    }
}

fn load_report(task: &TaskManifest, cfg: &RunConfig, ws: &Workspace) -> Result<ProbeReport, Abort> {
    let report = match (&task.probe_report_path, &cfg.probe_plugin) {
        (Some(path), _) => ProbeReport::load(path).map_err(infra)?,
        (None, Some(plugin)) => ws.run_probe(
            plugin,
            &ProbeOptions {
                mode: crate::harness::ProbeMode::Stub,
                selector: Vec::new(),
                per_test_timeout_s: cfg.timeouts.per_test_s,
                suite_timeout_s: cfg.timeouts.evaluation_s,
            },
        )?,
        (None, None) => {
            return Err(Abort::Infra(
                "task has no probe report and no probe plugin is configured".into(),
            ))
        }
    };
    let t = ws.target();
    if report.target.file_path != t.span.file_path || report.target.qualified_name != t.qualified_name {
        return Err(Abort::Infra(format!(
            "probe report targets {}::{}, task targets {}::{}",
            report.target.file_path, report.target.qualified_name, t.span.file_path, t.qualified_name
        )));
    }
    Ok(report)
}

/// Run one task end to end. Never fails: setup, runner and provider
/// failures become an `infrastructure_error` verdict.
pub fn run_task(
    task: &TaskManifest,
    cfg: &RunConfig,
    provider: &mut dyn Provider,
    workspace_base: Option<&Path>,
) -> TaskOutcome {
    let mut run = Run {
        traj: AgentTrajectory::new(&task.task_id),
        messages: Vec::new(),
        provider,
        templates: PromptTemplates::builtin(),
        cfg,
    };
    let mut out = TaskOutcome {
        trajectory: AgentTrajectory::new(&task.task_id),
        plan: None,
        probe_report: None,
        patch: String::new(),
    };
    if let Err(Abort::Infra(reason)) = drive(task, cfg, &mut run, &mut out, workspace_base) {
        run.traj.verdict = Verdict::InfrastructureError;
        run.traj.rounds_to_pass = None;
        run.traj.push(Event::Verdict {
            verdict: Verdict::InfrastructureError,
            rounds_to_pass: None,
            reason: Some(reason),
        });
    }
    out.trajectory = run.traj;
    out
}

fn drive(
    task: &TaskManifest,
    cfg: &RunConfig,
    run: &mut Run,
    out: &mut TaskOutcome,
    workspace_base: Option<&Path>,
) -> Result<(), Abort> {
    cfg.budgets.validate().map_err(infra)?;
    if let Some(dir) = &cfg.templates_dir {
        run.templates = PromptTemplates::load_dir(dir).map_err(infra)?;
    }
    let include = [DEFAULT_INCLUDE.to_string()];
    let source_index = build_index(&task.repo_root, &include).map_err(infra)?;
    let locator = TargetLocator {
        file_path: task.target.file_path.clone(),
        qualified_name: Some(task.target.qualified_name.clone()),
        line: None,
    };
    let target = resolve_target(&source_index, &locator).map_err(infra)?;
    if target.span.start_line != task.target.start_line || target.span.end_line != task.target.end_line {
        return Err(Abort::Infra(format!(
            "{} spans lines {}-{}, manifest says {}-{}",
            target.qualified_name,
            target.span.start_line,
            target.span.end_line,
            task.target.start_line,
            task.target.end_line
        )));
    }
    let source_block = source_index.header_with_docstring(&target);
    let mut ws = Workspace::create(&task.repo_root, target.clone(), task.env.clone(), workspace_base)?;
    ws.install_stub()?;

    let mut policy = cfg.policy;
    let plan = if policy == StagePolicy::NoTest {
        SelectionPlan {
            strategy: cfg.strategy,
            chosen: Vec::new(),
            clusters: Vec::new(),
            rationale: Vec::new(),
            no_failing_tests: false,
        }
    } else {
        let report = load_report(task, cfg, &ws)?;
        let plan = select(&report, &cfg.strategy);
        out.probe_report = Some(report);
        plan
    };
    if plan.is_empty() && policy != StagePolicy::NoTest {
        run.traj.push(Event::Warning {
            message: "no test fails against the stub; continuing without tests".into(),
        });
        policy = StagePolicy::NoTest;
    }
    out.plan = Some(plan.clone());
    run.traj.push(Event::Start {
        task_id: task.task_id.clone(),
        policy: cfg.policy,
        effective_policy: policy,
        selected_tests: if policy == StagePolicy::NoTest {
            Vec::new()
        } else {
            plan.node_ids()
        },
    });

    let stubbed: Arc<RepoIndex> = Arc::new(build_index(ws.work_root(), &include).map_err(infra)?);
    let retriever = Retriever::new(stubbed.clone(), cfg.retrieval).map_err(infra)?;
    let blind = Retriever::without_tests(stubbed.clone(), cfg.retrieval).map_err(infra)?;
    let mut ctx = ToolContext::new(
        retriever,
        blind,
        ws.target().clone(),
        plan.clone(),
        Duration::from_secs(cfg.timeouts.debugger_s),
    );
    ctx.tests_visible = policy.tests_before_generation();

    let target_name = target.name().to_string();
    let test_section = if ctx.tests_visible {
        render_selected_tests(&run.templates, &plan, &stubbed)
    } else {
        String::new()
    };
    let start = task.target.start_line.to_string();
    let end = task.target.end_line.to_string();
    let issue = run.templates.render(
        "issue",
        &[
            ("target_name", &target_name),
            ("file_path", &task.target.file_path),
            ("start_line", &start),
            ("end_line", &end),
            ("source", &source_block),
            ("test_section", &test_section),
        ],
    );
    let toolset = run
        .templates
        .render("toolset", &[("api_list", &api_list(ctx.tests_visible))]);
    let system = run.templates.render("system", &[]);
    run.prompt(Role::System, Phase::Retrieval, system);
    run.prompt(Role::User, Phase::Retrieval, format!("{issue}\n{toolset}"));

    // Retrieval: tool calls take precedence over a candidate in the same reply.
    let mut first_reply = None;
    loop {
        let reply = run.complete(Phase::Retrieval)?;
        let ex = extract_tool_requests(&reply);
        if ex.is_empty() {
            if extract_candidate_body(&reply, &target_name).is_ok() {
                first_reply = Some(reply);
            }
            break;
        }
        run.traj.retrieval_rounds += 1;
        run.execute(Phase::Retrieval, &ex, &mut ctx, &mut ws)?;
        if run.traj.retrieval_rounds >= cfg.budgets.max_retrieval_rounds {
            break;
        }
    }
    if first_reply.is_none() {
        run.traj.forced_generations += 1;
        let msg = run.templates.render("generate", &[("target_name", &target_name)]);
        run.prompt(Role::User, Phase::Generation, msg);
    }
    let Some(mut body) = run.candidate_from(Phase::Generation, first_reply, &target_name)? else {
        return finish(run, &mut ws, task, cfg, None, &mut out.patch, Some("no candidate"));
    };

    let in_loop = policy.validates_in_loop();
    let mut failure = run.validate(&mut ws, &mut ctx, &body, 0, in_loop)?;
    if !in_loop {
        return finish(run, &mut ws, task, cfg, None, &mut out.patch, None);
    }
    if failure.is_none() {
        run.traj.selected_passed = Some(true);
        return finish(run, &mut ws, task, cfg, Some(0), &mut out.patch, None);
    }

    ctx.tests_visible = true;
    let mut total_exchanges = 0u32;
    let total_cap = cfg.budgets.max_rrw_rounds_total.unwrap_or(u32::MAX);
    for attempt in 1..=cfg.budgets.max_refinement_attempts {
        run.traj.refinement_attempts = attempt;
        let attempt_s = attempt.to_string();
        let mut exchanges = 0u32;

        run.traj.push(Event::RrwPhase {
            attempt_index: attempt,
            phase: Phase::FaultLocalization,
        });
        let msg = run.templates.render(
            "fault_localization",
            &[
                ("attempt", &attempt_s),
                ("target_name", &target_name),
                ("candidate", &body),
                ("failure", failure.as_deref().unwrap_or("")),
            ],
        );
        run.prompt(Role::User, Phase::FaultLocalization, msg);
        run.complete(Phase::FaultLocalization)?;

        run.traj.push(Event::RrwPhase {
            attempt_index: attempt,
            phase: Phase::ContextReview,
        });
        let msg = run.templates.render("context_review", &[("target_name", &target_name)]);
        run.prompt(Role::User, Phase::ContextReview, msg);
        run.complete(Phase::ContextReview)?;

        loop {
            run.traj.push(Event::RrwPhase {
                attempt_index: attempt,
                phase: Phase::SufficiencyCheck,
            });
            let msg = run
                .templates
                .render("sufficiency_check", &[("target_name", &target_name)]);
            run.prompt(Role::User, Phase::SufficiencyCheck, msg);
            let reply = run.complete(Phase::SufficiencyCheck)?;
            let out_of_budget = exchanges >= cfg.budgets.max_rrw_rounds_per_attempt || total_exchanges >= total_cap;
            if parse_sufficiency(&reply) == Sufficiency::Sufficient {
                break;
            }
            if out_of_budget {
                run.traj.push(Event::Warning {
                    message: format!("attempt {attempt}: exchange budget spent before SUFFICIENT; refining anyway"),
                });
                break;
            }
            run.traj.push(Event::RrwPhase {
                attempt_index: attempt,
                phase: Phase::GatherMore,
            });
            let remaining = (cfg.budgets.max_rrw_rounds_per_attempt - exchanges).to_string();
            let msg = run.templates.render(
                "gather_more",
                &[("remaining", &remaining), ("target_name", &target_name)],
            );
            run.prompt(Role::User, Phase::GatherMore, msg);
            let reply = run.complete(Phase::GatherMore)?;
            exchanges += 1;
            total_exchanges += 1;
            let ex = extract_tool_requests(&reply);
            if !ex.is_empty() {
                run.execute(Phase::GatherMore, &ex, &mut ctx, &mut ws)?;
            }
        }

        run.traj.push(Event::RrwPhase {
            attempt_index: attempt,
            phase: Phase::FixStrategy,
        });
        let msg = run.templates.render("fix_strategy", &[("target_name", &target_name)]);
        run.prompt(Role::User, Phase::FixStrategy, msg);
        run.complete(Phase::FixStrategy)?;

        run.traj.push(Event::RrwPhase {
            attempt_index: attempt,
            phase: Phase::Refine,
        });
        let msg = run.templates.render("refine", &[("target_name", &target_name)]);
        run.prompt(Role::User, Phase::Refine, msg);
        let refined = run.candidate_from(Phase::Refine, None, &target_name)?;
        run.traj.rrw_exchanges.push(exchanges);
        let Some(refined) = refined else {
            run.traj.push(Event::Warning {
                message: format!("attempt {attempt} produced no candidate"),
            });
            continue;
        };
        body = refined;
        run.traj.push(Event::RrwPhase {
            attempt_index: attempt,
            phase: Phase::Validate,
        });
        failure = run.validate(&mut ws, &mut ctx, &body, attempt, true)?;
        if failure.is_none() {
            run.traj.selected_passed = Some(true);
            return finish(run, &mut ws, task, cfg, Some(attempt), &mut out.patch, None);
        }
        if total_exchanges >= total_cap && attempt < cfg.budgets.max_refinement_attempts {
            run.traj.push(Event::Warning {
                message: "total RRW exchange budget spent".into(),
            });
            break;
        }
    }
    run.traj.selected_passed = Some(false);
    finish(
        run,
        &mut ws,
        task,
        cfg,
        None,
        &mut out.patch,
        Some("refinement budget exhausted"),
    )
}

/// Run the evaluation suite and settle the verdict. `passed_at` is the
/// attempt at which the selected tests passed, when they did.
fn finish(
    run: &mut Run,
    ws: &mut Workspace,
    task: &TaskManifest,
    cfg: &RunConfig,
    passed_at: Option<u32>,
    patch_out: &mut String,
    failure: Option<&str>,
) -> Result<(), Abort> {
    *patch_out = ws.export_patch();
    let in_loop_failed = failure == Some("refinement budget exhausted");
    let no_candidate = failure == Some("no candidate");
    let eval_passed = if no_candidate {
        false
    } else {
        let result = crate::eval::final_verdict(ws, task, Duration::from_secs(cfg.timeouts.evaluation_s))?;
        let passed = result.all_passed();
        run.traj.push(Event::Validation {
            scope: ValidationScope::Evaluation,
            attempt_index: run.traj.refinement_attempts,
            passed,
            per_test: result.per_test.clone(),
            timed_out: result.timed_out,
            output: tail(&result.raw_output_tail, FEEDBACK_TAIL),
        });
        run.traj.evaluation_passed = Some(passed);
        passed
    };
    let verdict = if in_loop_failed {
        Verdict::BudgetExhausted
    } else if eval_passed {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    let rounds = match verdict {
        Verdict::Pass => Some(passed_at.unwrap_or(0)),
        _ => None,
    };
    run.traj.verdict = verdict;
    run.traj.rounds_to_pass = rounds;
    run.traj.push(Event::Verdict {
        verdict,
        rounds_to_pass: rounds,
        reason: failure.map(str::to_string),
    });
    Ok(())
}
