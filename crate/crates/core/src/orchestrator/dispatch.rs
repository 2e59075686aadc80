//! Executing tool requests and rendering their payloads.

use std::collections::HashMap;
use std::time::Duration;

use serde::Serialize;

use crate::harness::SelectionPlan;
use crate::index::{CodeEntity, ImportRecord};
use crate::llm::{RejectedRequest, ToolRequest};
use crate::retrieval::{RetrievalError, Retriever, SearchHit};
use crate::sandbox::{DebuggerSession, SandboxError, Workspace};

pub const REPEAT_NOTICE: &str =
    "Note: this call was already made with the same arguments. The earlier result is repeated below; do not repeat calls.";

/// Message returned to the model for a request that could not be executed.
pub fn rejection_message(r: &RejectedRequest) -> String {
    format!("Rejected `{}`: {}", r.raw, r.reason)
}

fn fence(text: &str) -> String {
    format!("```\n{}\n```", text.trim_end_matches('\n'))
}

fn render_hit(hit: &SearchHit) -> String {
    let mut head = format!("{}:{}-{}", hit.span.file_path, hit.span.start_line, hit.span.end_line);
    if let Some(e) = &hit.entity {
        head.push_str(&format!(" ({})", e.qualified_name));
    }
    if let Some(score) = hit.score {
        head.push_str(&format!(" score {score:.4}"));
    }
    if hit.in_test_file {
        head.push_str(" [test file]");
    }
    format!("{head}\n{}", fence(&hit.snippet))
}

fn render_hits(call: &str, hits: &[SearchHit]) -> String {
    if hits.is_empty() {
        return format!("No results for `{call}`.");
    }
    let body: Vec<String> = hits.iter().map(render_hit).collect();
    format!("Found {} result(s) for `{call}`:\n\n{}", hits.len(), body.join("\n\n"))
}

fn render_imports(call: &str, file: &str, records: &[ImportRecord]) -> String {
    if records.is_empty() {
        return format!("No top-level imports in {file} (`{call}`).");
    }
    let text: Vec<&str> = records.iter().map(|r| r.statement_text.as_str()).collect();
    format!("Top-level imports of {file} (`{call}`):\n{}", fence(&text.join("\n")))
}

/// Per-trajectory tool state: the retrievers, the plan, the debugger session
/// and the repeat cache.
pub struct ToolContext {
    pub retriever: Retriever,
    /// Retriever used while tests are withheld.
    pub blind_retriever: Retriever,
    pub target: CodeEntity,
    pub plan: SelectionPlan,
    pub tests_visible: bool,
    pub debugger_timeout: Duration,
    cache: HashMap<String, String>,
    session: Option<DebuggerSession>,
}

/// Retrieval output before rendering.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", content = "data", rename_all = "snake_case")]
pub enum QueryResult {
    Hits(Vec<SearchHit>),
    Imports(Vec<ImportRecord>),
    Error(String),
}

pub struct Dispatched {
    pub payload: String,
    pub cached: bool,
}

impl ToolContext {
    pub fn new(
        retriever: Retriever,
        blind_retriever: Retriever,
        target: CodeEntity,
        plan: SelectionPlan,
        debugger_timeout: Duration,
    ) -> Self {
        ToolContext {
            retriever,
            blind_retriever,
            target,
            plan,
            tests_visible: false,
            debugger_timeout,
            cache: HashMap::new(),
            session: None,
        }
    }

    /// Close the debugger; called whenever the workspace source changes.
    pub fn close_debugger(&mut self) {
        if let Some(mut s) = self.session.take() {
            s.close();
        }
    }

    fn retriever(&self) -> &Retriever {
        if self.tests_visible {
            &self.retriever
        } else {
            &self.blind_retriever
        }
    }

    pub fn dispatch(&mut self, req: &ToolRequest, ws: &mut Workspace) -> Result<Dispatched, SandboxError> {
        let key = req.key();
        let cacheable = req.api_name != "run_pdb_cmd";
        let scope = if self.tests_visible { "tests" } else { "blind" };
        let cache_key = format!("{scope}\0{key}");
        if cacheable {
            if let Some(prev) = self.cache.get(&cache_key) {
                return Ok(Dispatched {
                    payload: format!("{REPEAT_NOTICE}\n{prev}"),
                    cached: true,
                });
            }
        }
        let payload = self.execute(req, &key, ws)?;
        if cacheable {
            self.cache.insert(cache_key, payload.clone());
        }
        Ok(Dispatched { payload, cached: false })
    }

    /// Structured result of a retrieval request. `None` for the test and
    /// debugger APIs and for unknown names.
    pub fn query(&self, req: &ToolRequest) -> Option<QueryResult> {
        let s = |name: &str| req.str_arg(name).to_string();
        let r = self.retriever();
        let hits = |res: Result<Vec<SearchHit>, RetrievalError>| match res {
            Ok(h) => QueryResult::Hits(h),
            Err(e) => QueryResult::Error(e.to_string()),
        };
        Some(match req.api_name.as_str() {
            "search_class" => hits(r.search_class(&s("class_name"))),
            "search_class_in_file" => hits(r.search_class_in_file(&s("class_name"), &s("file_name"))),
            "search_method" => hits(r.search_method(&s("method_name"))),
            "search_method_in_file" => hits(r.search_method_in_file(&s("method_name"), &s("file_path"))),
            "search_method_in_class" => hits(r.search_method_in_class(&s("method_name"), &s("class_name"))),
            "search_code" => hits(r.search_code(&s("code_str"))),
            "search_code_in_file" => hits(r.search_code_in_file(&s("code_str"), &s("file_path"))),
            "get_code_around_line" => {
                let (line, window) = (req.int_arg("line_number"), req.int_arg("window_size"));
                if line < 1 || window < 0 {
                    QueryResult::Error("line_number must be >= 1 and window_size >= 0".into())
                } else {
                    hits(
                        r.get_code_around_line(&s("file_path"), line as u32, window as u32)
                            .map(|h| vec![h]),
                    )
                }
            }
            "search_import_in_file" => match r.search_import_statement(&s("file_name")) {
                Ok(recs) => QueryResult::Imports(recs),
                Err(e) => QueryResult::Error(e.to_string()),
            },
            "search_relevant_method" => match usize::try_from(req.int_arg("top_num")) {
                Ok(n) => hits(r.search_similar_method(&self.target, n)),
                Err(_) => QueryResult::Error("top_num must be >= 1".into()),
            },
            "search_target_usage_example" => match usize::try_from(req.int_arg("example_num")) {
                Ok(n) => hits(r.search_target_usage(&self.target, n)),
                Err(_) => QueryResult::Error("example_num must be >= 1".into()),
            },
            _ => return None,
        })
    }

    fn execute(&mut self, req: &ToolRequest, call: &str, ws: &mut Workspace) -> Result<String, SandboxError> {
        if let Some(result) = self.query(req) {
            return Ok(match result {
                QueryResult::Hits(h) => render_hits(call, &h),
                QueryResult::Imports(recs) => render_imports(call, req.str_arg("file_name"), &recs),
                QueryResult::Error(e) => format!("Error for `{call}`: {e}"),
            });
        }
        let out = match req.api_name.as_str() {
            "search_test_cases" => {
                if !self.tests_visible || self.plan.is_empty() {
                    format!("`{call}` is not available: no test cases are provided for this task.")
                } else {
                    let ids: Vec<String> = self.plan.node_ids().iter().map(|id| format!("- {id}")).collect();
                    format!("Selected test cases (`{call}`):\n{}", ids.join("\n"))
                }
            }
            "run_pdb_cmd" => return self.debugger(req.str_arg("cmd"), call, ws),
            other => format!("Error for `{call}`: `{other}` is not supported"),
        };
        Ok(out)
    }

    fn debugger(&mut self, cmd: &str, call: &str, ws: &mut Workspace) -> Result<String, SandboxError> {
        let first = match self.plan.chosen.first() {
            Some(r) if self.tests_visible => r.node_id.clone(),
            _ => {
                return Ok(format!(
                    "`{call}` is not available: no test cases are provided for this task."
                ))
            }
        };
        let mut out = String::new();
        if !self.session.as_ref().is_some_and(DebuggerSession::is_alive) {
            self.close_debugger();
            match ws.open_debugger(&first, self.debugger_timeout) {
                Ok(session) => {
                    out.push_str(&format!("Debugger started on {first}:\n{}", session.banner));
                    self.session = Some(session);
                }
                Err(SandboxError::Timeout(m)) | Err(SandboxError::Infrastructure(m)) => {
                    return Ok(format!("Error for `{call}`: debugger could not start: {m}"));
                }
                Err(e) => return Err(e),
            }
        }
        let session = self.session.as_mut().expect("opened above");
        match session.run(cmd, self.debugger_timeout) {
            Ok(text) => out.push_str(&format!("(Pdb) {cmd}\n{text}")),
            Err(SandboxError::Timeout(m)) => out.push_str(&format!("(Pdb) {cmd}\n[session killed: {m}]")),
            Err(SandboxError::SessionClosed(id)) => out.push_str(&format!("(Pdb) {cmd}\n[session {id} closed]")),
            Err(e) => return Err(e),
        }
        if !session.is_alive() {
            out.push_str("\n[debugger exited; the next command starts a new session]");
            self.session = None;
        }
        Ok(out)
    }
}

impl Drop for ToolContext {
    fn drop(&mut self) {
        self.close_debugger();
    }
}
