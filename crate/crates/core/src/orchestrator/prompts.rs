//! Prompt templates with `{{name}}` placeholders.

use std::collections::BTreeMap;
use std::path::Path;

use super::OrchestratorError;
use crate::harness::SelectionPlan;
use crate::index::RepoIndex;
use crate::llm::TOOL_APIS;

const BUILTIN: &[(&str, &str)] = &[
    ("system", include_str!("../../templates/system.txt")),
    ("issue", include_str!("../../templates/issue.txt")),
    ("tests", include_str!("../../templates/tests.txt")),
    ("no_tests", include_str!("../../templates/no_tests.txt")),
    ("toolset", include_str!("../../templates/toolset.txt")),
    ("generate", include_str!("../../templates/generate.txt")),
    ("no_candidate", include_str!("../../templates/no_candidate.txt")),
    (
        "fault_localization",
        include_str!("../../templates/fault_localization.txt"),
    ),
    ("context_review", include_str!("../../templates/context_review.txt")),
    (
        "sufficiency_check",
        include_str!("../../templates/sufficiency_check.txt"),
    ),
    ("gather_more", include_str!("../../templates/gather_more.txt")),
    ("fix_strategy", include_str!("../../templates/fix_strategy.txt")),
    ("refine", include_str!("../../templates/refine.txt")),
];

/// Names of the APIs that expose test information.
pub const TEST_APIS: [&str; 2] = ["search_test_cases", "run_pdb_cmd"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    templates: BTreeMap<String, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        PromptTemplates {
            templates: BUILTIN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Built-in templates overridden by any `<name>.txt` found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, OrchestratorError> {
        let mut t = Self::builtin();
        for (name, _) in BUILTIN {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
                t.templates.insert(name.to_string(), text);
            }
        }
        Ok(t)
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(k, _)| *k)
    }

    /// Fill `{{key}}` placeholders. Unknown placeholders are left as written.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        let template = self.templates.get(name).map(String::as_str).unwrap_or("");
        fill(template, vars)
    }
}

pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) => {
                let key = after[..close].trim();
                match vars.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => out.push_str(&rest[open..open + 4 + close]),
                }
                rest = &after[close + 2..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// The API listing for the toolset prompt; test APIs only when tests are
/// visible.
pub fn api_list(with_tests: bool) -> String {
    TOOL_APIS
        .iter()
        .filter(|api| with_tests || !TEST_APIS.contains(&api.name))
        .map(|api| format!("- {}: {}", api.signature(), api.description))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Definition line of the test function named by a node id, if indexed.
fn test_def_line(index: &RepoIndex, file: &str, node_id: &str) -> Option<u32> {
    let mut parts: Vec<&str> = node_id.split("::").skip(1).collect();
    let last = parts.pop()?;
    let func = last.split('[').next().unwrap_or(last);
    parts.push(func);
    let suffix = parts.join(".");
    index
        .entities_in(file)
        .find(|e| e.qualified_name.ends_with(&format!(".{suffix}")))
        .map(|e| e.header_line)
}

/// The per-test block of the issue prompt. Tests whose direct caller is not
/// the test itself also get the call-site file and line.
pub fn render_selected_tests(templates: &PromptTemplates, plan: &SelectionPlan, index: &RepoIndex) -> String {
    if plan.chosen.is_empty() {
        return templates.render("no_tests", &[]);
    }
    let mut blocks = Vec::new();
    for (i, rec) in plan.chosen.iter().enumerate() {
        let line = test_def_line(index, rec.test_file(), &rec.node_id)
            .or_else(|| rec.call_chain.first().map(|f| f.line))
            .unwrap_or(1);
        let call_site = if rec.chain_depth >= 2 {
            rec.call_chain.get(rec.call_chain.len() - 2)
        } else {
            None
        };
        let block = match call_site {
            None => format!("- Test {}:\npytest node id: `{}`, around line: {line}. ", i + 1, rec.node_id),
            Some(site) => format!(
                "- Test {}:\npytest node id: `{}`, around line: {line};\nThe target function is called in file {} around line {};",
                i + 1,
                rec.node_id,
                site.file_path,
                site.line
            ),
        };
        blocks.push(block);
    }
    let count = plan.chosen.len().to_string();
    templates.render("tests", &[("count", &count), ("tests", &blocks.join("\n"))])
}
