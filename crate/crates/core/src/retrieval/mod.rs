//! Structural and lexical search over a [`RepoIndex`].

pub mod bm25;

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{CodeEntity, CodeSpan, EntityKind, ImportRecord, RepoIndex, MODULE_SCOPE};
use crate::pysyntax;
pub use bm25::{tokenize, Bm25Index, Bm25Params};

/// Most hits a single `search_code` call returns.
pub const MAX_CODE_HITS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub max_snippet_lines: u32,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            bm25_k1: 1.2,
            bm25_b: 0.75,
            max_snippet_lines: 80,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.bm25_k1.is_nan() || self.bm25_k1 <= 0.0 {
            return Err(RetrievalError::InvalidArgument(format!(
                "bm25_k1 must be > 0, got {}",
                self.bm25_k1
            )));
        }
        if !(0.0..=1.0).contains(&self.bm25_b) {
            return Err(RetrievalError::InvalidArgument(format!(
                "bm25_b must be in [0, 1], got {}",
                self.bm25_b
            )));
        }
        if self.max_snippet_lines == 0 {
            return Err(RetrievalError::InvalidArgument("max_snippet_lines must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("{kind} `{name}` not found")]
    ScopeNotFound { kind: &'static str, name: String },
    #[error("line {line} is out of range for {file_path} ({file_lines} lines)")]
    LineOutOfRange {
        file_path: String,
        line: u32,
        file_lines: u32,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SearchClass,
    SearchClassInFile,
    SearchMethod,
    SearchMethodInFile,
    SearchMethodInClass,
    SearchCode,
    SearchCodeInFile,
    GetCodeAroundLine,
    SearchSimilarMethod,
    SearchTargetUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub entity: Option<CodeEntity>,
    pub snippet: String,
    pub span: CodeSpan,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub provenance: Provenance,
    pub in_test_file: bool,
}

/// Test modules by the usual pytest naming conventions.
pub fn is_test_file(file_path: &str) -> bool {
    let mut parts: Vec<&str> = file_path.split('/').collect();
    let name = parts.pop().unwrap_or("");
    name == "conftest.py"
        || (name.starts_with("test_") && name.ends_with(".py"))
        || name.ends_with("_test.py")
        || parts.iter().any(|p| *p == "tests" || *p == "test")
}

/// Query interface shared by the agent toolset and the `tools` command.
pub struct Retriever {
    index: Arc<RepoIndex>,
    config: RetrievalConfig,
    hide_tests: bool,
    corpus: Vec<usize>,
    bm25: Bm25Index,
}

impl Retriever {
    pub fn new(index: Arc<RepoIndex>, config: RetrievalConfig) -> Result<Self, RetrievalError> {
        Self::build(index, config, false)
    }

    /// A retriever that behaves as if test files were absent from the repo.
    pub fn without_tests(index: Arc<RepoIndex>, config: RetrievalConfig) -> Result<Self, RetrievalError> {
        Self::build(index, config, true)
    }

    fn build(index: Arc<RepoIndex>, config: RetrievalConfig, hide_tests: bool) -> Result<Self, RetrievalError> {
        config.validate()?;
        let corpus: Vec<usize> = index
            .entities
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_callable() && !(hide_tests && is_test_file(&e.span.file_path)))
            .map(|(i, _)| i)
            .collect();
        let params = Bm25Params {
            k1: config.bm25_k1,
            b: config.bm25_b,
        };
        let bm25 = Bm25Index::new(corpus.iter().map(|&i| tokenize(&index.entities[i].body_text)), params);
        Ok(Retriever {
            index,
            config,
            hide_tests,
            corpus,
            bm25,
        })
    }

    pub fn index(&self) -> &RepoIndex {
        &self.index
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    fn params(&self) -> Bm25Params {
        Bm25Params {
            k1: self.config.bm25_k1,
            b: self.config.bm25_b,
        }
    }

    fn visible(&self, file_path: &str) -> bool {
        !(self.hide_tests && is_test_file(file_path))
    }

    fn entities(&self) -> impl Iterator<Item = &CodeEntity> {
        self.index.entities.iter().filter(|e| self.visible(&e.span.file_path))
    }

    fn require_file(&self, file_path: &str) -> Result<(), RetrievalError> {
        if self.index.is_indexed(file_path) && self.visible(file_path) {
            Ok(())
        } else {
            Err(RetrievalError::ScopeNotFound {
                kind: "file",
                name: file_path.to_string(),
            })
        }
    }

    fn nonempty(what: &str, value: &str) -> Result<(), RetrievalError> {
        if value.is_empty() {
            Err(RetrievalError::InvalidArgument(format!("{what} must not be empty")))
        } else {
            Ok(())
        }
    }

    fn body_hit(&self, entity: &CodeEntity, provenance: Provenance) -> SearchHit {
        SearchHit {
            entity: Some(entity.clone()),
            snippet: entity.body_text.clone(),
            span: entity.span.clone(),
            score: None,
            provenance,
            in_test_file: is_test_file(&entity.span.file_path),
        }
    }

    /// Class header followed by the signatures of its direct members.
    pub fn class_summary(&self, class: &CodeEntity) -> String {
        let mut out = vec![one_line(&class.signature)];
        let prefix = format!("{}.", class.qualified_name);
        for member in self.index.entities_in(&class.span.file_path) {
            let Some(rest) = member.qualified_name.strip_prefix(&prefix) else {
                continue;
            };
            if rest.contains('.') || !class.span.encloses(&member.span) {
                continue;
            }
            out.push(format!("    {}", one_line(&member.signature)));
        }
        out.join("\n")
    }

    pub fn search_class(&self, class_name: &str) -> Result<Vec<SearchHit>, RetrievalError> {
        Self::nonempty("class_name", class_name)?;
        Ok(self
            .entities()
            .filter(|e| e.kind == EntityKind::Class && e.name() == class_name)
            .map(|e| SearchHit {
                snippet: self.class_summary(e),
                ..self.body_hit(e, Provenance::SearchClass)
            })
            .collect())
    }

    pub fn search_class_in_file(&self, class_name: &str, file_path: &str) -> Result<Vec<SearchHit>, RetrievalError> {
        Self::nonempty("class_name", class_name)?;
        self.require_file(file_path)?;
        Ok(self
            .index
            .entities_in(file_path)
            .filter(|e| e.kind == EntityKind::Class && e.name() == class_name)
            .map(|e| self.body_hit(e, Provenance::SearchClassInFile))
            .collect())
    }

    pub fn search_method(&self, method_name: &str) -> Result<Vec<SearchHit>, RetrievalError> {
        Self::nonempty("method_name", method_name)?;
        Ok(self
            .entities()
            .filter(|e| e.is_callable() && e.name() == method_name)
            .map(|e| self.body_hit(e, Provenance::SearchMethod))
            .collect())
    }

    pub fn search_method_in_file(&self, method_name: &str, file_path: &str) -> Result<Vec<SearchHit>, RetrievalError> {
        Self::nonempty("method_name", method_name)?;
        self.require_file(file_path)?;
        Ok(self
            .index
            .entities_in(file_path)
            .filter(|e| e.is_callable() && e.name() == method_name)
            .map(|e| self.body_hit(e, Provenance::SearchMethodInFile))
            .collect())
    }

    pub fn search_method_in_class(
        &self,
        method_name: &str,
        class_name: &str,
    ) -> Result<Vec<SearchHit>, RetrievalError> {
        Self::nonempty("method_name", method_name)?;
        Self::nonempty("class_name", class_name)?;
        let classes: BTreeSet<&str> = self
            .entities()
            .filter(|e| e.kind == EntityKind::Class && e.name() == class_name)
            .map(|e| e.qualified_name.as_str())
            .collect();
        if classes.is_empty() {
            return Err(RetrievalError::ScopeNotFound {
                kind: "class",
                name: class_name.to_string(),
            });
        }
        Ok(self
            .entities()
            .filter(|e| {
                e.kind == EntityKind::Method
                    && e.name() == method_name
                    && e.enclosing_class.as_deref().is_some_and(|c| classes.contains(c))
            })
            .map(|e| self.body_hit(e, Provenance::SearchMethodInClass))
            .collect())
    }

    pub fn search_code(&self, code_str: &str) -> Result<Vec<SearchHit>, RetrievalError> {
        Self::nonempty("code_str", code_str)?;
        let files: Vec<&str> = self.index.files().map(|(f, _)| f).filter(|f| self.visible(f)).collect();
        Ok(self.code_hits(code_str, &files, Provenance::SearchCode))
    }

    pub fn search_code_in_file(&self, code_str: &str, file_path: &str) -> Result<Vec<SearchHit>, RetrievalError> {
        Self::nonempty("code_str", code_str)?;
        self.require_file(file_path)?;
        Ok(self.code_hits(code_str, &[file_path], Provenance::SearchCodeInFile))
    }

    fn code_hits(&self, needle: &str, files: &[&str], provenance: Provenance) -> Vec<SearchHit> {
        let mut hits: Vec<SearchHit> = Vec::new();
        for file in files {
            let Some(source) = self.index.source(file) else {
                continue;
            };
            for (offset, _) in source.match_indices(needle) {
                if hits.len() >= MAX_CODE_HITS {
                    return hits;
                }
                let line = source[..offset].matches('\n').count() as u32 + 1;
                let inner = self.index.innermost_at(file, line);
                let seen = hits.iter().any(|h| match (inner, &h.entity) {
                    (Some(e), Some(prev)) => e.same_definition(prev),
                    (None, None) => h.span.file_path == *file && h.span.contains_line(line),
                    _ => false,
                });
                if seen {
                    continue;
                }
                let hit = match inner {
                    Some(entity) => self.body_hit(entity, provenance),
                    None => {
                        let total = pysyntax::line_count(source);
                        let half = self.config.max_snippet_lines / 2;
                        let start = line.saturating_sub(half).max(1);
                        let end = (start + self.config.max_snippet_lines - 1).min(total.max(1));
                        self.window_hit(file, source, start, end, provenance)
                    }
                };
                hits.push(hit);
            }
        }
        hits
    }

    fn window_hit(&self, file: &str, source: &str, start: u32, end: u32, provenance: Provenance) -> SearchHit {
        SearchHit {
            entity: None,
            snippet: pysyntax::slice_lines(source, start, end, 0),
            span: CodeSpan {
                file_path: file.to_string(),
                start_line: start,
                end_line: end,
                start_col: 0,
            },
            score: None,
            provenance,
            in_test_file: is_test_file(file),
        }
    }

    pub fn get_code_around_line(
        &self,
        file_path: &str,
        line_number: u32,
        window_size: u32,
    ) -> Result<SearchHit, RetrievalError> {
        self.require_file(file_path)?;
        let source = self.index.source(file_path).unwrap_or("");
        let total = pysyntax::line_count(source);
        if line_number < 1 || line_number > total {
            return Err(RetrievalError::LineOutOfRange {
                file_path: file_path.to_string(),
                line: line_number,
                file_lines: total,
            });
        }
        let start = line_number.saturating_sub(window_size).max(1);
        let end = line_number.saturating_add(window_size).min(total);
        Ok(self.window_hit(file_path, source, start, end, Provenance::GetCodeAroundLine))
    }

    pub fn search_import_statement(&self, file_path: &str) -> Result<Vec<ImportRecord>, RetrievalError> {
        self.require_file(file_path)?;
        let mut records: Vec<ImportRecord> = self
            .index
            .imports
            .iter()
            .filter(|i| i.file_path == file_path)
            .cloned()
            .collect();
        records.sort_by_key(|r| r.line);
        Ok(records)
    }

    /// Top `n` functions and methods by BM25 similarity to the target's
    /// signature and docstring. Ties go to the smaller qualified name.
    pub fn search_similar_method(&self, target: &CodeEntity, n: usize) -> Result<Vec<SearchHit>, RetrievalError> {
        if n == 0 {
            return Err(RetrievalError::InvalidArgument("n must be >= 1".into()));
        }
        let mut query = target.signature.clone();
        if let Some(doc) = &target.docstring {
            query.push('\n');
            query.push_str(doc);
        }
        let query = tokenize(&query);
        let in_corpus = self
            .corpus
            .iter()
            .any(|&i| self.index.entities[i].same_definition(target));
        let (docs, scores) = if in_corpus {
            let docs: Vec<usize> = self
                .corpus
                .iter()
                .copied()
                .filter(|&i| !self.index.entities[i].same_definition(target))
                .collect();
            let bm25 = Bm25Index::new(
                docs.iter().map(|&i| tokenize(&self.index.entities[i].body_text)),
                self.params(),
            );
            let scores = bm25.scores(&query);
            (docs, scores)
        } else {
            (self.corpus.clone(), self.bm25.scores(&query))
        };
        let mut ranked: Vec<(f64, &CodeEntity)> = docs
            .iter()
            .zip(scores)
            .map(|(&i, s)| (s, &self.index.entities[i]))
            .collect();
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.1.qualified_name.cmp(&b.1.qualified_name))
                .then_with(|| a.1.span.cmp(&b.1.span))
        });
        Ok(ranked
            .into_iter()
            .take(n)
            .map(|(score, e)| SearchHit {
                score: Some(score),
                ..self.body_hit(e, Provenance::SearchSimilarMethod)
            })
            .collect())
    }

    /// Entities that call the target by its bare name, ordered by location.
    pub fn search_target_usage(&self, target: &CodeEntity, n: usize) -> Result<Vec<SearchHit>, RetrievalError> {
        if n == 0 {
            return Err(RetrievalError::InvalidArgument("n must be >= 1".into()));
        }
        let name = target.name();
        let mut callers: Vec<&CodeEntity> = Vec::new();
        for site in &self.index.call_sites {
            if site.callee_name != name || site.caller_entity == MODULE_SCOPE || !self.visible(&site.span.file_path) {
                continue;
            }
            let caller = self
                .index
                .entities_in(&site.span.file_path)
                .filter(|e| e.qualified_name == site.caller_entity && e.span.encloses(&site.span))
                .min_by_key(|e| e.span.end_line - e.span.start_line);
            if let Some(caller) = caller {
                if !caller.same_definition(target) && !callers.iter().any(|c| c.same_definition(caller)) {
                    callers.push(caller);
                }
            }
        }
        callers.sort_by(|a, b| {
            (&a.span.file_path, a.span.start_line, &a.qualified_name).cmp(&(
                &b.span.file_path,
                b.span.start_line,
                &b.qualified_name,
            ))
        });
        Ok(callers
            .into_iter()
            .take(n)
            .map(|e| self.body_hit(e, Provenance::SearchTargetUsage))
            .collect())
    }
}

fn one_line(signature: &str) -> String {
    signature.split_whitespace().collect::<Vec<_>>().join(" ")
}
