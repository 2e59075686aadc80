//! Structural index of a Python repository: classes, functions, methods,
//! module-scope imports and syntactic call sites.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use globset::{Glob, GlobSet, GlobSetBuilder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tree_sitter::Node;
use walkdir::WalkDir;

use crate::pysyntax;

/// Caller recorded for call sites outside any class or function.
pub const MODULE_SCOPE: &str = "<module>";

/// Directory names never descended into.
pub const EXCLUDED_DIRS: &[&str] = &[
    ".git",
    ".hg",
    ".svn",
    ".venv",
    "venv",
    "env",
    ".env",
    "__pycache__",
    "build",
    "dist",
    ".tox",
    ".nox",
    ".eggs",
    "node_modules",
    "site-packages",
    ".mypy_cache",
    ".pytest_cache",
    ".tdgen",
];

pub const DEFAULT_INCLUDE: &str = "**/*.py";

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("repository root {0} is not a readable directory")]
    MissingRoot(PathBuf),
    #[error("invalid include glob `{glob}`: {reason}")]
    BadGlob { glob: String, reason: String },
    #[error("target not found: {0}")]
    TargetNotFound(String),
    #[error("ambiguous target {locator}: candidates {candidates:?}")]
    Ambiguous { locator: String, candidates: Vec<String> },
    #[error("index cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CodeSpan {
    pub file_path: String,
    pub start_line: u32,
    pub end_line: u32,
    pub start_col: u32,
}

impl CodeSpan {
    pub fn contains_line(&self, line: u32) -> bool {
        self.start_line <= line && line <= self.end_line
    }

    pub fn encloses(&self, other: &CodeSpan) -> bool {
        self.file_path == other.file_path && self.start_line <= other.start_line && other.end_line <= self.end_line
    }

    fn extent(&self) -> u32 {
        self.end_line - self.start_line
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Class,
    Function,
    Method,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeEntity {
    pub kind: EntityKind,
    pub qualified_name: String,
    pub signature: String,
    pub docstring: Option<String>,
    pub body_text: String,
    pub span: CodeSpan,
    /// Line of the `def`/`class` keyword; differs from `span.start_line`
    /// when the definition is decorated.
    pub header_line: u32,
    pub enclosing_class: Option<String>,
}

impl CodeEntity {
    pub fn name(&self) -> &str {
        self.qualified_name.rsplit('.').next().unwrap_or(&self.qualified_name)
    }

    pub fn is_callable(&self) -> bool {
        matches!(self.kind, EntityKind::Function | EntityKind::Method)
    }

    pub fn same_definition(&self, other: &CodeEntity) -> bool {
        self.qualified_name == other.qualified_name && self.span == other.span
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportRecord {
    pub file_path: String,
    pub statement_text: String,
    pub imported_names: Vec<String>,
    pub line: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallSite {
    pub callee_name: String,
    pub caller_entity: String,
    pub span: CodeSpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub file_path: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoIndex {
    pub root: PathBuf,
    pub entities: Vec<CodeEntity>,
    pub imports: Vec<ImportRecord>,
    pub call_sites: Vec<CallSite>,
    pub file_digests: BTreeMap<String, String>,
    pub skipped: Vec<SkippedFile>,
    #[serde(skip)]
    sources: BTreeMap<String, Arc<str>>,
}

/// Where to find a target: a file plus a qualified name and/or a line.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetLocator {
    pub file_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qualified_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
}

impl std::fmt::Display for TargetLocator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.file_path)?;
        if let Some(q) = &self.qualified_name {
            write!(f, "::{q}")?;
        }
        if let Some(l) = self.line {
            write!(f, ":{l}")?;
        }
        Ok(())
    }
}

/// Dotted module path for a repo-relative file path.
pub fn module_name(file_path: &str) -> String {
    let trimmed = file_path.strip_suffix(".py").unwrap_or(file_path);
    let mut parts: Vec<&str> = trimmed.split('/').filter(|p| !p.is_empty()).collect();
    if parts.len() > 1 && parts.last() == Some(&"__init__") {
        parts.pop();
    }
    parts.join(".")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Per-file extraction result.
#[derive(Debug, Default)]
pub struct FileIndex {
    pub entities: Vec<CodeEntity>,
    pub imports: Vec<ImportRecord>,
    pub call_sites: Vec<CallSite>,
}

#[derive(Clone)]
enum Scope {
    Module,
    Class(String),
    Function(String),
}

impl Scope {
    fn prefix<'a>(&'a self, module: &'a str) -> &'a str {
        match self {
            Scope::Module => module,
            Scope::Class(q) | Scope::Function(q) => q,
        }
    }

    fn caller(&self) -> &str {
        match self {
            Scope::Module => MODULE_SCOPE,
            Scope::Class(q) | Scope::Function(q) => q,
        }
    }
}

struct Extractor<'s> {
    file_path: &'s str,
    module: String,
    source: &'s str,
    out: FileIndex,
}

fn qualify(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<'s> Extractor<'s> {
    fn span(&self, node: Node) -> CodeSpan {
        CodeSpan {
            file_path: self.file_path.to_string(),
            start_line: pysyntax::start_line(node),
            end_line: pysyntax::end_line(node),
            start_col: node.start_position().column as u32,
        }
    }

    fn visit(&mut self, node: Node, scope: &Scope) {
        match node.kind() {
            "decorated_definition" => {
                let mut cursor = node.walk();
                for child in node.children(&mut cursor) {
                    if child.kind() == "decorator" {
                        self.visit(child, scope);
                    }
                }
                if let Some(def) = node.child_by_field_name("definition") {
                    self.definition(def, node, scope);
                }
            }
            "function_definition" | "class_definition" => self.definition(node, node, scope),
            "call" => {
                if let Some(callee) = node.child_by_field_name("function") {
                    let name = match callee.kind() {
                        "identifier" => Some(pysyntax::text(callee, self.source)),
                        "attribute" => callee
                            .child_by_field_name("attribute")
                            .map(|a| pysyntax::text(a, self.source)),
                        _ => None,
                    };
                    if let Some(name) = name {
                        self.out.call_sites.push(CallSite {
                            callee_name: name.to_string(),
                            caller_entity: scope.caller().to_string(),
                            span: self.span(node),
                        });
                    }
                }
                self.children(node, scope);
            }
            "import_statement" | "import_from_statement" | "future_import_statement" => {
                if matches!(scope, Scope::Module) {
                    self.import(node);
                }
            }
            _ => self.children(node, scope),
        }
    }

    fn children(&mut self, node: Node, scope: &Scope) {
        let mut cursor = node.walk();
        for child in node.children(&mut cursor) {
            self.visit(child, scope);
        }
    }

    fn definition(&mut self, def: Node, outer: Node, scope: &Scope) {
        let Some(name_node) = def.child_by_field_name("name") else {
            return;
        };
        let name = pysyntax::text(name_node, self.source);
        let qualified_name = qualify(scope.prefix(&self.module), name);
        let is_class = def.kind() == "class_definition";
        let (kind, enclosing_class) = match (is_class, scope) {
            (true, _) => (EntityKind::Class, None),
            (false, Scope::Class(c)) => (EntityKind::Method, Some(c.clone())),
            (false, _) => (EntityKind::Function, None),
        };
        let body = def.child_by_field_name("body");
        let signature = match pysyntax::child_of_kind(def, ":") {
            Some(colon) => &self.source[def.start_byte()..colon.end_byte()],
            None => pysyntax::text(def, self.source),
        };
        let docstring = body
            .and_then(pysyntax::docstring_node)
            .map(|n| pysyntax::docstring_value(pysyntax::text(n, self.source)));
        let span = self.span(outer);
        let body_text = pysyntax::slice_lines(self.source, span.start_line, span.end_line, span.start_col);
        self.out.entities.push(CodeEntity {
            kind,
            qualified_name: qualified_name.clone(),
            signature: signature.to_string(),
            docstring,
            body_text,
            span,
            header_line: pysyntax::start_line(def),
            enclosing_class,
        });

        // Everything but the body is evaluated in the enclosing scope.
        let mut cursor = def.walk();
        for child in def.children(&mut cursor) {
            if Some(child) != body {
                self.visit(child, scope);
            }
        }
        if let Some(body) = body {
            let inner = if is_class {
                Scope::Class(qualified_name)
            } else {
                Scope::Function(qualified_name)
            };
            self.children(body, &inner);
        }
    }

    fn import(&mut self, node: Node) {
        let mut names = Vec::new();
        let module_field = node.child_by_field_name("module_name");
        let mut cursor = node.walk();
        for child in node.children(&mut cursor) {
            if Some(child) == module_field {
                continue;
            }
            match child.kind() {
                "dotted_name" => {
                    let full = pysyntax::text(child, self.source);
                    let bound = if node.kind() == "import_statement" {
                        full.split('.').next().unwrap_or(full)
                    } else {
                        full
                    };
                    names.push(bound.to_string());
                }
                "aliased_import" => {
                    if let Some(alias) = child.child_by_field_name("alias") {
                        names.push(pysyntax::text(alias, self.source).to_string());
                    }
                }
                "wildcard_import" => names.push("*".to_string()),
                _ => {}
            }
        }
        self.out.imports.push(ImportRecord {
            file_path: self.file_path.to_string(),
            statement_text: pysyntax::text(node, self.source).to_string(),
            imported_names: names,
            line: pysyntax::start_line(node),
        });
    }
}

/// Extract entities, imports and call sites from one file. Returns the
/// syntax error description when the file does not parse cleanly.
pub fn index_file(file_path: &str, source: &str) -> Result<FileIndex, String> {
    let tree = pysyntax::parse(source);
    if let Some((line, what)) = pysyntax::first_error(&tree) {
        return Err(format!("syntax error at line {line}: {what}"));
    }
    let mut extractor = Extractor {
        file_path,
        module: module_name(file_path),
        source,
        out: FileIndex::default(),
    };
    extractor.visit(tree.root_node(), &Scope::Module);
    Ok(extractor.out)
}

fn build_globset(include_globs: &[String]) -> Result<GlobSet, IndexError> {
    let mut builder = GlobSetBuilder::new();
    let defaults = [DEFAULT_INCLUDE.to_string()];
    let globs = if include_globs.is_empty() {
        &defaults[..]
    } else {
        include_globs
    };
    for g in globs {
        let glob = Glob::new(g).map_err(|e| IndexError::BadGlob {
            glob: g.clone(),
            reason: e.to_string(),
        })?;
        builder.add(glob);
    }
    builder.build().map_err(|e| IndexError::BadGlob {
        glob: globs.join(","),
        reason: e.to_string(),
    })
}

fn is_excluded_dir(name: &str) -> bool {
    EXCLUDED_DIRS.contains(&name) || name.ends_with(".egg-info")
}

/// Repo-relative paths (with `/` separators) of files matching the globs,
/// sorted.
pub fn list_files(root: &Path, include_globs: &[String]) -> Result<Vec<String>, IndexError> {
    if !root.is_dir() {
        return Err(IndexError::MissingRoot(root.to_path_buf()));
    }
    let set = build_globset(include_globs)?;
    let mut files = Vec::new();
    let walker = WalkDir::new(root).follow_links(false).into_iter().filter_entry(|e| {
        e.depth() == 0 || !(e.file_type().is_dir() && is_excluded_dir(&e.file_name().to_string_lossy()))
    });
    for entry in walker.flatten() {
        if !entry.file_type().is_file() {
            continue;
        }
        let Ok(rel) = entry.path().strip_prefix(root) else {
            continue;
        };
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        if set.is_match(&rel) {
            files.push(rel);
        }
    }
    files.sort();
    Ok(files)
}

enum FileOutcome {
    Indexed(String, String, FileIndex),
    Skipped(Option<String>, SkippedFile),
}

fn canonical_root(root: &Path) -> Result<PathBuf, IndexError> {
    if !root.is_dir() {
        return Err(IndexError::MissingRoot(root.to_path_buf()));
    }
    root.canonicalize()
        .map_err(|_| IndexError::MissingRoot(root.to_path_buf()))
}

/// Parse every matching file under `root`. Unreadable or unparsable files are
/// recorded in `skipped`.
pub fn build_index(root: &Path, include_globs: &[String]) -> Result<RepoIndex, IndexError> {
    let root = canonical_root(root)?;
    let files = list_files(&root, include_globs)?;
    let outcomes: Vec<FileOutcome> = files
        .par_iter()
        .map(|rel| {
            let bytes = match fs::read(root.join(rel)) {
                Ok(b) => b,
                Err(e) => {
                    return FileOutcome::Skipped(
                        None,
                        SkippedFile {
                            file_path: rel.clone(),
                            reason: format!("unreadable: {e}"),
                        },
                    )
                }
            };
            let digest = sha256_hex(&bytes);
            let source = match String::from_utf8(bytes) {
                Ok(s) => s,
                Err(_) => {
                    return FileOutcome::Skipped(
                        Some(digest),
                        SkippedFile {
                            file_path: rel.clone(),
                            reason: "not valid UTF-8".to_string(),
                        },
                    )
                }
            };
            match index_file(rel, &source) {
                Ok(fi) => FileOutcome::Indexed(digest, source, fi),
                Err(reason) => FileOutcome::Skipped(
                    Some(digest),
                    SkippedFile {
                        file_path: rel.clone(),
                        reason,
                    },
                ),
            }
        })
        .collect();

    let mut index = RepoIndex {
        root,
        entities: Vec::new(),
        imports: Vec::new(),
        call_sites: Vec::new(),
        file_digests: BTreeMap::new(),
        skipped: Vec::new(),
        sources: BTreeMap::new(),
    };
    for (rel, outcome) in files.iter().zip(outcomes) {
        match outcome {
            FileOutcome::Indexed(digest, source, fi) => {
                index.file_digests.insert(rel.clone(), digest);
                index.sources.insert(rel.clone(), Arc::from(source));
                index.entities.extend(fi.entities);
                index.imports.extend(fi.imports);
                index.call_sites.extend(fi.call_sites);
            }
            FileOutcome::Skipped(digest, skipped) => {
                if let Some(d) = digest {
                    index.file_digests.insert(rel.clone(), d);
                }
                index.skipped.push(skipped);
            }
        }
    }
    Ok(index)
}

fn cache_key(root: &Path, include_globs: &[String]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(root.to_string_lossy().as_bytes());
    for g in include_globs {
        hasher.update([0u8]);
        hasher.update(g.as_bytes());
    }
    hex::encode(hasher.finalize())[..24].to_string()
}

/// Build through an on-disk cache: one JSON document per (root, globs),
/// reused only when every file digest still matches.
pub fn build_index_cached(
    root: &Path,
    include_globs: &[String],
    cache_dir: &Path,
) -> Result<(RepoIndex, bool), IndexError> {
    let canon = canonical_root(root)?;
    let path = cache_dir.join(format!("{}.json", cache_key(&canon, include_globs)));
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(mut cached) = serde_json::from_str::<RepoIndex>(&text) {
            if cached.root == canon && cached.reload_sources().is_ok() {
                return Ok((cached, true));
            }
        }
    }
    let index = build_index(&canon, include_globs)?;
    fs::create_dir_all(cache_dir).map_err(|e| IndexError::Cache(e.to_string()))?;
    fs::write(&path, index.to_json()).map_err(|e| IndexError::Cache(e.to_string()))?;
    Ok((index, false))
}

impl RepoIndex {
    /// Deterministic serialization used for the cache and the `index` command.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<RepoIndex, IndexError> {
        let mut index: RepoIndex = serde_json::from_str(text).map_err(|e| IndexError::Cache(e.to_string()))?;
        index.reload_sources()?;
        Ok(index)
    }

    /// Re-read indexed sources from disk, failing if any digest changed or
    /// the file set differs.
    fn reload_sources(&mut self) -> Result<(), IndexError> {
        let skipped: HashSet<&str> = self.skipped.iter().map(|s| s.file_path.as_str()).collect();
        let mut sources = BTreeMap::new();
        for (rel, digest) in &self.file_digests {
            let bytes = fs::read(self.root.join(rel)).map_err(|e| IndexError::Cache(format!("{rel}: {e}")))?;
            if &sha256_hex(&bytes) != digest {
                return Err(IndexError::Cache(format!("{rel} changed")));
            }
            if !skipped.contains(rel.as_str()) {
                let text = String::from_utf8(bytes).map_err(|_| IndexError::Cache(format!("{rel}: not UTF-8")))?;
                sources.insert(rel.clone(), Arc::from(text));
            }
        }
        self.sources = sources;
        Ok(())
    }

    pub fn source(&self, file_path: &str) -> Option<&str> {
        self.sources.get(file_path).map(|s| &**s)
    }

    pub fn files(&self) -> impl Iterator<Item = (&str, &str)> {
        self.sources.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn is_indexed(&self, file_path: &str) -> bool {
        self.sources.contains_key(file_path)
    }

    pub fn entities_in<'a>(&'a self, file_path: &'a str) -> impl Iterator<Item = &'a CodeEntity> + 'a {
        self.entities.iter().filter(move |e| e.span.file_path == file_path)
    }

    pub fn entity(&self, qualified_name: &str) -> Option<&CodeEntity> {
        self.entities.iter().find(|e| e.qualified_name == qualified_name)
    }

    /// Innermost entity whose span covers `line` in `file_path`.
    pub fn innermost_at<'a>(&'a self, file_path: &'a str, line: u32) -> Option<&'a CodeEntity> {
        self.entities_in(file_path)
            .filter(|e| e.span.contains_line(line))
            .min_by_key(|e| (e.span.extent(), std::cmp::Reverse(e.span.start_line)))
    }

    /// The file slice an entity was taken from.
    pub fn span_text(&self, span: &CodeSpan) -> Option<String> {
        self.source(&span.file_path)
            .map(|s| pysyntax::slice_lines(s, span.start_line, span.end_line, span.start_col))
    }

    /// Header and docstring exactly as written in the file.
    pub fn header_with_docstring(&self, entity: &CodeEntity) -> String {
        let Some(source) = self.source(&entity.span.file_path) else {
            return entity.signature.clone();
        };
        let tree = pysyntax::parse(source);
        let Some(def) = find_definition(tree.root_node(), source, entity) else {
            return entity.signature.clone();
        };
        let col = def.start_position().column;
        let end = def
            .child_by_field_name("body")
            .and_then(pysyntax::docstring_node)
            .map(|d| d.end_byte())
            .or_else(|| pysyntax::child_of_kind(def, ":").map(|c| c.end_byte()))
            .unwrap_or(def.end_byte());
        let text = &source[def.start_byte()..end];
        // restore the first line's indentation so the block dedents cleanly
        let mut block = " ".repeat(col);
        block.push_str(text);
        pysyntax::dedent(&block)
    }
}

/// Locate the `function_definition`/`class_definition` node for an entity by
/// its header line and name.
pub fn find_definition<'t>(root: Node<'t>, source: &str, entity: &CodeEntity) -> Option<Node<'t>> {
    find_definition_at(root, source, entity.header_line, entity.name())
}

pub fn find_definition_at<'t>(root: Node<'t>, source: &str, header_line: u32, name: &str) -> Option<Node<'t>> {
    let mut stack = vec![root];
    while let Some(node) = stack.pop() {
        if matches!(node.kind(), "function_definition" | "class_definition")
            && pysyntax::start_line(node) == header_line
            && node
                .child_by_field_name("name")
                .is_some_and(|n| pysyntax::text(n, source) == name)
        {
            return Some(node);
        }
        if pysyntax::start_line(node) <= header_line && header_line <= pysyntax::end_line(node) {
            let mut cursor = node.walk();
            stack.extend(node.children(&mut cursor));
        }
    }
    None
}

/// Resolve a locator to exactly one entity.
pub fn resolve_target(index: &RepoIndex, locator: &TargetLocator) -> Result<CodeEntity, IndexError> {
    if !index.is_indexed(&locator.file_path) {
        return Err(IndexError::TargetNotFound(format!(
            "file {} is not indexed",
            locator.file_path
        )));
    }
    let module = module_name(&locator.file_path);
    let mut candidates: Vec<&CodeEntity> = index.entities_in(&locator.file_path).collect();
    if let Some(q) = &locator.qualified_name {
        let full = qualify(&module, q);
        candidates.retain(|e| e.qualified_name == *q || e.qualified_name == full);
    }
    if let Some(line) = locator.line {
        candidates.retain(|e| e.span.contains_line(line));
        if let Some(min) = candidates.iter().map(|e| e.span.extent()).min() {
            candidates.retain(|e| e.span.extent() == min);
        }
    }
    match candidates.len() {
        0 => Err(IndexError::TargetNotFound(locator.to_string())),
        1 => Ok(candidates[0].clone()),
        _ => Err(IndexError::Ambiguous {
            locator: locator.to_string(),
            candidates: candidates
                .iter()
                .map(|e| format!("{}@{}", e.qualified_name, e.span.start_line))
                .collect(),
        }),
    }
}
