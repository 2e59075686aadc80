//! Tool invocations and candidate bodies parsed out of free-text replies.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::sandbox::splice;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgType {
    Str,
    Int,
}

impl ArgType {
    fn name(self) -> &'static str {
        match self {
            ArgType::Str => "str",
            ArgType::Int => "int",
        }
    }
}

/// One registered API: canonical name, accepted aliases and parameters.
#[derive(Debug, Clone, Copy)]
pub struct ApiSpec {
    pub name: &'static str,
    pub aliases: &'static [&'static str],
    pub params: &'static [(&'static str, ArgType)],
    pub description: &'static str,
}

impl ApiSpec {
    pub fn lookup(name: &str) -> Option<&'static ApiSpec> {
        TOOL_APIS
            .iter()
            .find(|api| api.name == name || api.aliases.contains(&name))
    }

    pub fn signature(&self) -> String {
        let params: Vec<String> = self.params.iter().map(|(n, t)| format!("{n}: {}", t.name())).collect();
        format!("{}({})", self.name, params.join(", "))
    }
}

use ArgType::{Int, Str};

pub const TOOL_APIS: &[ApiSpec] = &[
    ApiSpec {
        name: "search_test_cases",
        aliases: &[],
        params: &[],
        description: "List the selected test cases for the target as pytest node ids. Takes no arguments.",
    },
    ApiSpec {
        name: "search_import_in_file",
        aliases: &["search_import_statement"],
        params: &[("file_name", Str)],
        description: "Top-level import statements of the file `file_name`.",
    },
    ApiSpec {
        name: "search_target_usage_example",
        aliases: &["search_target_usage"],
        params: &[("example_num", Int)],
        description: "Up to `example_num` functions or methods that call the target directly. All of them are returned when fewer exist.",
    },
    ApiSpec {
        name: "search_relevant_method",
        aliases: &["search_similar_method"],
        params: &[("top_num", Int)],
        description: "The `top_num` methods whose code is most similar (BM25) to the target's signature and docstring.",
    },
    ApiSpec {
        name: "run_pdb_cmd",
        aliases: &["run_debugger_cmd"],
        params: &[("cmd", Str)],
        description: "Run one pdb command in a debugger session stopped at the start of a selected test, e.g. `l`, `n`, `s`, `c`, `b 23`, `p var`, `q`.",
    },
    ApiSpec {
        name: "search_class",
        aliases: &[],
        params: &[("class_name", Str)],
        description: "Find a class anywhere in the codebase. Returns its name, bases and the signatures of its members.",
    },
    ApiSpec {
        name: "search_class_in_file",
        aliases: &[],
        params: &[("class_name", Str), ("file_name", Str)],
        description: "Find the class `class_name` in the file `file_name`.",
    },
    ApiSpec {
        name: "search_method",
        aliases: &[],
        params: &[("method_name", Str)],
        description: "Find a function or method anywhere in the codebase.",
    },
    ApiSpec {
        name: "search_method_in_file",
        aliases: &[],
        params: &[("method_name", Str), ("file_path", Str)],
        description: "Find the function or method `method_name` in the file `file_path`.",
    },
    ApiSpec {
        name: "search_method_in_class",
        aliases: &[],
        params: &[("method_name", Str), ("class_name", Str)],
        description: "Find the method `method_name` of the class `class_name`.",
    },
    ApiSpec {
        name: "search_code",
        aliases: &[],
        params: &[("code_str", Str)],
        description: "Find code containing the literal text `code_str` anywhere in the codebase.",
    },
    ApiSpec {
        name: "search_code_in_file",
        aliases: &[],
        params: &[("code_str", Str), ("file_path", Str)],
        description: "Find code containing the literal text `code_str` in the file `file_path`.",
    },
    ApiSpec {
        name: "get_code_around_line",
        aliases: &[],
        params: &[("file_path", Str), ("line_number", Int), ("window_size", Int)],
        description: "Lines `line_number - window_size` to `line_number + window_size` of `file_path`. All three arguments are required.",
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArgValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    None,
}

impl ArgValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            ArgValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            ArgValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            ArgValue::Bool(_) => "bool",
            ArgValue::Int(_) => "int",
            ArgValue::Float(_) => "float",
            ArgValue::Str(_) => "str",
            ArgValue::None => "None",
        }
    }
}

impl fmt::Display for ArgValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgValue::Bool(true) => f.write_str("True"),
            ArgValue::Bool(false) => f.write_str("False"),
            ArgValue::Int(i) => write!(f, "{i}"),
            ArgValue::Float(x) => write!(f, "{x:?}"),
            ArgValue::None => f.write_str("None"),
            ArgValue::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '\\' => f.write_str("\\\\")?,
                        '"' => f.write_str("\\\"")?,
                        '\n' => f.write_str("\\n")?,
                        '\r' => f.write_str("\\r")?,
                        '\t' => f.write_str("\\t")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRequest {
    /// Canonical API name, even when an alias was written.
    pub api_name: String,
    pub args: BTreeMap<String, ArgValue>,
    pub raw: String,
    /// Byte range of `raw` in the assistant message.
    pub span: Range<usize>,
}

impl ToolRequest {
    pub fn spec(&self) -> &'static ApiSpec {
        ApiSpec::lookup(&self.api_name).expect("requests carry registered names")
    }

    /// Positional call expression in parameter order.
    pub fn to_call_string(&self) -> String {
        let args: Vec<String> = self
            .spec()
            .params
            .iter()
            .filter_map(|(name, _)| self.args.get(*name).map(ToString::to_string))
            .collect();
        format!("{}({})", self.api_name, args.join(", "))
    }

    /// Identity of the call for caching: name plus canonical arguments.
    pub fn key(&self) -> String {
        self.to_call_string()
    }

    pub fn str_arg(&self, name: &str) -> &str {
        self.args.get(name).and_then(ArgValue::as_str).unwrap_or("")
    }

    pub fn int_arg(&self, name: &str) -> i64 {
        self.args.get(name).and_then(ArgValue::as_int).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_name: Option<String>,
    pub raw: String,
    pub span: Range<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub requests: Vec<ToolRequest>,
    pub rejected: Vec<RejectedRequest>,
}

impl Extraction {
    pub fn is_empty(&self) -> bool {
        self.requests.is_empty() && self.rejected.is_empty()
    }
}

/// Prefixes that mark an identifier as an attempted tool call.
const TOOL_PREFIXES: [&str; 3] = ["search_", "get_", "run_"];

type NamedArgs = Vec<(String, ArgValue)>;

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn ident(&mut self) -> Option<&'a str> {
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_alphabetic() || c == '_' => {}
            _ => return None,
        }
        while matches!(self.peek(), Some(c) if c.is_alphanumeric() || c == '_') {
            self.bump();
        }
        Some(&self.text[start..self.pos])
    }

    fn string(&mut self) -> Result<String, String> {
        if self.rest().starts_with(['r', 'R']) {
            self.bump();
            return self.quoted(true);
        }
        self.quoted(false)
    }

    fn quoted(&mut self, raw: bool) -> Result<String, String> {
        let quote = self.bump().ok_or("unterminated string")?;
        let triple = self.rest().starts_with(&format!("{quote}{quote}"));
        if triple {
            self.bump();
            self.bump();
        }
        let mut out = String::new();
        loop {
            let c = self.bump().ok_or("unterminated string")?;
            if c == quote {
                if !triple {
                    return Ok(out);
                }
                if self.rest().starts_with(&format!("{quote}{quote}")) {
                    self.bump();
                    self.bump();
                    return Ok(out);
                }
                out.push(c);
            } else if c == '\n' && !triple {
                return Err("unterminated string".into());
            } else if c == '\\' {
                let e = self.bump().ok_or("unterminated string")?;
                if raw {
                    out.push('\\');
                    out.push(e);
                    continue;
                }
                match e {
                    'n' => out.push('\n'),
                    't' => out.push('\t'),
                    'r' => out.push('\r'),
                    '0' => out.push('\0'),
                    '\\' | '\'' | '"' => out.push(e),
                    '\n' => {}
                    other => {
                        out.push('\\');
                        out.push(other);
                    }
                }
            } else {
                out.push(c);
            }
        }
    }

    fn number(&mut self) -> Result<ArgValue, String> {
        let start = self.pos;
        if matches!(self.peek(), Some('-' | '+')) {
            self.bump();
        }
        while matches!(self.peek(), Some(c) if c.is_ascii_digit() || matches!(c, '.' | '_' | 'e' | 'E')) {
            self.bump();
        }
        let lit: String = self.text[start..self.pos].chars().filter(|c| *c != '_').collect();
        if let Ok(i) = lit.parse::<i64>() {
            return Ok(ArgValue::Int(i));
        }
        lit.parse::<f64>()
            .map(ArgValue::Float)
            .map_err(|_| format!("bad number `{lit}`"))
    }

    fn value(&mut self) -> Result<ArgValue, String> {
        match self.peek() {
            Some('"' | '\'') => self.string().map(ArgValue::Str),
            Some('r' | 'R') if matches!(self.rest()[1..].chars().next(), Some('"' | '\'')) => {
                self.string().map(ArgValue::Str)
            }
            Some(c) if c.is_ascii_digit() || matches!(c, '-' | '+' | '.') => self.number(),
            Some(_) => match self.ident() {
                Some("True") => Ok(ArgValue::Bool(true)),
                Some("False") => Ok(ArgValue::Bool(false)),
                Some("None") => Ok(ArgValue::None),
                Some(other) => Err(format!("argument `{other}` is not a literal")),
                None => Err(format!("unexpected `{}`", self.peek().unwrap_or(' '))),
            },
            None => Err("unclosed call".into()),
        }
    }

    /// Arguments after the opening parenthesis up to and including `)`.
    fn arguments(&mut self) -> Result<(Vec<ArgValue>, NamedArgs), String> {
        let mut positional = Vec::new();
        let mut named: Vec<(String, ArgValue)> = Vec::new();
        loop {
            self.skip_ws();
            if self.peek() == Some(')') {
                self.bump();
                return Ok((positional, named));
            }
            let save = self.pos;
            let mut keyword = None;
            if let Some(name) = self.ident() {
                self.skip_ws();
                if self.peek() == Some('=') && !self.rest().starts_with("==") {
                    self.bump();
                    self.skip_ws();
                    keyword = Some(name.to_string());
                } else {
                    self.pos = save;
                }
            }
            let value = self.value()?;
            match keyword {
                Some(name) => named.push((name, value)),
                None if !named.is_empty() => return Err("positional argument follows keyword argument".into()),
                None => positional.push(value),
            }
            self.skip_ws();
            match self.bump() {
                Some(',') => {}
                Some(')') => return Ok((positional, named)),
                Some(c) => return Err(format!("unexpected `{c}` in argument list")),
                None => return Err("unclosed call".into()),
            }
        }
    }
}

fn bind(
    spec: &ApiSpec,
    positional: Vec<ArgValue>,
    named: Vec<(String, ArgValue)>,
) -> Result<BTreeMap<String, ArgValue>, String> {
    let expected = spec
        .params
        .iter()
        .map(|(n, t)| format!("{n}: {}", t.name()))
        .collect::<Vec<_>>()
        .join(", ");
    let given = positional.len() + named.len();
    let arity = || {
        format!(
            "{} expects {} argument(s) ({expected}), got {given}",
            spec.name,
            spec.params.len()
        )
    };
    if positional.len() > spec.params.len() {
        return Err(arity());
    }
    let mut args = BTreeMap::new();
    for ((name, _), value) in spec.params.iter().zip(positional) {
        args.insert(name.to_string(), value);
    }
    for (name, value) in named {
        if !spec.params.iter().any(|(n, _)| *n == name) {
            return Err(format!("{} has no parameter `{name}` ({expected})", spec.name));
        }
        if args.insert(name.clone(), value).is_some() {
            return Err(format!("{} got `{name}` twice", spec.name));
        }
    }
    if args.len() < spec.params.len() {
        return Err(arity());
    }
    for (name, ty) in spec.params {
        match args.get(*name) {
            None => return Err(arity()),
            Some(v) => {
                let ok = matches!(
                    (ty, v),
                    (ArgType::Str, ArgValue::Str(_)) | (ArgType::Int, ArgValue::Int(_))
                );
                if !ok {
                    return Err(format!(
                        "{} argument `{name}` must be {}, got {}",
                        spec.name,
                        ty.name(),
                        v.type_name()
                    ));
                }
            }
        }
    }
    Ok(args)
}

fn ident_start(text: &str, at: usize) -> bool {
    match text[..at].chars().next_back() {
        None => true,
        Some(c) => !(c.is_alphanumeric() || c == '_' || c == '.'),
    }
}

fn after_def(text: &str, at: usize) -> bool {
    let before = text[..at].trim_end_matches([' ', '\t']);
    before.ends_with("def") && ident_start(before, before.len() - 3)
}

/// Every invocation of a registered API in `text`, in order. Calls of
/// unknown `search_`/`get_`/`run_` names and malformed calls are rejected
/// with a reason; method calls (`x.name(`) and definitions are ignored.
pub fn extract_tool_requests(text: &str) -> Extraction {
    let mut out = Extraction::default();
    let mut cur = Cursor { text, pos: 0 };
    while cur.pos < text.len() {
        let start = cur.pos;
        let c = cur.peek().expect("in bounds");
        if !(c.is_alphabetic() || c == '_') || !ident_start(text, start) {
            cur.bump();
            continue;
        }
        let name = cur.ident().expect("starts an identifier");
        if !text[cur.pos..].starts_with('(') || after_def(text, start) {
            continue;
        }
        let spec = ApiSpec::lookup(name);
        if spec.is_none() && !TOOL_PREFIXES.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        cur.bump();
        let (positional, named) = match cur.arguments() {
            Ok(args) => args,
            Err(reason) => {
                // Skip only the name so nested calls are still seen.
                let mut end = cur.pos.min(text.len());
                if let Some(nl) = text[start..end].find('\n') {
                    end = start + nl;
                }
                cur.pos = start + name.len();
                out.rejected.push(RejectedRequest {
                    api_name: spec.map(|s| s.name.to_string()),
                    raw: text[start..end].to_string(),
                    span: start..end,
                    reason,
                });
                continue;
            }
        };
        let raw = text[start..cur.pos].to_string();
        let span = start..cur.pos;
        let Some(spec) = spec else {
            out.rejected.push(RejectedRequest {
                api_name: None,
                raw,
                span,
                reason: format!("unknown API `{name}`"),
            });
            continue;
        };
        match bind(spec, positional, named) {
            Ok(args) => out.requests.push(ToolRequest {
                api_name: spec.name.to_string(),
                args,
                raw,
                span,
            }),
            Err(reason) => out.rejected.push(RejectedRequest {
                api_name: Some(spec.name.to_string()),
                raw,
                span,
                reason,
            }),
        }
    }
    out
}

/// Fenced code blocks in `text`, as (info string, content).
pub fn fenced_blocks(text: &str) -> Vec<(String, String)> {
    let mut blocks = Vec::new();
    let mut open: Option<(String, String, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        match open.as_mut() {
            None => {
                if let Some(info) = trimmed.strip_prefix("```") {
                    open = Some(("```".into(), info.trim().to_string(), Vec::new()));
                }
            }
            Some((fence, _, body)) => {
                if trimmed.starts_with(fence.as_str()) && trimmed.trim_end() == fence {
                    let (_, info, body) = open.take().expect("open fence");
                    blocks.push((info, body.join("\n")));
                } else {
                    body.push(line);
                }
            }
        }
    }
    blocks
}

/// Body statements from a reply. The largest fenced block is taken (the
/// first one on ties); a re-emitted `def target(...)` header, decorators and
/// docstring are dropped. Unfenced replies are accepted only when they start
/// with the target's definition.
pub fn extract_candidate_body(text: &str, target_name: &str) -> Result<String, LlmError> {
    let blocks = fenced_blocks(text);
    let code = match blocks
        .iter()
        .map(|(_, b)| b)
        .reduce(|best, b| if b.len() > best.len() { b } else { best })
    {
        Some(b) => b.clone(),
        None => {
            let t = text.trim_start();
            if t.starts_with("def ") || t.starts_with("async def ") || t.starts_with('@') {
                t.to_string()
            } else {
                return Err(LlmError::NoCandidate);
            }
        }
    };
    let header = Regex::new(&format!(
        r"(?m)^[ \t]*(?:async[ \t]+)?def[ \t]+{}[ \t]*\(",
        regex::escape(target_name)
    ))
    .expect("valid pattern");
    let body = match header.find(&code) {
        Some(m) => {
            let line = code[..m.start()].matches('\n').count() as u32 + 1;
            let dedented = crate::pysyntax::dedent(&code);
            splice::function_body(&dedented, line, target_name).unwrap_or_else(|| {
                let rest = code[m.end()..].split_once('\n').map(|x| x.1).unwrap_or("");
                splice::normalize_body(rest)
            })
        }
        None => splice::normalize_body(&code),
    };
    if body.trim().is_empty() {
        return Err(LlmError::NoCandidate);
    }
    Ok(body)
}
