//! Thin layer over tree-sitter's Python grammar plus a few text utilities
//! (line slicing, string-aware dedent) shared by the indexer, the complexity
//! counter and the sandbox splicer.

use std::collections::BTreeSet;

use tree_sitter::{Node, Parser, Tree};

/// Parse Python source. Never fails on bad syntax; check [`first_error`].
pub fn parse(source: &str) -> Tree {
    let mut parser = Parser::new();
    parser
        .set_language(&tree_sitter_python::LANGUAGE.into())
        .expect("python grammar is ABI compatible");
    parser
        .parse(source, None)
        .expect("parser has a language and no cancellation")
}

/// 1-based line and description of the first ERROR / MISSING node, if any.
pub fn first_error(tree: &Tree) -> Option<(u32, String)> {
    let root = tree.root_node();
    if !root.has_error() {
        return None;
    }
    fn find(node: Node) -> Option<Node> {
        if node.is_error() || node.is_missing() {
            return Some(node);
        }
        let mut cursor = node.walk();
        for child in node.children(&mut cursor) {
            if child.has_error() {
                if let Some(found) = find(child) {
                    return Some(found);
                }
            }
        }
        None
    }
    let node = find(root).unwrap_or(root);
    let line = node.start_position().row as u32 + 1;
    let what = if node.is_missing() {
        format!("missing `{}`", node.kind())
    } else {
        "invalid syntax".to_string()
    };
    Some((line, what))
}

pub fn text<'a>(node: Node, source: &'a str) -> &'a str {
    &source[node.byte_range()]
}

/// 1-based first line of a node.
pub fn start_line(node: Node) -> u32 {
    node.start_position().row as u32 + 1
}

/// 1-based last line of a node, not counting a trailing position at column 0.
pub fn end_line(node: Node) -> u32 {
    let start = node.start_position();
    let end = node.end_position();
    if end.column == 0 && end.row > start.row {
        end.row as u32
    } else {
        end.row as u32 + 1
    }
}

/// Lines of `source` split on `\n` only, without terminators.
pub fn lines(source: &str) -> Vec<&str> {
    source.split('\n').collect()
}

/// Number of lines a file has for range checks. A trailing newline does not
/// open a new line.
pub fn line_count(source: &str) -> u32 {
    if source.is_empty() {
        return 0;
    }
    let n = source.split('\n').count() as u32;
    if source.ends_with('\n') {
        n - 1
    } else {
        n
    }
}

/// The file text for `start_line..=end_line`, the first line taken from byte
/// column `start_col`. Lines are 1-based; out-of-range lines are clamped.
pub fn slice_lines(source: &str, start_line: u32, end_line: u32, start_col: u32) -> String {
    let all = lines(source);
    if all.is_empty() || start_line == 0 || start_line > end_line {
        return String::new();
    }
    let first = (start_line - 1) as usize;
    let last = ((end_line - 1) as usize).min(all.len() - 1);
    if first > last {
        return String::new();
    }
    let mut out = String::new();
    for (i, line) in all[first..=last].iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if i == 0 {
            let col = (start_col as usize).min(line.len());
            out.push_str(&line[col..]);
        } else {
            out.push_str(line);
        }
    }
    out
}

/// Zero-based indices of lines that begin inside a multi-line string literal
/// (the lines after the one holding the opening quotes, up to and including
/// the line holding the closing quotes). Re-indenting such lines would change
/// the literal's value.
pub fn string_interior_lines(source: &str) -> BTreeSet<usize> {
    let bytes = source.as_bytes();
    let mut interior = BTreeSet::new();
    let mut line = 0usize;
    let mut i = 0usize;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'\n' => {
                line += 1;
                i += 1;
            }
            b'#' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'"' | b'\'' => {
                let triple = i + 2 < bytes.len() && bytes[i + 1] == c && bytes[i + 2] == c;
                if triple {
                    i += 3;
                    while i < bytes.len() {
                        let b = bytes[i];
                        if b == b'\\' {
                            // escapes (raw or not) never terminate the literal
                            if bytes.get(i + 1) == Some(&b'\n') {
                                line += 1;
                                interior.insert(line);
                            }
                            i += 2;
                            continue;
                        }
                        if b == b'\n' {
                            line += 1;
                            interior.insert(line);
                            i += 1;
                            continue;
                        }
                        if b == c && bytes.get(i + 1) == Some(&c) && bytes.get(i + 2) == Some(&c) {
                            i += 3;
                            break;
                        }
                        i += 1;
                    }
                } else {
                    i += 1;
                    while i < bytes.len() {
                        let b = bytes[i];
                        if b == b'\\' {
                            if i + 1 < bytes.len() && bytes[i + 1] == b'\n' {
                                line += 1;
                                interior.insert(line);
                            }
                            i += 2;
                            continue;
                        }
                        if b == c || b == b'\n' {
                            i += 1;
                            if b == b'\n' {
                                line += 1;
                            }
                            break;
                        }
                        i += 1;
                    }
                }
            }
            _ => i += 1,
        }
    }
    interior
}

/// Remove the longest common leading whitespace from every non-blank line
/// that is not inside a multi-line string literal. Blank lines become empty.
pub fn dedent(source: &str) -> String {
    let interior = string_interior_lines(source);
    let all = lines(source);
    let mut common: Option<&str> = None;
    for (i, line) in all.iter().enumerate() {
        if interior.contains(&i) || line.trim().is_empty() {
            continue;
        }
        let ws_len = line.len() - line.trim_start_matches([' ', '\t']).len();
        let ws = &line[..ws_len];
        common = Some(match common {
            None => ws,
            Some(prev) => {
                let n = prev.bytes().zip(ws.bytes()).take_while(|(a, b)| a == b).count();
                &prev[..n]
            }
        });
    }
    let common = common.unwrap_or("").to_string();
    let mut out = Vec::with_capacity(all.len());
    for (i, line) in all.iter().enumerate() {
        if interior.contains(&i) {
            out.push(line.to_string());
        } else if line.trim().is_empty() {
            out.push(String::new());
        } else {
            out.push(line[common.len()..].to_string());
        }
    }
    out.join("\n")
}

/// Prefix every non-blank line outside multi-line strings with `indent`.
pub fn indent(source: &str, indent: &str) -> String {
    let interior = string_interior_lines(source);
    lines(source)
        .iter()
        .enumerate()
        .map(|(i, line)| {
            if interior.contains(&i) {
                line.to_string()
            } else if line.trim().is_empty() {
                String::new()
            } else {
                format!("{indent}{line}")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Leading whitespace of a line.
pub fn leading_ws(line: &str) -> &str {
    let n = line.len() - line.trim_start_matches([' ', '\t']).len();
    &line[..n]
}

/// Indentation unit used by a file: the smallest positive increase between
/// consecutive indented code lines, defaulting to four spaces.
pub fn infer_indent_unit(source: &str) -> String {
    let interior = string_interior_lines(source);
    let mut prev: Option<String> = None;
    let mut best: Option<String> = None;
    for (i, line) in lines(source).iter().enumerate() {
        if interior.contains(&i) || line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let ws = leading_ws(line).to_string();
        if let Some(p) = &prev {
            if ws.len() > p.len() && ws.starts_with(p.as_str()) {
                let step = ws[p.len()..].to_string();
                if best.as_ref().is_none_or(|b| step.len() < b.len()) {
                    best = Some(step);
                }
            }
        }
        prev = Some(ws);
    }
    best.unwrap_or_else(|| "    ".to_string())
}

/// Docstring node of a function/class body block, if its first statement is
/// a bare string expression.
pub fn docstring_node<'t>(block: Node<'t>) -> Option<Node<'t>> {
    let mut cursor = block.walk();
    let first = block.named_children(&mut cursor).find(|n| n.kind() != "comment")?;
    if first.kind() != "expression_statement" || first.named_child_count() != 1 {
        return None;
    }
    let inner = first.named_child(0)?;
    matches!(inner.kind(), "string" | "concatenated_string").then_some(first)
}

/// Cleaned docstring value: quotes and prefixes removed, indentation of the
/// continuation lines normalized.
pub fn docstring_value(literal: &str) -> String {
    let body = literal.trim_start_matches(|c: char| c.is_ascii_alphabetic());
    let body = if body.len() >= 6 && (body.starts_with("\"\"\"") || body.starts_with("'''")) {
        &body[3..body.len() - 3]
    } else if body.len() >= 2 {
        &body[1..body.len() - 1]
    } else {
        body
    };
    let all: Vec<&str> = body.split('\n').collect();
    let margin = all
        .iter()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| leading_ws(l).len())
        .min()
        .unwrap_or(0);
    let mut out: Vec<String> = Vec::with_capacity(all.len());
    out.push(all[0].trim().to_string());
    for line in all.iter().skip(1) {
        if line.trim().is_empty() {
            out.push(String::new());
        } else {
            out.push(line[margin.min(line.len())..].trim_end().to_string());
        }
    }
    while out.first().is_some_and(|l| l.is_empty()) {
        out.remove(0);
    }
    while out.last().is_some_and(|l| l.is_empty()) {
        out.pop();
    }
    out.join("\n")
}

/// Named-or-anonymous child by kind.
pub fn child_of_kind<'t>(node: Node<'t>, kind: &str) -> Option<Node<'t>> {
    let mut cursor = node.walk();
    let found = node.children(&mut cursor).find(|c| c.kind() == kind);
    found
}
