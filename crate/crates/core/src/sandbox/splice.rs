//! Text-level editing of a single function body.

use tree_sitter::Node;

use crate::index::find_definition_at;
use crate::pysyntax;

/// Where a function body lives in a source file and how it is indented.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BodySlot {
    /// Byte offset just past the header (or past the docstring when the
    /// function has one). Everything before it is preserved.
    pub keep_end: usize,
    /// Byte offset of the end of the body block.
    pub body_end: usize,
    /// Indentation for body statements.
    pub indent: String,
}

fn header_indent(source: &str, def: Node) -> String {
    let row = def.start_position().row;
    let line = pysyntax::lines(source).get(row).copied().unwrap_or("");
    pysyntax::leading_ws(line).to_string()
}

/// Locate the body of the function defined at `header_line` named `name`.
pub fn body_slot(source: &str, header_line: u32, name: &str) -> Result<BodySlot, String> {
    let tree = pysyntax::parse(source);
    let def = find_definition_at(tree.root_node(), source, header_line, name)
        .ok_or_else(|| format!("no definition of `{name}` at line {header_line}"))?;
    let body = def
        .child_by_field_name("body")
        .ok_or_else(|| format!("`{name}` has no body"))?;
    let colon = pysyntax::child_of_kind(def, ":").ok_or_else(|| format!("`{name}` has no `:`"))?;
    let header_row = colon.end_position().row;
    let docstring = pysyntax::docstring_node(body);

    let keep_end = match docstring {
        Some(doc) => doc.end_byte(),
        None => {
            let mut end = colon.end_byte();
            let mut cursor = def.walk();
            for child in def.children(&mut cursor) {
                if child.kind() == "comment" && child.start_position().row == header_row && child.start_byte() >= end {
                    end = child.end_byte();
                }
            }
            end
        }
    };
    let indent = match docstring {
        Some(doc) if doc.start_position().row > header_row => {
            let line = pysyntax::lines(source)[doc.start_position().row];
            pysyntax::leading_ws(line).to_string()
        }
        _ => header_indent(source, def) + &pysyntax::infer_indent_unit(source),
    };
    Ok(BodySlot {
        keep_end,
        body_end: body.end_byte().max(keep_end),
        indent,
    })
}

/// Candidate text as body statements: dedented, surrounding blank lines
/// removed. String literal interiors are left alone.
pub fn normalize_body(text: &str) -> String {
    let dedented = pysyntax::dedent(text.trim_end_matches([' ', '\t', '\n', '\r']));
    let lines: Vec<&str> = dedented.split('\n').collect();
    let first = lines.iter().position(|l| !l.trim().is_empty()).unwrap_or(lines.len());
    lines[first..].join("\n")
}

/// Replace the body in `slot` with `body`, re-indented.
pub fn splice_body(source: &str, slot: &BodySlot, body: &str) -> String {
    let indented = pysyntax::indent(&normalize_body(body), &slot.indent);
    let mut out = String::with_capacity(source.len() + indented.len());
    out.push_str(&source[..slot.keep_end]);
    out.push('\n');
    out.push_str(&indented);
    out.push_str(&source[slot.body_end..]);
    out
}

/// The statement to install in place of a body.
pub fn stub_statement(marker: &str) -> String {
    format!("raise NotImplementedError(\"{marker}\")")
}

/// Body statements of a function after its docstring, dedented.
pub fn function_body(source: &str, header_line: u32, name: &str) -> Option<String> {
    let slot = body_slot(source, header_line, name).ok()?;
    let text = &source[slot.keep_end..slot.body_end];
    let text = match text.find('\n') {
        Some(nl) if text[..nl].trim().is_empty() => &text[nl + 1..],
        _ => text.trim_start(),
    };
    Some(normalize_body(text))
}
