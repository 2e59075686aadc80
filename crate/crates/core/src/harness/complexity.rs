//! Static features of test functions: cyclomatic complexity and whether
//! the test checks anything.

use tree_sitter::Node;

use super::HarnessError;
use crate::pysyntax;

fn parse_checked(source: &str) -> Result<tree_sitter::Tree, HarnessError> {
    let tree = pysyntax::parse(source);
    if let Some((line, what)) = pysyntax::first_error(&tree) {
        return Err(HarnessError::Analysis(format!("line {line}: {what}")));
    }
    Ok(tree)
}

fn walk(node: Node, visit: &mut impl FnMut(Node)) {
    visit(node);
    let mut cursor = node.walk();
    for child in node.children(&mut cursor) {
        walk(child, visit);
    }
}

/// 1 plus one per `if`, `elif`, loop, `except` clause, `and`/`or`
/// operator, conditional expression and comprehension filter.
pub fn cyclomatic_complexity(source: &str) -> Result<u32, HarnessError> {
    let dedented = pysyntax::dedent(source);
    let tree = parse_checked(&dedented)?;
    let mut cc = 1;
    walk(tree.root_node(), &mut |n| {
        if matches!(
            n.kind(),
            "if_statement"
                | "elif_clause"
                | "for_statement"
                | "while_statement"
                | "except_clause"
                | "except_group_clause"
                | "boolean_operator"
                | "conditional_expression"
                | "if_clause"
        ) {
            cc += 1;
        }
    });
    Ok(cc)
}

fn is_self_check(call: Node, source: &str) -> bool {
    let Some(func) = call.child_by_field_name("function") else {
        return false;
    };
    if func.kind() != "attribute" {
        return false;
    }
    let object = func.child_by_field_name("object");
    let attr = func.child_by_field_name("attribute");
    match (object, attr) {
        (Some(o), Some(a)) => {
            let name = pysyntax::text(a, source);
            o.kind() == "identifier"
                && pysyntax::text(o, source) == "self"
                && (name.starts_with("assert") || name == "fail")
        }
        _ => false,
    }
}

fn is_raises_context(item: Node, source: &str) -> bool {
    let mut found = false;
    walk(item, &mut |n| {
        if n.kind() != "call" {
            return;
        }
        let Some(func) = n.child_by_field_name("function") else {
            return;
        };
        let name = match func.kind() {
            "identifier" => pysyntax::text(func, source),
            "attribute" => func
                .child_by_field_name("attribute")
                .map_or("", |a| pysyntax::text(a, source)),
            _ => "",
        };
        if name == "raises" {
            found = true;
        }
    });
    found
}

/// True when the test contains an `assert` or `raise` statement, a
/// `with ... raises(...)` block, or a `self.assert*` / `self.fail` call.
pub fn detect_failure_revealing(source: &str) -> Result<bool, HarnessError> {
    let dedented = pysyntax::dedent(source);
    let tree = parse_checked(&dedented)?;
    let src = dedented.as_str();
    let mut found = false;
    walk(tree.root_node(), &mut |n| match n.kind() {
        "assert_statement" | "raise_statement" => found = true,
        "with_item" if is_raises_context(n, src) => found = true,
        "call" if is_self_check(n, src) => found = true,
        _ => {}
    });
    Ok(found)
}
