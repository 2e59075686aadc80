mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use tdgen_core::index::{
    build_index, build_index_cached, resolve_target, EntityKind, IndexError, TargetLocator, MODULE_SCOPE,
};
use tdgen_core::pysyntax;

use common::*;

#[test]
fn class_method_and_function_give_three_entities() {
    let dir = write_repo(&[(
        "m.py",
        "class A:\n    def f(self):\n        return 1\n\n\ndef g():\n    pass\n",
    )]);
    let idx = index(dir.path());
    let got: Vec<(EntityKind, &str, Option<&str>)> = idx
        .entities
        .iter()
        .map(|e| (e.kind, e.qualified_name.as_str(), e.enclosing_class.as_deref()))
        .collect();
    assert_eq!(
        got,
        vec![
            (EntityKind::Class, "m.A", None),
            (EntityKind::Method, "m.A.f", Some("m.A")),
            (EntityKind::Function, "m.g", None),
        ]
    );
}

#[test]
fn empty_directory_gives_empty_index() {
    let dir = tempfile::tempdir().unwrap();
    let idx = index(dir.path());
    assert!(idx.entities.is_empty());
    assert!(idx.imports.is_empty());
    assert!(idx.call_sites.is_empty());
}

#[test]
fn missing_root_is_fatal() {
    let err = build_index(std::path::Path::new("/definitely/not/here"), &include()).unwrap_err();
    assert!(matches!(err, IndexError::MissingRoot(_)));
}

#[test]
fn syntax_errors_are_skipped_not_fatal() {
    let dir = write_repo(&[("ok.py", "def a():\n    pass\n"), ("bad.py", "def b(:\n")]);
    let idx = index(dir.path());
    assert_eq!(idx.entities.len(), 1);
    assert_eq!(idx.skipped.len(), 1);
    assert_eq!(idx.skipped[0].file_path, "bad.py");
}

// Counts from a throwaway script walking each file's `ast` tree: ClassDef and
// (Async)FunctionDef nodes, module-scope imports including those nested in
// module-level if/try, and Call nodes.
#[test]
fn calcs_counts_match_parse_tree_walk() {
    let idx = index(&repo("calcs"));
    assert_eq!(idx.file_digests.len(), 6);
    assert_eq!(idx.entities.len(), 34);
    assert_eq!(idx.imports.len(), 15);
    assert_eq!(idx.call_sites.len(), 65);
}

#[test]
fn conditional_top_level_imports_are_recorded() {
    let idx = index(&repo("calcs"));
    let core: Vec<&str> = idx
        .imports
        .iter()
        .filter(|i| i.file_path == "calcs/core.py")
        .map(|i| i.statement_text.as_str())
        .collect();
    assert!(core.contains(&"from decimal import Decimal"), "{core:?}");
    assert!(!idx.imports.iter().any(|i| i.statement_text.contains("pstdev")));
}

#[test]
fn resolve_by_line_finds_log_loss() {
    let idx = index(&repo("skmini"));
    let loc = TargetLocator {
        file_path: "sklearn/neural_network/_base.py".into(),
        qualified_name: None,
        line: Some(180),
    };
    let e = resolve_target(&idx, &loc).unwrap();
    assert_eq!(e.name(), "log_loss");
    assert_eq!((e.span.start_line, e.span.end_line), (175, 191));
    assert!(e.signature.starts_with("def log_loss("));
    assert!(e
        .docstring
        .as_deref()
        .unwrap()
        .contains("Compute Logistic loss for classification."));
}

#[test]
fn resolve_missing_file_is_not_found() {
    let idx = index(&repo("calcs"));
    let loc = TargetLocator {
        file_path: "calcs/nope.py".into(),
        qualified_name: Some("x".into()),
        line: None,
    };
    assert!(matches!(resolve_target(&idx, &loc), Err(IndexError::TargetNotFound(_))));
}

#[test]
fn qualified_name_disambiguates_same_bare_name() {
    let idx = index(&repo("calcs"));
    let adds: Vec<&str> = idx
        .entities_in("calcs/core.py")
        .filter(|e| e.name() == "add")
        .map(|e| e.qualified_name.as_str())
        .collect();
    assert_eq!(adds, vec!["calcs.core.add", "calcs.core.Calculator.add"]);
    // the text scan agrees there are exactly two definitions
    assert_eq!(scan_definitions(&repo("calcs").join("calcs"), "def", "add").len(), 2);

    for (q, line, kind) in [
        ("calcs.core.add", 21, EntityKind::Function),
        ("calcs.core.Calculator.add", 49, EntityKind::Method),
        ("Calculator.add", 49, EntityKind::Method),
    ] {
        let loc = TargetLocator {
            file_path: "calcs/core.py".into(),
            qualified_name: Some(q.into()),
            line: None,
        };
        let e = resolve_target(&idx, &loc).unwrap();
        assert_eq!((e.header_line, e.kind), (line, kind), "{q}");
    }
}

#[test]
fn ambiguous_locator_lists_candidates() {
    let dir = write_repo(&[("m.py", "def f():\n    pass\n\n\ndef f():\n    return 2\n")]);
    let idx = index(dir.path());
    let loc = TargetLocator {
        file_path: "m.py".into(),
        qualified_name: Some("f".into()),
        line: None,
    };
    match resolve_target(&idx, &loc) {
        Err(IndexError::Ambiguous { candidates, .. }) => assert_eq!(candidates.len(), 2),
        other => panic!("expected ambiguity, got {other:?}"),
    }
}

#[test]
fn nested_functions_have_dotted_names() {
    let idx = index(&repo("calcs"));
    let e = idx.entity("calcs.core.Calculator.Memory.store").unwrap();
    assert_eq!(e.kind, EntityKind::Method);
    assert_eq!(e.enclosing_class.as_deref(), Some("calcs.core.Calculator.Memory"));
}

#[test]
fn decorated_span_starts_at_first_decorator() {
    let dir = write_repo(&[(
        "m.py",
        "import functools\n\n\n@functools.lru_cache()\n@staticmethod\ndef f(x):\n    return x\n",
    )]);
    let idx = index(dir.path());
    let e = idx.entity("m.f").unwrap();
    assert_eq!((e.span.start_line, e.header_line, e.span.end_line), (4, 6, 7));
    assert_eq!(e.signature, "def f(x):");
}

#[test]
fn call_sites_lie_inside_their_callers() {
    for name in ["calcs", "skmini", "moreit"] {
        let idx = index(&repo(name));
        for c in &idx.call_sites {
            if c.caller_entity == MODULE_SCOPE {
                continue;
            }
            let owner = idx
                .entities
                .iter()
                .find(|e| e.qualified_name == c.caller_entity && e.span.encloses(&c.span))
                .unwrap_or_else(|| panic!("{c:?} has no enclosing caller"));
            assert!(owner.is_callable() || owner.kind == EntityKind::Class);
        }
    }
}

#[test]
fn rebuild_is_idempotent() {
    for name in ["calcs", "skmini", "moreit"] {
        let a = index(&repo(name));
        let b = index(&repo(name));
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }
}

#[test]
fn span_fidelity_on_fixture_repos() {
    for name in ["calcs", "skmini", "moreit"] {
        let idx = index(&repo(name));
        for e in &idx.entities {
            assert_eq!(idx.span_text(&e.span).unwrap(), e.body_text, "{}", e.qualified_name);
        }
    }
}

#[test]
fn completeness_against_keyword_scan() {
    for name in ["calcs", "skmini", "moreit"] {
        let root = repo(name);
        let idx = index(&root);
        for file in walkdir(&root) {
            let text = std::fs::read_to_string(root.join(&file)).unwrap();
            let interior = pysyntax::string_interior_lines(&text);
            for (i, line) in text.lines().enumerate() {
                let t = line.trim_start();
                let t = t.strip_prefix("async ").unwrap_or(t);
                if !(t.starts_with("def ") || t.starts_with("class ")) || interior.contains(&i) {
                    continue;
                }
                let n = i as u32 + 1;
                assert!(
                    idx.entities_in(&file).any(|e| e.header_line == n),
                    "{file}:{n} `{t}` has no entity"
                );
            }
        }
    }
}

#[test]
fn cache_hit_is_byte_identical() {
    let cache = tempfile::tempdir().unwrap();
    let (fresh, hit) = build_index_cached(&repo("calcs"), &include(), cache.path()).unwrap();
    assert!(!hit);
    let (cached, hit) = build_index_cached(&repo("calcs"), &include(), cache.path()).unwrap();
    assert!(hit);
    assert_eq!(fresh.to_json(), cached.to_json());
    assert_eq!(cached.to_json(), index(&repo("calcs")).to_json());
}

#[test]
fn cache_misses_after_an_edit() {
    let dir = write_repo(&[("m.py", "def a():\n    pass\n")]);
    let cache = tempfile::tempdir().unwrap();
    build_index_cached(dir.path(), &include(), cache.path()).unwrap();
    std::fs::write(dir.path().join("m.py"), "def a():\n    pass\n\n\ndef b():\n    pass\n").unwrap();
    let (idx, hit) = build_index_cached(dir.path(), &include(), cache.path()).unwrap();
    assert!(!hit);
    assert_eq!(idx.entities.len(), 2);
}

#[test]
fn virtualenv_and_build_dirs_are_excluded() {
    let dir = write_repo(&[
        ("pkg/a.py", "def a():\n    pass\n"),
        (".venv/lib/x.py", "def hidden():\n    pass\n"),
        ("build/lib/y.py", "def hidden2():\n    pass\n"),
    ]);
    let idx = index(dir.path());
    let names: BTreeSet<&str> = idx.entities.iter().map(|e| e.name()).collect();
    assert_eq!(names, BTreeSet::from(["a"]));
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,6}".prop_filter("keyword", |s| {
        !matches!(
            s.as_str(),
            "if" | "in"
                | "is"
                | "as"
                | "or"
                | "and"
                | "def"
                | "del"
                | "for"
                | "not"
                | "try"
                | "else"
                | "elif"
                | "from"
                | "pass"
                | "with"
                | "class"
                | "while"
                | "raise"
                | "break"
                | "yield"
                | "async"
                | "await"
                | "global"
                | "import"
                | "lambda"
                | "return"
                | "assert"
                | "except"
                | "finally"
                | "continue"
                | "nonlocal"
        )
    })
}

#[derive(Debug, Clone)]
enum Item {
    Func(String, u8),
    Class(String, Vec<(String, u8)>),
}

fn item() -> impl Strategy<Value = Item> {
    prop_oneof![
        (ident(), 0u8..3).prop_map(|(n, k)| Item::Func(n, k)),
        (ident(), prop::collection::vec((ident(), 0u8..3), 0..3)).prop_map(|(n, ms)| Item::Class(n, ms)),
    ]
}

fn body(k: u8, indent: &str) -> String {
    match k {
        0 => format!("{indent}return 1\n"),
        1 => format!("{indent}\"\"\"Doc.\"\"\"\n{indent}x = [\n{indent}    1,\n{indent}]\n{indent}return x\n"),
        _ => format!("{indent}if True:\n{indent}    pass\n{indent}return None\n"),
    }
}

fn render(items: &[Item]) -> String {
    let mut out = String::from("import os\n\n");
    for it in items {
        match it {
            Item::Func(n, k) => out.push_str(&format!("def {n}(a, b=2):\n{}\n\n", body(*k, "    "))),
            Item::Class(n, ms) => {
                out.push_str(&format!("class {n}(object):\n    \"\"\"C.\"\"\"\n"));
                for (m, k) in ms {
                    out.push_str(&format!("\n    def {m}(self):\n{}", body(*k, "        ")));
                }
                out.push_str("\n\n");
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_modules_are_indexed_completely(items in prop::collection::vec(item(), 0..6)) {
        let src = render(&items);
        let dir = write_repo(&[("gen.py", &src)]);
        let idx = index(dir.path());
        let expected: usize = items.iter().map(|i| match i {
            Item::Func(..) => 1,
            Item::Class(_, ms) => 1 + ms.len(),
        }).sum();
        prop_assert_eq!(idx.entities.len(), expected);
        for e in &idx.entities {
            prop_assert_eq!(&idx.span_text(&e.span).unwrap(), &e.body_text);
            prop_assert_eq!(e.kind == EntityKind::Method, e.enclosing_class.is_some());
        }
        prop_assert_eq!(index(dir.path()), idx);
    }
}
