#![allow(dead_code)]

pub mod splice;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use tdgen_core::eval::{load_manifests, TaskManifest};
use tdgen_core::harness::{FrameRef, Outcome, ProbeMode, ProbeReport, ProbeTarget, TestCaseRecord};
use tdgen_core::index::{build_index, RepoIndex, DEFAULT_INCLUDE};
use tdgen_core::llm::{ProviderConfig, ScriptedProvider};
use tdgen_core::orchestrator::{run_task, Event, RunConfig, TaskOutcome};
use tempfile::TempDir;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn repo(name: &str) -> PathBuf {
    fixtures().join("repos").join(name)
}

pub fn golden(name: &str) -> PathBuf {
    fixtures().join("golden").join(name)
}

pub fn bench_manifest() -> PathBuf {
    fixtures().join("bench/manifest.json")
}

pub fn replay(task_id: &str) -> PathBuf {
    fixtures().join("replays").join(format!("{task_id}.json"))
}

pub fn plugin() -> PathBuf {
    fixtures().join("plugins/tdgen_probe.py")
}

pub fn bench() -> Vec<TaskManifest> {
    load_manifests(&bench_manifest()).expect("bench manifest loads")
}

pub fn task(id: &str) -> TaskManifest {
    bench().into_iter().find(|t| t.task_id == id).expect("task in bench")
}

pub fn include() -> Vec<String> {
    vec![DEFAULT_INCLUDE.to_string()]
}

pub fn index(root: &Path) -> RepoIndex {
    build_index(root, &include()).expect("index builds")
}

/// Write `files` into a fresh directory.
pub fn write_repo(files: &[(&str, &str)]) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (rel, text) in files {
        let p = dir.path().join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, text).unwrap();
    }
    dir
}

pub fn scripted(task_id: &str) -> RunConfig {
    RunConfig::new(ProviderConfig::scripted(replay(task_id)))
}

pub fn run_scripted(task: &TaskManifest, cfg: &RunConfig) -> TaskOutcome {
    let mut provider = ScriptedProvider::load(&replay(&task.task_id)).expect("replay loads");
    run_task(task, cfg, &mut provider, None)
}

/// Concatenated text of every prompt event before the first candidate.
pub fn pre_generation_prompts(events: &[&Event]) -> String {
    let mut out = String::new();
    for e in events {
        match e {
            Event::Candidate { .. } => break,
            Event::Prompt { content, .. } => out.push_str(content),
            Event::ToolResult { payload, .. } => out.push_str(payload),
            _ => {}
        }
    }
    out
}

pub fn all_prompt_text(events: &[&Event]) -> String {
    let mut out = String::new();
    for e in events {
        match e {
            Event::Prompt { content, .. } => out.push_str(content),
            Event::ToolResult { payload, .. } => out.push_str(payload),
            _ => {}
        }
    }
    out
}

// ---- probe report builders -------------------------------------------------

pub fn target() -> ProbeTarget {
    ProbeTarget {
        file_path: "pkg/mod.py".into(),
        qualified_name: "pkg.mod.target".into(),
        start_line: 10,
        end_line: 20,
    }
}

/// A stub-failure record reached through `depth` edges, the last via `caller`.
pub fn failing(node_id: &str, caller: &str, depth: u32) -> TestCaseRecord {
    let mut chain = vec![FrameRef {
        file_path: "tests/test_mod.py".into(),
        function_name: node_id.rsplit("::").next().unwrap().to_string(),
        line: 5,
    }];
    for i in 1..depth {
        chain.push(FrameRef {
            file_path: "pkg/other.py".into(),
            function_name: format!("pkg.other.f{i}"),
            line: 30 + i,
        });
    }
    chain.push(FrameRef {
        file_path: "pkg/mod.py".into(),
        function_name: "pkg.mod.target".into(),
        line: 12,
    });
    TestCaseRecord {
        node_id: node_id.into(),
        outcome: Outcome::StubFailure,
        call_chain: chain,
        direct_caller: Some(caller.into()),
        chain_depth: depth,
        covered_lines: vec![],
        assertion_bearing: true,
        cyclomatic_complexity: 1,
        annotation: None,
    }
}

pub fn passing(node_id: &str) -> TestCaseRecord {
    TestCaseRecord {
        node_id: node_id.into(),
        outcome: Outcome::Passed,
        call_chain: vec![],
        direct_caller: None,
        chain_depth: 0,
        covered_lines: vec![],
        assertion_bearing: true,
        cyclomatic_complexity: 1,
        annotation: None,
    }
}

pub fn report(records: Vec<TestCaseRecord>) -> ProbeReport {
    let r = ProbeReport {
        schema_version: 1,
        mode: ProbeMode::Stub,
        target: target(),
        records,
        suite_runtime_s: 0.5,
        runner_version: "pytest 0".into(),
    };
    r.validate().expect("builder produces valid reports");
    r
}

// ---- independent oracles ---------------------------------------------------

/// Group stub failures by caller with a plain map; clusters sorted by
/// (smallest depth, caller), members by (depth, node id).
pub fn group_by_caller(report: &ProbeReport) -> Vec<(String, Vec<(u32, String)>)> {
    let mut m: BTreeMap<String, Vec<(u32, String)>> = BTreeMap::new();
    for r in &report.records {
        if r.outcome == Outcome::StubFailure {
            let caller = r.direct_caller.clone().unwrap();
            m.entry(caller).or_default().push((r.chain_depth, r.node_id.clone()));
        }
    }
    let mut v: Vec<(String, Vec<(u32, String)>)> = m
        .into_iter()
        .map(|(c, mut ms)| {
            ms.sort();
            (c, ms)
        })
        .collect();
    v.sort_by(|a, b| (a.1[0].0, &a.0).cmp(&(b.1[0].0, &b.0)));
    v
}

/// THM by the stated rules: heads of the first T clusters; when clusters run
/// out, keep taking the globally shortest remaining chains.
pub fn thm_oracle(report: &ProbeReport, t: Option<usize>) -> Vec<String> {
    let clusters = group_by_caller(report);
    let mut all: Vec<(u32, String)> = clusters.iter().flat_map(|c| c.1.iter().cloned()).collect();
    all.sort();
    let Some(t) = t else {
        let mut ids: Vec<String> = all.into_iter().map(|x| x.1).collect();
        ids.sort();
        return ids;
    };
    let mut chosen: Vec<String> = Vec::new();
    for c in clusters.iter().take(t) {
        chosen.push(c.1[0].1.clone());
    }
    for (_, id) in all {
        if chosen.len() >= t {
            break;
        }
        if !chosen.contains(&id) {
            chosen.push(id);
        }
    }
    chosen
}

/// Okapi BM25 straight from the formula, one document at a time.
pub fn bm25_oracle(docs: &[Vec<String>], query: &[String], k1: f64, b: f64) -> Vec<f64> {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    docs.iter()
        .map(|d| {
            let mut s = 0.0;
            for q in query {
                let df = docs.iter().filter(|x| x.contains(q)).count() as f64;
                let idf = ((n - df + 0.5) / (df + 0.5)).ln().max(0.0);
                let tf = d.iter().filter(|w| *w == q).count() as f64;
                if tf > 0.0 {
                    s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avgdl));
                }
            }
            s
        })
        .collect()
}

/// Lines `def NAME` / `class NAME` found by a plain text scan.
pub fn scan_definitions(root: &Path, keyword: &str, name: &str) -> BTreeSet<(String, u32)> {
    let mut out = BTreeSet::new();
    let needle = format!("{keyword} {name}");
    for entry in walkdir(root) {
        let text = std::fs::read_to_string(root.join(&entry)).unwrap();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim_start();
            let t = t.strip_prefix("async ").unwrap_or(t);
            if let Some(rest) = t.strip_prefix(&needle) {
                if rest.starts_with('(') || rest.starts_with(':') {
                    out.insert((entry.clone(), i as u32 + 1));
                }
            }
        }
    }
    out
}

/// Repo-relative `.py` files, sorted.
pub fn walkdir(root: &Path) -> Vec<String> {
    fn rec(root: &Path, dir: &Path, out: &mut Vec<String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().flatten().collect();
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            let name = e.file_name().to_string_lossy().to_string();
            if p.is_dir() {
                if name != "__pycache__" && !name.starts_with('.') {
                    rec(root, &p, out);
                }
            } else if name.ends_with(".py") {
                out.push(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    let mut out = Vec::new();
    rec(root, root, &mut out);
    out
}

/// Snapshot of every file under `root` (including caches) for tree diffs.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn rec(dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                rec(&p, out);
            } else {
                out.insert(p.clone(), std::fs::read(&p).unwrap_or_default());
            }
        }
    }
    let mut out = BTreeMap::new();
    rec(root, &mut out);
    out
}
