use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn here() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn shared() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn manifest() -> PathBuf {
    shared().join("bench/manifest.json")
}

fn tdgen<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_tdgen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", stderr(&o));
    o
}

/// The error line, checked for shape, as (code, message).
fn error_line(o: &Output) -> (String, String) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    let rest = lines[0].strip_prefix("tdgen-error code=").expect("error prefix");
    let (code, msg) = rest.split_once(" message=").expect("message field");
    assert!(code.chars().all(|c| c.is_ascii_uppercase() || c == '_'), "{code}");
    let msg: String = serde_json::from_str(msg).expect("message is a JSON string");
    (code.to_string(), msg)
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn events(jsonl: &str) -> Vec<Value> {
    jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn stub_failures(golden: &str) -> Vec<String> {
    let r: Value = serde_json::from_str(&read(&shared().join("golden").join(golden))).unwrap();
    r["records"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["outcome"] == "stub_failure")
        .map(|r| r["node_id"].as_str().unwrap().to_string())
        .collect()
}

// report

#[test]
fn report_reproduces_golden_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (table, csv) = (dir.path().join("out/table.txt"), dir.path().join("out/report.csv"));
    let o = ok(tdgen([
        "report".as_ref(),
        here().join("metrics.json").as_os_str(),
        "--table".as_ref(),
        table.as_os_str(),
        "--csv".as_ref(),
        csv.as_os_str(),
    ]));
    let golden = read(&here().join("metrics.table.txt"));
    assert_eq!(stdout(&o), golden);
    assert_eq!(read(&table), golden);
    assert_eq!(read(&csv), read(&here().join("metrics.csv")));
}

#[test]
fn report_overlap_partitions_solved_tasks() {
    let o = ok(tdgen([
        "report".as_ref(),
        here().join("metrics.json").as_os_str(),
        here().join("other.json").as_os_str(),
        "--overlap".as_ref(),
    ]));
    let out = stdout(&o);
    let tail: Vec<&str> = out
        .lines()
        .rev()
        .take(3)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    assert_eq!(
        tail,
        [
            "{golden}: 1 task(s): t-alpha",
            "{golden, other}: 1 task(s): t-beta",
            "{other}: 1 task(s): t-gamma",
        ]
    );
}

#[test]
fn report_rejects_inconsistent_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let mut r: Value = serde_json::from_str(&read(&here().join("metrics.json"))).unwrap();
    r["aggregates"]["pass_at_1"] = Value::from(0.75);
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r.to_string()).unwrap();
    let o = tdgen(["report".as_ref(), p.as_os_str()]);
    let (code, msg) = error_line(&o);
    assert_eq!(code, "REPORT");
    assert!(msg.contains("golden"), "{msg}");
    assert!(stdout(&o).is_empty());
}

// errors

#[test]
fn fatal_errors_are_one_parsable_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let (code, msg) = error_line(&tdgen(["report".as_ref(), missing.as_os_str()]));
    assert_eq!(code, "IO");
    assert!(msg.contains("nope.json"));

    let (code, _) = error_line(&tdgen([
        "generate".as_ref(),
        "--manifest".as_ref(),
        manifest().as_os_str(),
        "--task".as_ref(),
        "no-such-task".as_ref(),
        "--replay".as_ref(),
        "x.json".as_ref(),
        "--out-dir".as_ref(),
        dir.path().as_os_str(),
    ]));
    assert_eq!(code, "MANIFEST");

    let (code, msg) = error_line(&tdgen([
        "generate".as_ref(),
        "--manifest".as_ref(),
        manifest().as_os_str(),
        "--task".as_ref(),
        "skmini-log_loss".as_ref(),
        "--out-dir".as_ref(),
        dir.path().as_os_str(),
    ]));
    assert_eq!((code.as_str(), msg.as_str()), ("USAGE", "give --config or --replay"));

    let report = shared().join("golden/log_loss.stub.json");
    let (code, _) = error_line(&tdgen([
        "select-tests".as_ref(),
        "--report".as_ref(),
        report.as_os_str(),
        "--strategy".as_ref(),
        "XYZ".as_ref(),
    ]));
    assert_eq!(code, "USAGE");
}

#[test]
fn help_lists_every_subcommand() {
    let out = stdout(&ok(tdgen(["--help"])));
    for sub in [
        "index",
        "probe",
        "select-tests",
        "generate",
        "evaluate",
        "tools",
        "report",
    ] {
        assert!(out.contains(sub), "{sub}");
    }
}

// generate

#[test]
fn generate_notest_trajectory_has_no_test_text() {
    let dir = tempfile::tempdir().unwrap();
    let id = "skmini-log_loss";
    let replay = shared().join(format!("replays/{id}.json"));
    let o = ok(tdgen([
        "generate".as_ref(),
        "--manifest".as_ref(),
        manifest().as_os_str(),
        "--task".as_ref(),
        id.as_ref(),
        "--replay".as_ref(),
        replay.as_os_str(),
        "--policy".as_ref(),
        "NoTest".as_ref(),
        "--out-dir".as_ref(),
        dir.path().as_os_str(),
    ]));
    assert!(stdout(&o).starts_with(&format!("{id} verdict=")));

    let ev = events(&read(&dir.path().join("trajectory.jsonl")));
    let start = ev.iter().find(|e| e["kind"] == "start").unwrap();
    assert_eq!(start["effective_policy"], "NoTest");
    assert_eq!(start["selected_tests"], Value::Array(vec![]));
    assert!(!ev.iter().any(|e| e["kind"] == "rrw_phase"));
    assert!(!ev.iter().any(|e| e["kind"] == "validation" && e["scope"] == "selected"));

    let mut seen = String::new();
    for e in &ev {
        for field in ["content", "payload"] {
            if let Some(s) = e[field].as_str() {
                seen.push_str(s);
            }
        }
    }
    assert!(!seen.is_empty());
    let ids = stub_failures("log_loss.stub.json");
    assert_eq!(ids.len(), 3);
    for id in &ids {
        let name = id.rsplit("::").next().unwrap();
        assert!(!seen.contains(id.as_str()) && !seen.contains(name), "`{id}` leaked");
    }
    assert!(!seen.contains("## Test Information"));
    assert!(!seen.contains("search_test_cases") && !seen.contains("run_pdb_cmd"));
    let plan: Value = serde_json::from_str(&read(&dir.path().join("plan.json"))).unwrap();
    assert_eq!(plan["chosen"], Value::Array(vec![]));
}

#[test]
fn generate_default_policy_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let id = "skmini-feature_names_out";
    let replay = shared().join(format!("replays/{id}.json"));
    let o = ok(tdgen([
        "generate".as_ref(),
        "--manifest".as_ref(),
        manifest().as_os_str(),
        "--task".as_ref(),
        id.as_ref(),
        "--replay".as_ref(),
        replay.as_os_str(),
        "--out-dir".as_ref(),
        dir.path().as_os_str(),
    ]));
    let line = stdout(&o);
    assert!(
        line.starts_with(&format!("{id} verdict=pass rounds_to_pass=1 ")),
        "{line}"
    );
    for name in ["trajectory.jsonl", "patch.diff", "plan.json", "probe.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    assert!(read(&dir.path().join("patch.diff")).contains("sklearn/pipeline.py"));
}

// evaluate

fn grid_file(dir: &Path) -> PathBuf {
    let grid = serde_json::json!({
        "base": {"provider": {"kind": "scripted", "replay_path": shared().join("replays")}},
        "strategies": ["THM", "RS"],
        "t": [1, 3],
    });
    let p = dir.join("grid.json");
    std::fs::write(&p, grid.to_string()).unwrap();
    p
}

#[test]
fn evaluate_dry_run_prints_grid_without_running() {
    let dir = tempfile::tempdir().unwrap();
    let grid = grid_file(dir.path());
    let run_dir = dir.path().join("runs");
    let o = ok(tdgen([
        "evaluate".as_ref(),
        "--manifest".as_ref(),
        manifest().as_os_str(),
        "--config".as_ref(),
        grid.as_os_str(),
        "--run-dir".as_ref(),
        run_dir.as_os_str(),
        "--dry-run".as_ref(),
    ]));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4, "{out}");
    let mut digests: Vec<&str> = lines.iter().map(|l| l.split(' ').next().unwrap()).collect();
    for (l, (s, t)) in lines.iter().zip([("THM", 1), ("THM", 3), ("RS", 1), ("RS", 3)]) {
        assert!(l.contains(&format!(" strategy={s} T={t} ")), "{l}");
        assert!(l.ends_with(" tasks=4"), "{l}");
    }
    digests.sort();
    digests.dedup();
    assert_eq!(digests.len(), 4);
    assert!(!run_dir.exists());
}

#[test]
fn evaluate_runs_one_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({"provider": {"kind": "scripted", "replay_path": shared().join("replays")}});
    let p = dir.path().join("config.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    let run_dir = dir.path().join("runs");
    let o = ok(tdgen([
        "evaluate".as_ref(),
        "--manifest".as_ref(),
        manifest().as_os_str(),
        "--config".as_ref(),
        p.as_os_str(),
        "--run-dir".as_ref(),
        run_dir.as_os_str(),
    ]));
    let out = stdout(&o);
    let row = out.lines().nth(1).unwrap();
    assert!(row.contains(" 0.5000 ") && row.contains(" 2/4 "), "{row}");
    assert!(run_dir.join("summary.txt").is_file());
}

// tools

#[test]
fn tools_print_json_hits() {
    let o = ok(tdgen([
        "tools".as_ref(),
        "--manifest".as_ref(),
        manifest().as_os_str(),
        "--task".as_ref(),
        "skmini-feature_names_out".as_ref(),
        "search_method_in_class".as_ref(),
        "_add_prefix_for_feature_names_out".as_ref(),
        "FeatureUnion".as_ref(),
    ]));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["kind"], "hits");
    let hits = v["data"].as_array().unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(
        hits[0]["entity"]["qualified_name"],
        "sklearn.pipeline.FeatureUnion._add_prefix_for_feature_names_out"
    );
    assert_eq!(hits[0]["span"]["file_path"], "sklearn/pipeline.py");
    assert_eq!(hits[0]["span"]["start_line"], 105);
}

#[test]
fn tools_reject_bad_arguments() {
    let base: Vec<OsString> = vec![
        "tools".into(),
        "--manifest".into(),
        manifest().into(),
        "--task".into(),
        "calcs-percent_change".into(),
    ];
    let (code, msg) = error_line(&tdgen(
        base.iter()
            .cloned()
            .chain(["search_method_in_class".into(), "x".into()]),
    ));
    assert_eq!(code, "USAGE");
    assert_eq!(
        msg,
        "search_method_in_class(method_name: str, class_name: str) takes 2 argument(s), got 1"
    );
    let (code, msg) = error_line(&tdgen(base.iter().cloned().chain([
        "get_code_around_line".into(),
        "calcs/core.py".into(),
        "ten".into(),
        "5".into(),
    ])));
    assert_eq!(code, "USAGE");
    assert!(msg.contains("must be an integer"), "{msg}");
    let (code, _) = error_line(&tdgen(base.iter().cloned().chain(["search_everything".into()])));
    assert_eq!(code, "USAGE");
}

// select-tests

#[test]
fn select_tests_writes_plan_with_rationale() {
    let dir = tempfile::tempdir().unwrap();
    let report = shared().join("golden/log_loss.stub.json");
    let plan = dir.path().join("plan.json");
    let o = ok(tdgen([
        "select-tests".as_ref(),
        "--report".as_ref(),
        report.as_os_str(),
        "--strategy".as_ref(),
        "THM".as_ref(),
        "--t".as_ref(),
        "3".as_ref(),
        "--out".as_ref(),
        plan.as_os_str(),
    ]));
    let names: Vec<String> = stdout(&o)
        .lines()
        .map(|l| l.rsplit("::").next().unwrap().to_string())
        .collect();
    assert_eq!(
        names,
        [
            "test_log_loss_1_prob_finite",
            "test_partial_fit_classification",
            "test_partial_fit_unseen_classes"
        ]
    );
    let v: Value = serde_json::from_str(&read(&plan)).unwrap();
    assert_eq!(v["chosen"].as_array().unwrap().len(), 3);
    assert_eq!(v["rationale"].as_array().unwrap().len(), 3);

    let again = ok(tdgen([
        "select-tests".as_ref(),
        "--report".as_ref(),
        report.as_os_str(),
        "--strategy".as_ref(),
        "THM".as_ref(),
        "--t".as_ref(),
        "3".as_ref(),
    ]));
    let inline: Value = serde_json::from_str(&stdout(&again)).unwrap();
    assert_eq!(inline, v);
}

// index

#[test]
fn index_writes_entities() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("index.json");
    let repo = shared().join("repos/calcs");
    let o = ok(tdgen([
        "index".as_ref(),
        "--repo".as_ref(),
        repo.as_os_str(),
        "--out".as_ref(),
        out.as_os_str(),
    ]));
    assert!(stdout(&o).starts_with("indexed "));
    let text = read(&out);
    assert!(text.contains("percent_change"));
    serde_json::from_str::<Value>(&text).unwrap();
}

// probe

#[test]
fn probe_matches_golden_stub_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("probe.json");
    let plugin = shared().join("plugins/tdgen_probe.py");
    let o = ok(tdgen([
        "probe".as_ref(),
        "--manifest".as_ref(),
        manifest().as_os_str(),
        "--task".as_ref(),
        "calcs-percent_change".as_ref(),
        "--plugin".as_ref(),
        plugin.as_os_str(),
        "--out".as_ref(),
        out.as_os_str(),
    ]));
    let live: Value = serde_json::from_str(&read(&out)).unwrap();
    let golden: Value = serde_json::from_str(&read(&shared().join("golden/percent_change.stub.json"))).unwrap();
    let strip = |v: &Value| -> Vec<(String, String)> {
        v["records"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| {
                (
                    r["node_id"].as_str().unwrap().to_string(),
                    r["outcome"].as_str().unwrap().to_string(),
                )
            })
            .collect()
    };
    assert_eq!(strip(&live), strip(&golden));
    assert_eq!(live["mode"], "stub");
    let failing = stub_failures("percent_change.stub.json").len();
    assert!(stdout(&o).ends_with(&format!(", {failing} stub failure(s)\n")));
}

#[test]
fn probe_rejects_unknown_mode() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = error_line(&tdgen([
        "probe".as_ref(),
        "--repo".as_ref(),
        shared().join("repos/calcs").as_os_str(),
        "--file".as_ref(),
        "calcs/core.py".as_ref(),
        "--qualname".as_ref(),
        "calcs.core.percent_change".as_ref(),
        "--plugin".as_ref(),
        shared().join("plugins/tdgen_probe.py").as_os_str(),
        "--out".as_ref(),
        dir.path().join("p.json").as_os_str(),
        "--mode".as_ref(),
        "trace".as_ref(),
    ]));
    assert_eq!(code, "USAGE");
}
