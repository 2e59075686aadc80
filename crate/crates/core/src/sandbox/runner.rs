//! Running pytest in a workspace and reading back per-test outcomes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use quick_xml::events::Event;
use quick_xml::Reader;
use regex::Regex;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::SandboxError;

pub const DEFAULT_OUTPUT_TAIL: usize = 20_000;
pub const DEFAULT_TEST_TIMEOUT_S: u64 = 300;
pub const DEFAULT_EVAL_TIMEOUT_S: u64 = 1800;

/// How to invoke the test runner inside a workspace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestEnv {
    #[serde(default = "default_command")]
    pub command: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

fn default_command() -> Vec<String> {
    vec!["python3".into(), "-m".into(), "pytest".into()]
}

impl Default for TestEnv {
    fn default() -> Self {
        TestEnv {
            command: default_command(),
            env: BTreeMap::new(),
        }
    }
}

impl TestEnv {
    pub(crate) fn command_in(&self, dir: &Path) -> Result<Command, SandboxError> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| SandboxError::Infrastructure("empty test command".into()))?;
        let mut cmd = Command::new(program);
        cmd.args(args)
            .current_dir(dir)
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONHASHSEED", "0")
            .envs(&self.env);
        Ok(cmd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    Passed,
    Failed,
    Error,
    Skipped,
}

impl TestStatus {
    fn severity(self) -> u8 {
        match self {
            TestStatus::Passed => 0,
            TestStatus::Skipped => 1,
            TestStatus::Failed => 2,
            TestStatus::Error => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRunResult {
    pub per_test: BTreeMap<String, TestStatus>,
    pub raw_output_tail: String,
    pub duration_s: f64,
    #[serde(default)]
    pub timed_out: bool,
}

impl TestRunResult {
    pub fn all_passed(&self) -> bool {
        !self.per_test.is_empty() && self.per_test.values().all(|s| *s == TestStatus::Passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.per_test
            .iter()
            .filter(|(_, s)| **s != TestStatus::Passed)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// pytest's JUnit naming for a node id: the path becomes a dotted
/// classname prefix and the last `::` part is the test name.
pub fn junit_key(node_id: &str) -> (String, String) {
    let (path, bracket, params) = match node_id.find('[') {
        Some(i) => (&node_id[..i], "[", &node_id[i + 1..]),
        None => (node_id, "", ""),
    };
    let mut names: Vec<String> = path.split("::").map(str::to_string).collect();
    let first = names[0].replace('/', ".");
    names[0] = first.strip_suffix(".py").unwrap_or(&first).to_string();
    if let Some(last) = names.last_mut() {
        last.push_str(bracket);
        last.push_str(params);
    }
    let name = names.pop().unwrap_or_default();
    (names.join("."), name)
}

/// Outcome per (classname, name) in a JUnit XML report; a testcase that
/// appears twice keeps its worst outcome.
pub fn parse_junit(xml: &str) -> Result<BTreeMap<(String, String), TestStatus>, String> {
    let mut reader = Reader::from_str(xml);
    let mut out: BTreeMap<(String, String), TestStatus> = BTreeMap::new();
    let mut current: Option<((String, String), TestStatus)> = None;
    let attr = |e: &quick_xml::events::BytesStart, key: &[u8]| -> Result<String, String> {
        for a in e.attributes() {
            let a = a.map_err(|e| e.to_string())?;
            if a.key.as_ref() == key {
                return a.unescape_value().map(|v| v.into_owned()).map_err(|e| e.to_string());
            }
        }
        Ok(String::new())
    };
    let mut finish = |case: Option<((String, String), TestStatus)>| {
        if let Some((key, status)) = case {
            let entry = out.entry(key).or_insert(status);
            if status.severity() > entry.severity() {
                *entry = status;
            }
        }
    };
    loop {
        match reader.read_event().map_err(|e| e.to_string())? {
            Event::Start(e) | Event::Empty(e) if e.name().as_ref() == b"testcase" => {
                finish(current.take());
                let key = (attr(&e, b"classname")?, attr(&e, b"name")?);
                current = Some((key, TestStatus::Passed));
            }
            Event::Start(e) | Event::Empty(e) => {
                if let Some((_, status)) = current.as_mut() {
                    let found = match e.name().as_ref() {
                        b"failure" => Some(TestStatus::Failed),
                        b"error" => Some(TestStatus::Error),
                        b"skipped" => Some(TestStatus::Skipped),
                        _ => None,
                    };
                    if let Some(found) = found {
                        if found.severity() > status.severity() {
                            *status = found;
                        }
                    }
                }
            }
            Event::End(e) if e.name().as_ref() == b"testcase" => finish(current.take()),
            Event::Eof => break,
            _ => {}
        }
    }
    finish(current.take());
    Ok(out)
}

/// Replace run-specific details (workspace path, timings, addresses) so
/// captured output is stable across runs.
pub fn sanitize_output(text: &str, work_root: &Path) -> String {
    static DURATION: OnceLock<Regex> = OnceLock::new();
    static ADDRESS: OnceLock<Regex> = OnceLock::new();
    let mut s = text.to_string();
    for root in [work_root.to_path_buf(), work_root.canonicalize().unwrap_or_default()] {
        let r = root.to_string_lossy();
        if !r.is_empty() {
            s = s.replace(r.as_ref(), "<workspace>");
        }
    }
    let duration = DURATION.get_or_init(|| Regex::new(r"\bin \d+(\.\d+)?s\b( \(\d+:\d\d:\d\d\))?").unwrap());
    let address = ADDRESS.get_or_init(|| Regex::new(r"0x[0-9a-fA-F]{6,}").unwrap());
    let s = duration.replace_all(&s, "in <duration>");
    address.replace_all(&s, "0x?").into_owned()
}

/// Last `limit` characters of `text`.
pub fn tail(text: &str, limit: usize) -> String {
    let count = text.chars().count();
    if count <= limit {
        return text.to_string();
    }
    text.chars().skip(count - limit).collect()
}

pub(crate) struct Captured {
    pub output: String,
    pub status: Option<i32>,
    pub timed_out: bool,
    pub duration_s: f64,
}

/// Run `cmd` with stdout and stderr sent to `log_path`, killing it after
/// `timeout`.
pub(crate) fn run_captured(mut cmd: Command, log_path: &Path, timeout: Duration) -> Result<Captured, SandboxError> {
    let io = |e: std::io::Error| SandboxError::Infrastructure(format!("{}: {e}", log_path.display()));
    if let Some(parent) = log_path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let log = File::create(log_path).map_err(io)?;
    let log_err = log.try_clone().map_err(io)?;
    let started = Instant::now();
    let mut child = cmd
        .stdin(Stdio::null())
        .stdout(Stdio::from(log))
        .stderr(Stdio::from(log_err))
        .spawn()
        .map_err(|e| SandboxError::Infrastructure(format!("cannot start test runner: {e}")))?;
    let (status, timed_out) = match child.wait_timeout(timeout).map_err(io)? {
        Some(status) => (status.code(), false),
        None => {
            let _ = child.kill();
            let _ = child.wait();
            (None, true)
        }
    };
    let duration_s = started.elapsed().as_secs_f64();
    let output = String::from_utf8_lossy(&fs::read(log_path).map_err(io)?).into_owned();
    Ok(Captured {
        output,
        status,
        timed_out,
        duration_s,
    })
}

/// Run exactly `node_ids` in `work_root`.
pub fn run_tests(
    env: &TestEnv,
    work_root: &Path,
    node_ids: &[String],
    timeout: Duration,
    tail_limit: usize,
) -> Result<TestRunResult, SandboxError> {
    if node_ids.is_empty() {
        return Err(SandboxError::Infrastructure("no tests requested".into()));
    }
    let scratch = work_root.join(super::SCRATCH_DIR);
    let junit = scratch.join("junit.xml");
    let _ = fs::remove_file(&junit);
    let mut cmd = env.command_in(work_root)?;
    cmd.args(node_ids)
        .args([
            "-p",
            "no:cacheprovider",
            "-q",
            "-o",
            "junit_family=xunit1",
            "--junitxml",
        ])
        .arg(&junit);
    let cap = run_captured(cmd, &scratch.join("run.log"), timeout)?;
    let mut output = sanitize_output(&cap.output, work_root);
    if cap.timed_out {
        output.push_str(&format!("\n[timed out after {}s]\n", timeout.as_secs()));
    }
    let reported = match fs::read_to_string(&junit) {
        Ok(xml) => parse_junit(&xml).map_err(|e| SandboxError::Infrastructure(format!("bad JUnit report: {e}")))?,
        Err(_) => BTreeMap::new(),
    };
    let _ = fs::remove_file(&junit);
    if reported.is_empty() && !cap.timed_out && cap.status != Some(0) {
        return Err(SandboxError::Infrastructure(format!(
            "test runner exited with {:?} without running any test:\n{}",
            cap.status,
            tail(&output, 2000)
        )));
    }
    let per_test = node_ids
        .iter()
        .map(|id| {
            let status = reported.get(&junit_key(id)).copied().unwrap_or(TestStatus::Error);
            (id.clone(), status)
        })
        .collect();
    Ok(TestRunResult {
        per_test,
        raw_output_tail: tail(&output, tail_limit),
        duration_s: cap.duration_s,
        timed_out: cap.timed_out,
    })
}
