//! Isolated working copies of a target repository.

pub mod debugger;
pub mod runner;
pub mod splice;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use similar::TextDiff;
use tempfile::TempDir;
use thiserror::Error;
use walkdir::WalkDir;

use crate::harness::{ProbeMode, ProbeReport};
use crate::index::{self, sha256_hex, CodeEntity};
use crate::pysyntax;
pub use debugger::{DebuggerSession, TranscriptEntry, DEFAULT_DEBUGGER_TIMEOUT_S};
pub use runner::{
    TestEnv, TestRunResult, TestStatus, DEFAULT_EVAL_TIMEOUT_S, DEFAULT_OUTPUT_TAIL, DEFAULT_TEST_TIMEOUT_S,
};

/// Directory inside a work root for reports, logs and injected plugins.
pub const SCRATCH_DIR: &str = ".tdgen";
pub const DEFAULT_PER_TEST_TIMEOUT_S: u64 = 60;
const COPY_SKIP: &[&str] = &["__pycache__", ".pytest_cache", SCRATCH_DIR];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SandboxError {
    #[error("workspace is {actual:?}, expected one of {expected:?}")]
    State {
        expected: Vec<WorkspaceState>,
        actual: WorkspaceState,
    },
    #[error("copy failed: {0}")]
    Copy(String),
    #[error("stub installation failed: {message}\n{diff}")]
    Stub { message: String, diff: String },
    #[error("candidate does not parse (line {line}): {message}")]
    SyntacticCandidate { line: u32, message: String },
    #[error("candidate body is empty")]
    EmptyCandidate,
    #[error("infrastructure error: {0}")]
    Infrastructure(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("debugger session {0} is closed")]
    SessionClosed(String),
    #[error("probe failed: {0}")]
    Probe(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkspaceState {
    Pristine,
    Stubbed,
    Patched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateBody {
    pub body_text: String,
    pub attempt_index: u32,
}

/// A private copy of a repository with one target function under edit.
pub struct Workspace {
    source_root: PathBuf,
    dir: TempDir,
    work_root: PathBuf,
    target: CodeEntity,
    original_target: CodeEntity,
    state: WorkspaceState,
    env: TestEnv,
    original_text: String,
    stubbed_text: Option<String>,
    marker: String,
    next_session: u32,
}

fn copy_tree(from: &Path, to: &Path) -> Result<(), SandboxError> {
    let err = |e: &dyn std::fmt::Display| SandboxError::Copy(e.to_string());
    let walker = WalkDir::new(from).into_iter().filter_entry(|e| {
        e.depth() == 0 || !(e.file_type().is_dir() && COPY_SKIP.contains(&e.file_name().to_string_lossy().as_ref()))
    });
    for entry in walker {
        let entry = entry.map_err(|e| err(&e))?;
        let rel = entry.path().strip_prefix(from).map_err(|e| err(&e))?;
        let dest = to.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&dest).map_err(|e| err(&e))?;
        } else if entry.file_type().is_file() {
            fs::copy(entry.path(), &dest).map_err(|e| err(&e))?;
        }
    }
    Ok(())
}

/// Repo-relative files under `root` with their contents, skipping caches
/// and the scratch directory.
pub fn tree_snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let walker = WalkDir::new(root).into_iter().filter_entry(|e| {
        e.depth() == 0 || !(e.file_type().is_dir() && COPY_SKIP.contains(&e.file_name().to_string_lossy().as_ref()))
    });
    for entry in walker.flatten() {
        if entry.file_type().is_file() {
            if let (Ok(rel), Ok(bytes)) = (entry.path().strip_prefix(root), fs::read(entry.path())) {
                let rel = rel.to_string_lossy().replace('\\', "/");
                out.insert(rel, bytes);
            }
        }
    }
    out
}

/// Unified diff between two trees, files in path order.
pub fn diff_trees(old: &BTreeMap<String, Vec<u8>>, new: &BTreeMap<String, Vec<u8>>) -> String {
    let mut paths: Vec<&String> = old.keys().chain(new.keys()).collect();
    paths.sort();
    paths.dedup();
    let mut out = String::new();
    for path in paths {
        let a = old.get(path);
        let b = new.get(path);
        if a == b {
            continue;
        }
        let a_text = a.map(|b| String::from_utf8_lossy(b).into_owned()).unwrap_or_default();
        let b_text = b.map(|b| String::from_utf8_lossy(b).into_owned()).unwrap_or_default();
        let old_name = if a.is_some() {
            format!("a/{path}")
        } else {
            "/dev/null".into()
        };
        let new_name = if b.is_some() {
            format!("b/{path}")
        } else {
            "/dev/null".into()
        };
        let diff = TextDiff::from_lines(&a_text, &b_text);
        out.push_str(
            &diff
                .unified_diff()
                .context_radius(3)
                .header(&old_name, &new_name)
                .to_string(),
        );
    }
    out
}

impl Workspace {
    /// Copy `source_root` into a fresh directory (under `base`, or the system
    /// temp dir).
    pub fn create(
        source_root: &Path,
        target: CodeEntity,
        env: TestEnv,
        base: Option<&Path>,
    ) -> Result<Workspace, SandboxError> {
        let source_root = source_root
            .canonicalize()
            .map_err(|e| SandboxError::Copy(format!("{}: {e}", source_root.display())))?;
        let dir = match base {
            Some(b) => tempfile::Builder::new().prefix("tdgen-ws-").tempdir_in(b),
            None => tempfile::Builder::new().prefix("tdgen-ws-").tempdir(),
        }
        .map_err(|e| SandboxError::Copy(e.to_string()))?;
        let work_root = dir.path().join("repo");
        if work_root.starts_with(&source_root) || source_root.starts_with(&work_root) {
            return Err(SandboxError::Copy("work root overlaps the source root".into()));
        }
        copy_tree(&source_root, &work_root)?;
        let original_text = fs::read_to_string(work_root.join(&target.span.file_path))
            .map_err(|e| SandboxError::Copy(format!("{}: {e}", target.span.file_path)))?;
        let marker = format!(
            "TDGEN-STUB-{}",
            &sha256_hex(format!("{}\0{}", target.span.file_path, target.qualified_name).as_bytes())[..12]
        );
        Ok(Workspace {
            source_root,
            dir,
            work_root,
            original_target: target.clone(),
            target,
            state: WorkspaceState::Pristine,
            env,
            original_text,
            stubbed_text: None,
            marker,
            next_session: 0,
        })
    }

    pub fn source_root(&self) -> &Path {
        &self.source_root
    }

    pub fn work_root(&self) -> &Path {
        &self.work_root
    }

    /// The directory holding the work root; everything the workspace writes
    /// stays under it.
    pub fn container(&self) -> &Path {
        self.dir.path()
    }

    /// The target as it currently appears in the work tree.
    pub fn target(&self) -> &CodeEntity {
        &self.target
    }

    /// The target as it appears in the source tree.
    pub fn original_target(&self) -> &CodeEntity {
        &self.original_target
    }

    pub fn state(&self) -> WorkspaceState {
        self.state
    }

    pub fn env(&self) -> &TestEnv {
        &self.env
    }

    pub fn stub_marker(&self) -> &str {
        &self.marker
    }

    fn target_path(&self) -> PathBuf {
        self.work_root.join(&self.target.span.file_path)
    }

    fn require(&self, allowed: &[WorkspaceState]) -> Result<(), SandboxError> {
        if allowed.contains(&self.state) {
            Ok(())
        } else {
            Err(SandboxError::State {
                expected: allowed.to_vec(),
                actual: self.state,
            })
        }
    }

    fn write_target(&self, text: &str) -> Result<(), SandboxError> {
        fs::write(self.target_path(), text).map_err(|e| SandboxError::Infrastructure(e.to_string()))
    }

    pub fn current_text(&self) -> Result<String, SandboxError> {
        fs::read_to_string(self.target_path()).map_err(|e| SandboxError::Infrastructure(e.to_string()))
    }

    /// Re-extract the target from `text`, checking the header survived.
    fn relocate(&self, text: &str) -> Result<CodeEntity, String> {
        let fi = index::index_file(&self.target.span.file_path, text)?;
        fi.entities
            .into_iter()
            .find(|e| {
                e.qualified_name == self.original_target.qualified_name
                    && e.signature == self.original_target.signature
                    && e.span.start_line == self.original_target.span.start_line
            })
            .ok_or_else(|| "target definition moved or changed signature".to_string())
    }

    /// Replace the target body with the sentinel raise, keeping decorators,
    /// signature and docstring.
    pub fn install_stub(&mut self) -> Result<(), SandboxError> {
        self.require(&[WorkspaceState::Pristine])?;
        let t = &self.original_target;
        let slot = splice::body_slot(&self.original_text, t.header_line, t.name()).map_err(|m| SandboxError::Stub {
            message: m,
            diff: String::new(),
        })?;
        let text = splice::splice_body(&self.original_text, &slot, &splice::stub_statement(&self.marker));
        let entity = self.relocate(&text).map_err(|message| SandboxError::Stub {
            message,
            diff: TextDiff::from_lines(&self.original_text, &text)
                .unified_diff()
                .header("original", "stubbed")
                .to_string(),
        })?;
        self.write_target(&text)?;
        self.target = entity;
        self.stubbed_text = Some(text);
        self.state = WorkspaceState::Stubbed;
        Ok(())
    }

    /// Splice a candidate body under the target signature. A candidate that
    /// does not parse leaves the stub in place.
    pub fn apply_candidate(&mut self, candidate: &CandidateBody) -> Result<(), SandboxError> {
        self.require(&[WorkspaceState::Stubbed, WorkspaceState::Patched])?;
        if candidate.body_text.trim().is_empty() {
            return Err(SandboxError::EmptyCandidate);
        }
        let stubbed = self.stubbed_text.clone().expect("stubbed state has stub text");
        let t = &self.target;
        let slot = splice::body_slot(&stubbed, t.header_line, t.name()).map_err(SandboxError::Infrastructure)?;
        let text = splice::splice_body(&stubbed, &slot, &candidate.body_text);
        let tree = pysyntax::parse(&text);
        let failure = match pysyntax::first_error(&tree) {
            Some((line, message)) => Some((line, message)),
            None => self.relocate(&text).err().map(|m| (self.target.header_line, m)),
        };
        if let Some((line, message)) = failure {
            self.write_target(&stubbed)?;
            self.state = WorkspaceState::Stubbed;
            return Err(SandboxError::SyntacticCandidate { line, message });
        }
        self.write_target(&text)?;
        self.target = self.relocate(&text).expect("checked above");
        self.state = WorkspaceState::Patched;
        Ok(())
    }

    /// Drop the current candidate and restore the stub.
    pub fn revert(&mut self) -> Result<(), SandboxError> {
        self.require(&[WorkspaceState::Patched])?;
        let stubbed = self.stubbed_text.clone().expect("patched state has stub text");
        self.write_target(&stubbed)?;
        self.target = self.relocate(&stubbed).map_err(SandboxError::Infrastructure)?;
        self.state = WorkspaceState::Stubbed;
        Ok(())
    }

    /// Restore the original file; the stub can be installed again afterwards.
    pub fn reset_pristine(&mut self) -> Result<(), SandboxError> {
        self.write_target(&self.original_text)?;
        self.target = self.original_target.clone();
        self.stubbed_text = None;
        self.state = WorkspaceState::Pristine;
        Ok(())
    }

    /// Body statements of the target in the source tree.
    pub fn original_body(&self) -> Option<String> {
        let t = &self.original_target;
        splice::function_body(&self.original_text, t.header_line, t.name())
    }

    /// Body statements of the target as currently written in the work tree.
    pub fn current_body(&self) -> Option<String> {
        let text = self.current_text().ok()?;
        splice::function_body(&text, self.target.header_line, self.target.name())
    }

    pub fn run_tests(&self, node_ids: &[String], timeout: Duration) -> Result<TestRunResult, SandboxError> {
        self.require(&[WorkspaceState::Stubbed, WorkspaceState::Patched])?;
        runner::run_tests(&self.env, &self.work_root, node_ids, timeout, DEFAULT_OUTPUT_TAIL)
    }

    /// Run tests in any state; used for baseline runs of the pristine tree.
    pub fn run_tests_unchecked(&self, node_ids: &[String], timeout: Duration) -> Result<TestRunResult, SandboxError> {
        runner::run_tests(&self.env, &self.work_root, node_ids, timeout, DEFAULT_OUTPUT_TAIL)
    }

    pub fn open_debugger(&mut self, node_id: &str, timeout: Duration) -> Result<DebuggerSession, SandboxError> {
        self.require(&[WorkspaceState::Stubbed, WorkspaceState::Patched])?;
        let id = format!("pdb-{}", self.next_session);
        self.next_session += 1;
        DebuggerSession::open(&self.env, &self.work_root, node_id, id, timeout)
    }

    /// Unified diff of the work tree against the source tree.
    pub fn export_patch(&self) -> String {
        diff_trees(&tree_snapshot(&self.source_root), &tree_snapshot(&self.work_root))
    }

    /// Inject the probe plugin, run the suite and read back its report. The
    /// plugin and its output are removed afterwards.
    pub fn run_probe(&self, plugin: &Path, opts: &ProbeOptions) -> Result<ProbeReport, SandboxError> {
        let expected = match opts.mode {
            ProbeMode::Stub => WorkspaceState::Stubbed,
            ProbeMode::Coverage => WorkspaceState::Pristine,
        };
        self.require(&[expected])?;
        let scratch = self.work_root.join(SCRATCH_DIR);
        fs::create_dir_all(&scratch).map_err(|e| SandboxError::Infrastructure(e.to_string()))?;
        let plugin_dest = scratch.join(format!("{PROBE_PLUGIN_MODULE}.py"));
        fs::copy(plugin, &plugin_dest)
            .map_err(|e| SandboxError::Probe(format!("cannot inject plugin {}: {e}", plugin.display())))?;
        let out = scratch.join("probe_report.json");
        let _ = fs::remove_file(&out);

        let t = &self.target;
        let pythonpath = match self.env.env.get("PYTHONPATH") {
            Some(p) => format!("{}:{p}", scratch.display()),
            None => scratch.display().to_string(),
        };
        let mut cmd = self.env.command_in(&self.work_root)?;
        cmd.args(["-p", PROBE_PLUGIN_MODULE, "-p", "no:cacheprovider", "-q"])
            .args(&opts.selector)
            .env("PYTHONPATH", pythonpath)
            .env("TDGEN_PROBE_OUT", &out)
            .env(
                "TDGEN_PROBE_MODE",
                if opts.mode == ProbeMode::Stub {
                    "stub"
                } else {
                    "coverage"
                },
            )
            .env("TDGEN_TARGET_FILE", &t.span.file_path)
            .env("TDGEN_TARGET_QUALNAME", &t.qualified_name)
            .env("TDGEN_TARGET_START", t.span.start_line.to_string())
            .env("TDGEN_TARGET_END", t.span.end_line.to_string())
            .env("TDGEN_STUB_MARKER", &self.marker)
            .env("TDGEN_PER_TEST_TIMEOUT", opts.per_test_timeout_s.to_string());
        let cap = runner::run_captured(
            cmd,
            &scratch.join("probe.log"),
            Duration::from_secs(opts.suite_timeout_s),
        );
        let _ = fs::remove_file(&plugin_dest);
        let cap = cap?;
        let report_text = fs::read_to_string(&out);
        let _ = fs::remove_file(&out);
        if cap.timed_out {
            return Err(SandboxError::Probe(format!("suite exceeded {}s", opts.suite_timeout_s)));
        }
        let output = runner::sanitize_output(&cap.output, &self.work_root);
        let text = report_text.map_err(|_| {
            SandboxError::Probe(format!(
                "no report written; runner output:\n{}",
                runner::tail(&output, 4000)
            ))
        })?;
        ProbeReport::from_json(&text).map_err(|e| SandboxError::Probe(e.to_string()))
    }
}

/// Module name the probe plugin is injected under.
pub const PROBE_PLUGIN_MODULE: &str = "tdgen_probe";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeOptions {
    pub mode: ProbeMode,
    /// Extra runner arguments restricting the suite, e.g. `-k expr` or paths.
    pub selector: Vec<String>,
    pub per_test_timeout_s: u64,
    pub suite_timeout_s: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            mode: ProbeMode::Stub,
            selector: Vec::new(),
            per_test_timeout_s: DEFAULT_PER_TEST_TIMEOUT_S,
            suite_timeout_s: DEFAULT_EVAL_TIMEOUT_S,
        }
    }
}
