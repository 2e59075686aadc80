//! Interactive pdb sessions over a pipe.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::runner::{sanitize_output, TestEnv};
use super::SandboxError;

pub const PROMPT: &str = "(Pdb) ";
pub const DEFAULT_DEBUGGER_TIMEOUT_S: u64 = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub command: String,
    pub output: String,
}

/// A pytest process stopped under `--trace`, driven one command at a time.
pub struct DebuggerSession {
    pub session_id: String,
    pub test_node_id: String,
    pub banner: String,
    transcript: Vec<TranscriptEntry>,
    alive: bool,
    child: Child,
    stdin: Option<ChildStdin>,
    output: Receiver<Vec<u8>>,
    work_root: PathBuf,
}

fn spawn_reader(mut stream: impl Read + Send + 'static, tx: mpsc::Sender<Vec<u8>>) {
    thread::spawn(move || {
        let mut buf = [0u8; 4096];
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if tx.send(buf[..n].to_vec()).is_err() {
                        break;
                    }
                }
            }
        }
    });
}

/// Whether `text` ends at a fresh debugger prompt.
fn at_prompt(text: &str) -> bool {
    text == PROMPT || text.ends_with(&format!("\n{PROMPT}"))
}

impl DebuggerSession {
    pub fn open(
        env: &TestEnv,
        work_root: &Path,
        node_id: &str,
        session_id: String,
        timeout: Duration,
    ) -> Result<DebuggerSession, SandboxError> {
        let mut cmd = env.command_in(work_root)?;
        cmd.arg(node_id)
            .args(["--trace", "-s", "-q", "-p", "no:cacheprovider"])
            .env("PYTHONUNBUFFERED", "1")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let mut child = cmd
            .spawn()
            .map_err(|e| SandboxError::Infrastructure(format!("cannot start debugger: {e}")))?;
        let (tx, rx) = mpsc::channel();
        spawn_reader(child.stdout.take().expect("piped stdout"), tx.clone());
        spawn_reader(child.stderr.take().expect("piped stderr"), tx);
        let stdin = child.stdin.take();
        let mut session = DebuggerSession {
            session_id,
            test_node_id: node_id.to_string(),
            banner: String::new(),
            transcript: Vec::new(),
            alive: true,
            child,
            stdin,
            output: rx,
            work_root: work_root.to_path_buf(),
        };
        match session.read_until_prompt(timeout) {
            Ok((text, true)) => {
                session.banner = text;
                Ok(session)
            }
            Ok((text, false)) => {
                session.terminate();
                Err(SandboxError::Infrastructure(format!(
                    "debugger exited before its first prompt:\n{text}"
                )))
            }
            Err(e) => {
                session.terminate();
                Err(e)
            }
        }
    }

    pub fn is_alive(&self) -> bool {
        self.alive
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    /// Collect output until the next prompt. Returns the text without the
    /// prompt and whether a prompt was seen (false when the process ended).
    fn read_until_prompt(&mut self, timeout: Duration) -> Result<(String, bool), SandboxError> {
        let deadline = Instant::now() + timeout;
        let mut raw: Vec<u8> = Vec::new();
        loop {
            let text = String::from_utf8_lossy(&raw);
            if at_prompt(&text) {
                let body = text[..text.len() - PROMPT.len()].to_string();
                return Ok((sanitize_output(&body, &self.work_root), true));
            }
            let left = deadline.saturating_duration_since(Instant::now());
            match self.output.recv_timeout(left) {
                Ok(chunk) => raw.extend_from_slice(&chunk),
                Err(RecvTimeoutError::Timeout) => {
                    self.terminate();
                    return Err(SandboxError::Timeout(format!(
                        "debugger gave no prompt within {}s",
                        timeout.as_secs()
                    )));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    self.terminate();
                    let text = String::from_utf8_lossy(&raw).into_owned();
                    return Ok((sanitize_output(&text, &self.work_root), false));
                }
            }
        }
    }

    /// Send one command line and return its output.
    pub fn run(&mut self, command: &str, timeout: Duration) -> Result<String, SandboxError> {
        if !self.alive {
            return Err(SandboxError::SessionClosed(self.session_id.clone()));
        }
        let line = command.lines().next().unwrap_or("").trim_end();
        let sent = self
            .stdin
            .as_mut()
            .map(|s| s.write_all(format!("{line}\n").as_bytes()).and_then(|_| s.flush()));
        if !matches!(sent, Some(Ok(()))) {
            self.terminate();
            return Err(SandboxError::SessionClosed(self.session_id.clone()));
        }
        let (output, _) = self.read_until_prompt(timeout)?;
        self.transcript.push(TranscriptEntry {
            command: line.to_string(),
            output: output.clone(),
        });
        Ok(output)
    }

    fn terminate(&mut self) {
        self.stdin.take();
        if self.child.try_wait().ok().flatten().is_none() {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
        self.alive = false;
    }

    pub fn close(&mut self) {
        self.terminate();
    }

    /// OS process id of the debugged test runner.
    pub fn pid(&self) -> u32 {
        self.child.id()
    }
}

impl Drop for DebuggerSession {
    fn drop(&mut self) {
        self.terminate();
    }
}
