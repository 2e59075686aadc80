//! Provider implementations: an HTTP chat-completions client, a replaying
//! provider for deterministic runs, and a recorder that produces replays.

use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{prompt_digest, validate_messages, ChatMessage, Completion, LlmError, Role, TokenUsage};

pub trait Provider: Send {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<Completion, LlmError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HttpChat,
    Scripted,
}

/// Where request and response fields live for a chat-completions-style API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMap {
    pub model: String,
    pub messages: String,
    pub temperature: String,
    pub max_tokens: String,
    /// Role name used for tool results.
    pub tool_role: String,
    /// JSON pointers into the response.
    pub text_pointer: String,
    pub input_tokens_pointer: String,
    pub output_tokens_pointer: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        FieldMap {
            model: "model".into(),
            messages: "messages".into(),
            temperature: "temperature".into(),
            max_tokens: "max_tokens".into(),
            tool_role: "user".into(),
            text_pointer: "/choices/0/message/content".into(),
            input_tokens_pointer: "/usage/prompt_tokens".into(),
            output_tokens_pointer: "/usage/completion_tokens".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output")]
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_path: Option<PathBuf>,
    /// Environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub fields: FieldMap,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_request_timeout")]
    pub request_timeout_s: u64,
}

fn default_max_output() -> u32 {
    4096
}
fn default_retries() -> u32 {
    4
}
fn default_backoff() -> u64 {
    500
}
fn default_request_timeout() -> u64 {
    300
}

impl ProviderConfig {
    pub fn scripted(replay_path: impl Into<PathBuf>) -> Self {
        ProviderConfig {
            kind: ProviderKind::Scripted,
            endpoint: None,
            model_name: "scripted".into(),
            temperature: 0.0,
            max_output_tokens: default_max_output(),
            replay_path: Some(replay_path.into()),
            api_key_env: None,
            fields: FieldMap::default(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            request_timeout_s: default_request_timeout(),
        }
    }

    pub fn http(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        ProviderConfig {
            kind: ProviderKind::HttpChat,
            endpoint: Some(endpoint.into()),
            model_name: model_name.into(),
            replay_path: None,
            ..ProviderConfig::scripted("")
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let err = |m: &str| Err(LlmError::Config(m.to_string()));
        match self.kind {
            ProviderKind::HttpChat => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return err("http_chat needs an endpoint");
                }
                if self.replay_path.is_some() {
                    return err("http_chat takes no replay_path");
                }
                if self.model_name.is_empty() {
                    return err("http_chat needs a model_name");
                }
            }
            ProviderKind::Scripted => {
                if self.replay_path.is_none() {
                    return err("scripted needs a replay_path");
                }
                if self.endpoint.is_some() || self.api_key_env.is_some() {
                    return err("scripted takes no endpoint or api_key_env");
                }
            }
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return err("temperature must be within [0, 2]");
        }
        Ok(())
    }
}

/// Build a provider; relative replay paths resolve against `base_dir`.
pub fn from_config(cfg: &ProviderConfig, base_dir: &Path) -> Result<Box<dyn Provider>, LlmError> {
    cfg.validate()?;
    match cfg.kind {
        ProviderKind::Scripted => {
            let path = cfg.replay_path.as_ref().expect("validated");
            let path = if path.is_absolute() {
                path.clone()
            } else {
                base_dir.join(path)
            };
            Ok(Box::new(ScriptedProvider::load(&path)?))
        }
        ProviderKind::HttpChat => Ok(Box::new(HttpChatProvider::new(cfg.clone())?)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_prompt_digest: Option<String>,
    pub assistant_text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Returns recorded replies in order.
#[derive(Debug, Clone)]
pub struct ScriptedProvider {
    entries: Vec<ReplayEntry>,
    next: usize,
}

impl ScriptedProvider {
    pub fn new(entries: Vec<ReplayEntry>) -> Self {
        ScriptedProvider { entries, next: 0 }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| LlmError::Config(format!("replay {}: {e}", path.display())))?;
        let entries: Vec<ReplayEntry> =
            serde_json::from_str(&text).map_err(|e| LlmError::Config(format!("replay {}: {e}", path.display())))?;
        Ok(Self::new(entries))
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.next
    }
}

impl Provider for ScriptedProvider {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<Completion, LlmError> {
        validate_messages(messages)?;
        let Some(entry) = self.entries.get(self.next) else {
            return Err(LlmError::ReplayExhausted(self.next));
        };
        if let Some(expected) = &entry.expected_prompt_digest {
            let actual = prompt_digest(messages);
            if &actual != expected {
                return Err(LlmError::PromptMismatch {
                    index: self.next,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        self.next += 1;
        Ok(Completion {
            text: entry.assistant_text.clone(),
            usage: TokenUsage::new(entry.input_tokens, entry.output_tokens),
        })
    }
}

/// Wraps another provider and keeps every exchange as a replay entry.
pub struct RecordingProvider<P: Provider> {
    inner: P,
    entries: Vec<ReplayEntry>,
}

impl<P: Provider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        RecordingProvider {
            inner,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("entries serialize")
    }
}

impl<P: Provider> Provider for RecordingProvider<P> {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<Completion, LlmError> {
        let completion = self.inner.complete(messages)?;
        self.entries.push(ReplayEntry {
            expected_prompt_digest: Some(prompt_digest(messages)),
            assistant_text: completion.text.clone(),
            input_tokens: completion.usage.input_tokens,
            output_tokens: completion.usage.output_tokens,
        });
        Ok(completion)
    }
}

/// Chat-completions-style client. Failed attempts are retried with
/// exponential backoff; only the successful attempt is accounted.
pub struct HttpChatProvider {
    cfg: ProviderConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl HttpChatProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self, LlmError> {
        cfg.validate()?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| LlmError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.request_timeout_s))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(HttpChatProvider { cfg, client, api_key })
    }

    pub fn request_body(&self, messages: &[ChatMessage]) -> Value {
        let f = &self.cfg.fields;
        let msgs: Vec<Value> = messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                    Role::Tool => f.tool_role.as_str(),
                };
                json!({"role": role, "content": m.content})
            })
            .collect();
        let mut body = serde_json::Map::new();
        body.insert(f.model.clone(), json!(self.cfg.model_name));
        body.insert(f.messages.clone(), Value::Array(msgs));
        body.insert(f.temperature.clone(), json!(self.cfg.temperature));
        body.insert(f.max_tokens.clone(), json!(self.cfg.max_output_tokens));
        Value::Object(body)
    }

    fn attempt(&self, body: &Value) -> Result<Value, Attempt> {
        let endpoint = self.cfg.endpoint.as_deref().expect("validated");
        let mut req = self.client.post(endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}: {text:.200}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(format!("HTTP {status}: {text:.200}")));
        }
        serde_json::from_str(&text).map_err(|e| Attempt::Fatal(format!("response is not JSON: {e}")))
    }
}

impl Provider for HttpChatProvider {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<Completion, LlmError> {
        validate_messages(messages)?;
        let body = self.request_body(messages);
        let mut attempts = 0;
        let response = loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(v) => break v,
                Err(Attempt::Fatal(message)) => return Err(LlmError::Provider { attempts, message }),
                Err(Attempt::Retry(message)) => {
                    if attempts > self.cfg.max_retries {
                        return Err(LlmError::Provider { attempts, message });
                    }
                    let wait = self.cfg.backoff_ms.saturating_mul(1u64 << (attempts - 1).min(16));
                    thread::sleep(Duration::from_millis(wait));
                }
            }
        };
        let f = &self.cfg.fields;
        let text = response
            .pointer(&f.text_pointer)
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::Provider {
                attempts,
                message: format!("no text at {}", f.text_pointer),
            })?
            .to_string();
        let input = response.pointer(&f.input_tokens_pointer).and_then(Value::as_u64);
        let output = response.pointer(&f.output_tokens_pointer).and_then(Value::as_u64);
        let usage = match (input, output) {
            (Some(i), Some(o)) => TokenUsage::new(i, o),
            _ => {
                let chars: usize = messages.iter().map(|m| m.content.chars().count()).sum();
                TokenUsage::estimate(chars, text.chars().count())
            }
        };
        Ok(Completion { text, usage })
    }
}
