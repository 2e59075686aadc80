//! Chat providers, token accounting and parsing of model replies.

pub mod extract;
pub mod provider;

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use extract::{
    extract_candidate_body, extract_tool_requests, ApiSpec, ArgType, ArgValue, Extraction, RejectedRequest,
    ToolRequest, TOOL_APIS,
};
pub use provider::{
    from_config, FieldMap, HttpChatProvider, Provider, ProviderConfig, ProviderKind, RecordingProvider, ReplayEntry,
    ScriptedProvider,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("provider error after {attempts} attempt(s): {message}")]
    Provider { attempts: u32, message: String },
    #[error("replay exhausted after {0} response(s)")]
    ReplayExhausted(usize),
    #[error("replay entry {index} expected prompt digest {expected}, got {actual}")]
    PromptMismatch {
        index: usize,
        expected: String,
        actual: String,
    },
    #[error("no candidate body in the reply")]
    NoCandidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResult {
    pub api_name: String,
    pub args_digest: String,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_results: Option<Vec<ToolResult>>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
            tool_results: None,
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
            tool_results: None,
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
            tool_results: None,
        }
    }

    /// A tool message whose content is the concatenated payloads.
    pub fn tool(results: Vec<ToolResult>) -> Self {
        let content = results
            .iter()
            .map(|r| r.payload.as_str())
            .collect::<Vec<_>>()
            .join("\n\n");
        ChatMessage {
            role: Role::Tool,
            content,
            tool_results: Some(results),
        }
    }
}

/// Checks the conversation shape every provider expects.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), LlmError> {
    match messages.first() {
        None => return Err(LlmError::Config("no messages".into())),
        Some(m) if m.role != Role::System => {
            return Err(LlmError::Config("first message must be the system prompt".into()))
        }
        _ => {}
    }
    if let Some(m) = messages
        .iter()
        .find(|m| m.role == Role::Tool && m.tool_results.is_none())
    {
        return Err(LlmError::Config(format!(
            "tool message without results: {:.40}",
            m.content
        )));
    }
    Ok(())
}

/// Stable digest of a conversation, used to pin replay entries to prompts.
pub fn prompt_digest(messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        let role = serde_json::to_string(&m.role).expect("role serializes");
        hasher.update(role.as_bytes());
        hasher.update([0]);
        hasher.update(m.content.as_bytes());
        hasher.update([0xff]);
    }
    hex::encode(hasher.finalize())[..16].to_string()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// At least one contributing call had no provider-reported usage.
    #[serde(default)]
    pub estimated: bool,
}

impl TokenUsage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        TokenUsage {
            input_tokens,
            output_tokens,
            estimated: false,
        }
    }

    /// `ceil(chars / 4)` per side.
    pub fn estimate(input_chars: usize, output_chars: usize) -> Self {
        TokenUsage {
            input_tokens: input_chars.div_ceil(4) as u64,
            output_tokens: output_chars.div_ceil(4) as u64,
            estimated: true,
        }
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
        self.estimated |= rhs.estimated;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
}
