//! Chat-completion request types and the backend trait the engine drives.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RequestError {
    #[error("request has no messages")]
    NoMessages,
    #[error("first message must have the system role")]
    FirstNotSystem,
    #[error("message {0} has empty content")]
    EmptyContent(usize),
    #[error("temperature must be a finite non-negative number")]
    BadTemperature,
    #[error("max_tokens must be positive")]
    ZeroMaxTokens,
}

impl ChatRequest {
    pub fn new(
        messages: Vec<ChatMessage>,
        model_name: impl Into<String>,
        temperature: f64,
        max_tokens: Option<u32>,
    ) -> Result<Self, RequestError> {
        let first = messages.first().ok_or(RequestError::NoMessages)?;
        if first.role != Role::System {
            return Err(RequestError::FirstNotSystem);
        }
        if let Some(i) = messages.iter().position(|m| m.content.is_empty()) {
            return Err(RequestError::EmptyContent(i));
        }
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(RequestError::BadTemperature);
        }
        if max_tokens == Some(0) {
            return Err(RequestError::ZeroMaxTokens);
        }
        Ok(Self {
            messages,
            model_name: model_name.into(),
            temperature,
            max_tokens,
        })
    }

    pub fn system_prompt(&self) -> &str {
        &self.messages[0].content
    }

    pub fn last_message(&self) -> &str {
        &self.messages[self.messages.len() - 1].content
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("API error {status}: {body}")]
    Api { status: u16, body: String },
    #[error("scripted backend has no entry left for this request")]
    ScriptExhausted,
    #[error("malformed response: {0}")]
    BadResponse(String),
}

/// A chat-completion backend. Implementations must tolerate concurrent
/// `complete` calls from independent panel runs.
pub trait ChatBackend: Send + Sync {
    /// Returns the assistant message content for `request`.
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;

    /// Number of `complete` invocations so far, failed ones included.
    fn count_calls(&self) -> u64;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn count_calls(&self) -> u64 {
        (**self).count_calls()
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn count_calls(&self) -> u64 {
        (**self).count_calls()
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn count_calls(&self) -> u64 {
        (**self).count_calls()
    }
}
