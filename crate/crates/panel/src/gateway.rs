//! Chat backends: an OpenAI-compatible HTTP client and a scripted replay
//! backend for tests.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use panel_core::backend::{BackendError, ChatBackend, ChatRequest};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_KEY_VAR: &str = "PANEL_API_KEY";
pub const MAX_RETRIES_LIMIT: u32 = 10;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("max_retries {0} exceeds the limit of {MAX_RETRIES_LIMIT}")]
    TooManyRetries(u32),
    #[error("request timeout must be positive")]
    ZeroTimeout,
    #[error("environment variable {0} is not set")]
    MissingKey(String),
    #[error("cannot read backend file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid backend file {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

fn default_key_var() -> String {
    DEFAULT_KEY_VAR.into()
}
fn default_model() -> String {
    "deepseek-chat".into()
}
fn default_temperature() -> f64 {
    1.0
}
fn default_timeout_ms() -> u64 {
    120_000
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}

/// Connection settings for an OpenAI-compatible endpoint. The key itself is
/// never stored here, only the name of the variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    #[serde(default = "default_key_var")]
    pub api_key_env_var: String,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_base_ms: u64,
}

impl BackendConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key_env_var: default_key_var(),
            model_name: default_model(),
            temperature: default_temperature(),
            max_tokens: None,
            request_timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            retry_backoff_base_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(GatewayError::TooManyRetries(self.max_retries));
        }
        if self.request_timeout_ms == 0 {
            return Err(GatewayError::ZeroTimeout);
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }

    pub fn retry_backoff_base(&self) -> Duration {
        Duration::from_millis(self.retry_backoff_base_ms)
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReply,
}

#[derive(Deserialize)]
struct WireReply {
    #[serde(default)]
    content: Option<String>,
}

fn role_name(role: panel_core::backend::Role) -> &'static str {
    use panel_core::backend::Role;
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

/// Live backend speaking the chat-completions dialect.
pub struct OpenAiBackend {
    config: BackendConfig,
    key: String,
    agent: ureq::Agent,
    calls: AtomicU64,
}

impl fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpenAiBackend")
            .field("config", &self.config)
            .field("key", &"<redacted>")
            .finish()
    }
}

impl OpenAiBackend {
    /// Reads the key from the configured environment variable.
    pub fn from_env(config: BackendConfig) -> Result<Self, GatewayError> {
        let key = std::env::var(&config.api_key_env_var)
            .map_err(|_| GatewayError::MissingKey(config.api_key_env_var.clone()))?;
        Self::with_key(config, key)
    }

    pub fn with_key(config: BackendConfig, key: impl Into<String>) -> Result<Self, GatewayError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.request_timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            key: key.into(),
            agent,
            calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.config.retry_backoff_base();
        let exp = base.saturating_mul(1u32 << retry.min(16));
        let jitter = rand::rng().random_range(0.0..1.0);
        exp + base.mul_f64(jitter)
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Attempt {
        let result = self
            .agent
            .post(&self.endpoint())
            .header("Authorization", &format!("Bearer {}", self.key))
            .send_json(body);
        let mut response = match result {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        if !(200..300).contains(&status) {
            let err = BackendError::Api { status, body: text };
            return if status == 429 || status >= 500 {
                Attempt::Retry(err)
            } else {
                Attempt::Fail(err)
            };
        }
        let parsed: WireResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => return Attempt::Fail(BackendError::BadResponse(e.to_string())),
        };
        match parsed.choices.into_iter().next().and_then(|c| c.message.content) {
            Some(content) => Attempt::Done(content),
            None => Attempt::Fail(BackendError::BadResponse(
                "response has no choices[0].message.content".into(),
            )),
        }
    }
}

enum Attempt {
    Done(String),
    Retry(BackendError),
    Fail(BackendError),
}

impl ChatBackend for OpenAiBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let body = WireRequest {
            model: &request.model_name,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: role_name(m.role),
                    content: &m.content,
                })
                .collect(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let mut retry = 0;
        loop {
            match self.attempt(&body) {
                Attempt::Done(s) => return Ok(s),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if retry >= self.config.max_retries => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("attempt {} failed ({e}); retrying", retry + 1);
                    std::thread::sleep(self.backoff(retry));
                    retry += 1;
                }
            }
        }
    }

    fn count_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

fn one() -> u32 {
    1
}

/// One scripted reply. An entry applies when every `contains` needle occurs
/// in the request's system prompt or last message. It is consumed after
/// `repeat` uses, or never when `sticky`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    pub response: String,
    #[serde(default = "one")]
    pub repeat: u32,
    #[serde(default)]
    pub sticky: bool,
}

impl ScriptEntry {
    /// Matches any request, once.
    pub fn any(response: impl Into<String>) -> Self {
        Self {
            contains: Vec::new(),
            response: response.into(),
            repeat: 1,
            sticky: false,
        }
    }

    pub fn when(needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            contains: vec![needle.into()],
            response: response.into(),
            repeat: 1,
            sticky: false,
        }
    }

    pub fn and(mut self, needle: impl Into<String>) -> Self {
        self.contains.push(needle.into());
        self
    }

    pub fn times(mut self, n: u32) -> Self {
        self.repeat = n.max(1);
        self
    }

    pub fn sticky(mut self) -> Self {
        self.sticky = true;
        self
    }

    fn matches(&self, request: &ChatRequest) -> bool {
        let system = request.system_prompt();
        let last = request.last_message();
        self.contains
            .iter()
            .all(|n| system.contains(n.as_str()) || last.contains(n.as_str()))
    }
}

pub const DEFAULT_FALLBACK: &str = "ANSWER: (no scripted reply)";

/// Deterministic replay backend. Requests are served in arrival order from
/// a queue behind a lock.
#[derive(Debug)]
pub struct ScriptedBackend {
    script: Mutex<VecDeque<ScriptEntry>>,
    log: Mutex<Vec<ChatRequest>>,
    strict: bool,
    fallback: String,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>, strict: bool) -> Self {
        Self {
            script: Mutex::new(entries.into_iter().collect()),
            log: Mutex::new(Vec::new()),
            strict,
            fallback: DEFAULT_FALLBACK.into(),
            calls: AtomicU64::new(0),
        }
    }

    /// Strict backend that replies with `responses` in order, one each.
    pub fn replies<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self::new(responses.into_iter().map(ScriptEntry::any), true)
    }

    pub fn with_fallback(mut self, fallback: impl Into<String>) -> Self {
        self.fallback = fallback.into();
        self
    }

    /// Every request received so far.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().expect("script lock").len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("log lock").push(request.clone());
        let mut script = self.script.lock().expect("script lock");
        let Some(pos) = script.iter().position(|e| e.matches(request)) else {
            return if self.strict {
                Err(BackendError::ScriptExhausted)
            } else {
                Ok(self.fallback.clone())
            };
        };
        let entry = &mut script[pos];
        let response = entry.response.clone();
        if !entry.sticky {
            entry.repeat -= 1;
            if entry.repeat == 0 {
                script.remove(pos);
            }
        }
        Ok(response)
    }

    fn count_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Contents of a `--backend` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Openai(BackendConfig),
    Scripted {
        #[serde(default)]
        strict: bool,
        #[serde(default)]
        fallback: Option<String>,
        entries: Vec<ScriptEntry>,
    },
}

impl BackendSpec {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| GatewayError::Io {
            path: shown.clone(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| GatewayError::Parse { path: shown, source })
    }

    /// Model name and endpoint for manifests. Never includes the key.
    pub fn describe(&self) -> (String, Option<String>) {
        match self {
            BackendSpec::Openai(c) => (c.model_name.clone(), Some(c.base_url.clone())),
            BackendSpec::Scripted { .. } => ("scripted".into(), None),
        }
    }

    pub fn build(&self) -> Result<Box<dyn ChatBackend>, GatewayError> {
        Ok(match self {
            BackendSpec::Openai(c) => Box::new(OpenAiBackend::from_env(c.clone())?),
            BackendSpec::Scripted {
                strict,
                fallback,
                entries,
            } => {
                let mut b = ScriptedBackend::new(entries.iter().cloned(), *strict);
                if let Some(f) = fallback {
                    b = b.with_fallback(f.clone());
                }
                Box::new(b)
            }
        })
    }
}
