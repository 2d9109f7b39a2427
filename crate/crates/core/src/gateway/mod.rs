//! Client side of a chat-completion compatible inference server.
//!
//! Requests go through [`ChatBackend`]; [`HttpChatClient`] is the network
//! implementation with bounded retries, [`cache`] adds a persistent
//! content-addressed response store in front of any backend.

pub mod cache;
pub mod hidden;
pub mod server;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cached_chat_complete, CacheKey, CachedCompletion, ResponseCache};
pub use hidden::{hidden_states_remote, RemoteHiddenStates};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("server rejected request with status {status}: {body}")]
    Permanent { status: u16, body: String },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("unusable response content: {0}")]
    Content(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("cache i/o: {0}")]
    Cache(#[from] std::io::Error),
}

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
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

/// Serializes with the wire field names of `POST /v1/chat/completions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(rename = "model")]
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return invalid("at least one user message is required");
        }
        if self.messages.iter().any(|m| m.content.is_empty()) {
            return invalid("message content must not be empty");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return invalid("temperature must be finite and >= 0");
        }
        if self.max_tokens == 0 {
            return invalid("max_tokens must be > 0");
        }
        Ok(())
    }

    /// Compact JSON body; the byte string hashed into a [`CacheKey`].
    pub fn wire_json(&self) -> String {
        serde_json::to_string(self).expect("chat request serializes")
    }

    pub fn from_wire_json(body: &str) -> Result<Self, GatewayError> {
        serde_json::from_str(body).map_err(|e| GatewayError::InvalidRequest(e.to_string()))
    }

    pub fn user_content(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    /// Base URL without the `/v1/...` suffix.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles for every further attempt.
    pub backoff_base: Duration,
    /// Relative jitter applied to each backoff delay.
    pub jitter: f64,
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".to_string(),
            api_key: None,
            timeout: Duration::from_secs(600),
            max_attempts: 3,
            backoff_base: Duration::from_secs(1),
            jitter: 0.2,
            max_in_flight: 4,
        }
    }
}

impl EndpointConfig {
    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }

    fn backoff(&self, failed_attempt: u32) -> Duration {
        let base = self.backoff_base.as_secs_f64() * 2f64.powi(failed_attempt.saturating_sub(1) as i32);
        let jitter = if self.jitter > 0.0 { rand::rng().random_range(-self.jitter..=self.jitter) } else { 0.0 };
        Duration::from_secs_f64((base * (1.0 + jitter)).max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

/// Anything that can answer a chat request.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError>;

    /// Requests that reached the backend (network calls for HTTP clients).
    fn requests_sent(&self) -> usize;
}

pub(crate) fn build_agent(config: &EndpointConfig) -> ureq::Agent {
    ureq::Agent::config_builder().timeout_global(Some(config.timeout)).http_status_as_error(false).build().into()
}

/// POSTs `body` to `path`, retrying 5xx responses and transport failures
/// with exponential backoff. 4xx responses fail immediately. Returns the
/// response body and the number of attempts used.
pub(crate) fn post_json_with_retry(
    agent: &ureq::Agent,
    config: &EndpointConfig,
    path: &str,
    body: &str,
    counter: &AtomicUsize,
) -> Result<(String, u32), GatewayError> {
    let url = config.url(path);
    let max_attempts = config.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        counter.fetch_add(1, Ordering::SeqCst);
        let mut request = agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &config.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let failure = match request.send(body) {
            Ok(mut response) => {
                let status = response.status().as_u16();
                let text = response.body_mut().read_to_string().unwrap_or_default();
                match status {
                    200..=299 => return Ok((text, attempt)),
                    400..=499 => return Err(GatewayError::Permanent { status, body: text }),
                    _ => format!("status {status}: {text}"),
                }
            }
            Err(e) => e.to_string(),
        };
        if attempt >= max_attempts {
            return Err(GatewayError::Transport { attempts: attempt, message: failure });
        }
        let delay = config.backoff(attempt);
        log::warn!("gateway: attempt {attempt} to {url} failed ({failure}); retrying in {delay:?}");
        thread::sleep(delay);
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Blocking HTTP client for `POST <base>/v1/chat/completions`.
pub struct HttpChatClient {
    agent: ureq::Agent,
    config: EndpointConfig,
    requests: AtomicUsize,
}

impl HttpChatClient {
    pub fn new(config: EndpointConfig) -> Self {
        Self { agent: build_agent(&config), config, requests: AtomicUsize::new(0) }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }
}

impl ChatBackend for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        request.validate()?;
        let (body, attempts) = post_json_with_retry(
            &self.agent,
            &self.config,
            "/v1/chat/completions",
            &request.wire_json(),
            &self.requests,
        )?;
        let parsed: ChatResponse =
            serde_json::from_str(&body).map_err(|e| GatewayError::Protocol(format!("malformed chat response: {e}")))?;
        let text = parsed.choices.into_iter().next().and_then(|c| c.message.content).unwrap_or_default();
        if text.is_empty() {
            return Err(GatewayError::Content("empty completion".into()));
        }
        Ok(Completion { text, attempts })
    }

    fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

/// `chat_complete` over HTTP.
pub fn chat_complete(request: &ChatRequest, endpoint: &EndpointConfig) -> Result<Completion, GatewayError> {
    HttpChatClient::new(endpoint.clone()).complete(request)
}
