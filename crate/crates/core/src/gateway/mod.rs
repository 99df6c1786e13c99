//! Chat-completion backends.
//!
//! Everything that talks to a model goes through [`ChatGateway`]. The HTTP
//! backend speaks the common `/chat/completions` wire shape; the mocks in
//! [`mock`] are deterministic and never touch the network.

mod http;
mod limit;
pub mod mock;

use std::fmt;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use http::{HttpGateway, HttpTransport};
pub use limit::{Limiter, Permit};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_GROUP_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
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

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self { role: Role::Tool, content: content.into() }
    }
}

/// Generation settings shared by every request a stage issues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { temperature: DEFAULT_TEMPERATURE, top_p: DEFAULT_TOP_P, max_tokens: None, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
    /// Caller-side tag naming the pipeline step (for logs and scripted
    /// mocks). Never sent over the wire.
    pub label: String,
}

impl ChatRequest {
    pub fn new(label: impl Into<String>, messages: Vec<ChatMessage>, sampling: Sampling) -> Self {
        Self {
            messages,
            temperature: sampling.temperature,
            top_p: sampling.top_p,
            max_tokens: sampling.max_tokens,
            seed: sampling.seed,
            label: label.into(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |msg: &str| Err(GatewayError::new(GatewayErrorKind::InvalidRequest, msg));
        match self.messages.first() {
            None => return invalid("request has no messages"),
            Some(m) if !matches!(m.role, Role::System | Role::User) => {
                return invalid("first message must be system or user")
            }
            _ => {}
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return invalid("temperature must lie in [0, 2]");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return invalid("top_p must lie in (0, 1]");
        }
        if self.max_tokens == Some(0) {
            return invalid("max_tokens must be positive");
        }
        Ok(())
    }

    /// The most recent message with the given role.
    pub fn last(&self, role: Role) -> Option<&ChatMessage> {
        self.messages.iter().rev().find(|m| m.role == role)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReply {
    pub content: String,
    #[serde(default)]
    pub usage: Usage,
}

impl ChatReply {
    pub fn text(content: impl Into<String>) -> Self {
        Self { content: content.into(), usage: Usage::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayErrorKind {
    Auth,
    /// HTTP 429; retried.
    RateLimited,
    /// HTTP 5xx or a dropped connection; retried.
    Unavailable,
    Timeout,
    /// Retries spent on rate limiting or unavailability.
    RateLimitExhausted,
    MalformedResponse,
    InvalidRequest,
    /// Any other non-retryable failure (4xx, exhausted mock script).
    Rejected,
}

impl GatewayErrorKind {
    pub fn is_transient(self) -> bool {
        matches!(self, Self::RateLimited | Self::Unavailable | Self::Timeout)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Auth => "auth",
            Self::RateLimited => "rate_limited",
            Self::Unavailable => "unavailable",
            Self::Timeout => "timeout",
            Self::RateLimitExhausted => "rate_limit_exhausted",
            Self::MalformedResponse => "malformed_response",
            Self::InvalidRequest => "invalid_request",
            Self::Rejected => "rejected",
        }
    }
}

impl fmt::Display for GatewayErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("gateway error ({kind}): {message}")]
pub struct GatewayError {
    pub kind: GatewayErrorKind,
    pub message: String,
}

impl GatewayError {
    pub fn new(kind: GatewayErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }
}

/// A chat-completion backend. Implementations must be safe to share across
/// threads.
pub trait ChatGateway: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError>;
}

impl<G: ChatGateway + ?Sized> ChatGateway for &G {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        (**self).complete(request)
    }
}

impl<G: ChatGateway + ?Sized> ChatGateway for Box<G> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        (**self).complete(request)
    }
}

impl<G: ChatGateway + ?Sized> ChatGateway for std::sync::Arc<G> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        (**self).complete(request)
    }
}

/// Caps the number of in-flight requests to the wrapped gateway.
pub struct Bounded<G> {
    inner: G,
    limiter: Limiter,
}

impl<G: ChatGateway> Bounded<G> {
    pub fn new(inner: G, max_parallel: usize) -> Self {
        Self { inner, limiter: Limiter::new(max_parallel) }
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

impl<G: ChatGateway> ChatGateway for Bounded<G> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        let _permit = self.limiter.acquire();
        self.inner.complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { retries: 3, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    /// `min(base * 2^(attempt-1), max)` for a 1-based retry attempt.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Retries transient failures with exponential backoff.
pub struct Retrying<G> {
    inner: G,
    policy: RetryPolicy,
}

impl<G: ChatGateway> Retrying<G> {
    pub fn new(inner: G, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

impl<G: ChatGateway> ChatGateway for Retrying<G> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        let mut attempt = 0u32;
        loop {
            match self.inner.complete(request) {
                Ok(reply) => return Ok(reply),
                Err(err) if err.kind.is_transient() => {
                    if attempt >= self.policy.retries {
                        let kind = match err.kind {
                            GatewayErrorKind::Timeout => GatewayErrorKind::Timeout,
                            _ => GatewayErrorKind::RateLimitExhausted,
                        };
                        return Err(GatewayError::new(
                            kind,
                            format!("gave up after {} attempt(s): {}", attempt + 1, err.message),
                        ));
                    }
                    attempt += 1;
                    let delay = self.policy.delay(attempt);
                    log::debug!("{}: {} (retry {attempt} in {delay:?})", request.label, err);
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                }
                Err(err) => return Err(err),
            }
        }
    }
}

/// Counts calls to the wrapped gateway.
pub struct Counted<G> {
    inner: G,
    calls: std::sync::atomic::AtomicUsize,
}

impl<G: ChatGateway> Counted<G> {
    pub fn new(inner: G) -> Self {
        Self { inner, calls: Default::default() }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

impl<G: ChatGateway> ChatGateway for Counted<G> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.complete(request)
    }
}

/// Issues `g` independent completions of `request` concurrently. Results are
/// returned in sample-index order. When the request carries a seed, sample
/// `i` is sent with `seed + i` so the samples differ reproducibly.
///
/// Concurrency is bounded by whatever limit the gateway itself enforces.
pub fn sample_group(
    gateway: &dyn ChatGateway,
    request: &ChatRequest,
    g: usize,
) -> Result<Vec<Result<ChatReply, GatewayError>>, GatewayError> {
    if g == 0 {
        return Err(GatewayError::new(GatewayErrorKind::InvalidRequest, "group size must be at least 1"));
    }
    request.validate()?;
    let requests: Vec<ChatRequest> = (0..g)
        .map(|i| {
            let mut r = request.clone();
            r.seed = request.seed.map(|s| s.wrapping_add(i as u64));
            r.label = format!("{}#{i}", request.label);
            r
        })
        .collect();
    let results = thread::scope(|scope| {
        let handles: Vec<_> = requests.iter().map(|r| scope.spawn(move || gateway.complete(r))).collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|_| {
                    Err(GatewayError::new(GatewayErrorKind::Rejected, "sampling thread panicked"))
                })
            })
            .collect()
    });
    Ok(results)
}

/// Connection settings for the HTTP backend. The API key itself is only
/// ever read from the environment variable named here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoint: String,
    pub api_key_env: String,
    pub model: String,
    pub max_parallel: usize,
    pub retries: u32,
    pub timeout_s: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".into(),
            api_key_env: "LLM_API_KEY".into(),
            model: "deepseek-v3".into(),
            max_parallel: 4,
            retries: 3,
            timeout_s: 300,
        }
    }
}
