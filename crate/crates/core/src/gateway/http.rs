use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{
    Bounded, ChatGateway, ChatReply, ChatRequest, GatewayConfig, GatewayError, GatewayErrorKind, Retrying,
    RetryPolicy, Usage,
};

/// One unretried POST to `<endpoint>/chat/completions`.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
}

impl HttpTransport {
    /// The API key is taken from the environment variable named by
    /// `config.api_key_env`; when it is unset no auth header is sent.
    pub fn new(config: &GatewayConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: &GatewayConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            url: format!("{}/chat/completions", config.endpoint.trim_end_matches('/')),
            model: config.model.clone(),
            api_key,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

#[derive(Deserialize)]
struct WireReply {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

fn classify_transport(err: ureq::Error) -> GatewayError {
    let kind = match err {
        ureq::Error::Timeout(_) => GatewayErrorKind::Timeout,
        ureq::Error::Io(ref e) if e.kind() == std::io::ErrorKind::TimedOut => GatewayErrorKind::Timeout,
        ureq::Error::Io(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::HostNotFound
        | ureq::Error::Protocol(_)
        | ureq::Error::BodyStalled => GatewayErrorKind::Unavailable,
        ureq::Error::BadUri(_) | ureq::Error::Http(_) => GatewayErrorKind::InvalidRequest,
        _ => GatewayErrorKind::Rejected,
    };
    GatewayError::new(kind, err.to_string())
}

fn classify_status(status: u16, body: &str) -> GatewayError {
    let kind = match status {
        401 | 403 => GatewayErrorKind::Auth,
        408 => GatewayErrorKind::Timeout,
        429 => GatewayErrorKind::RateLimited,
        500..=599 => GatewayErrorKind::Unavailable,
        _ => GatewayErrorKind::Rejected,
    };
    let excerpt: String = body.chars().take(200).collect();
    GatewayError::new(kind, format!("HTTP {status}: {excerpt}"))
}

impl ChatGateway for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        request.validate()?;
        let mut body = json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
        });
        if let Some(max) = request.max_tokens {
            body["max_tokens"] = json!(max);
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        let mut post = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            post = post.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = post.send_json(&body).map_err(classify_transport)?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(classify_transport)?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        let wire: WireReply = serde_json::from_str(&text)
            .map_err(|e| GatewayError::new(GatewayErrorKind::MalformedResponse, e.to_string()))?;
        let content = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::new(GatewayErrorKind::MalformedResponse, "reply has no message content"))?;
        let usage = wire
            .usage
            .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
            .unwrap_or_default();
        Ok(ChatReply { content, usage })
    }
}

/// The production backend: retries inside a parallelism bound.
pub struct HttpGateway {
    inner: Bounded<Retrying<HttpTransport>>,
}

impl HttpGateway {
    pub fn new(config: &GatewayConfig) -> Self {
        Self::from_transport(HttpTransport::new(config), config)
    }

    pub fn from_transport(transport: HttpTransport, config: &GatewayConfig) -> Self {
        let policy = RetryPolicy { retries: config.retries, ..RetryPolicy::default() };
        Self { inner: Bounded::new(Retrying::new(transport, policy), config.max_parallel) }
    }

    pub fn with_policy(config: &GatewayConfig, policy: RetryPolicy) -> Self {
        let transport = HttpTransport::new(config);
        Self { inner: Bounded::new(Retrying::new(transport, policy), config.max_parallel) }
    }
}

impl ChatGateway for HttpGateway {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        self.inner.complete(request)
    }
}
