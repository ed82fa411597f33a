use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One agent invocation as seen by a backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentRequest {
    /// Node id; 0 for the summariser.
    pub node: usize,
    pub role: String,
    pub round: usize,
    pub system: String,
    pub user: String,
    /// Predecessor messages `(sender, content)` in ascending sender order.
    pub inputs: Vec<(usize, String)>,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
#[error("backend error: {0}")]
pub struct BackendError(pub String);

/// Anything that turns a prompt into a reply.
pub trait AgentBackend: Send + Sync {
    fn complete(&self, request: &AgentRequest) -> Result<String, BackendError>;
}

/// Deterministic stand-in for a language model.
///
/// Replies are `[role]@round-k: <digest>`, where the digest is a short
/// SHA-256 of the seed and both prompt parts. In echo mode the reply is
/// prefixed with the predecessor contents, so provenance is traceable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MockBackend {
    pub seed: u64,
    pub echo: bool,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed, echo: false }
    }

    pub fn echo(seed: u64) -> Self {
        Self { seed, echo: true }
    }

    pub fn digest(&self, system: &str, user: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(system.as_bytes());
        h.update([0]);
        h.update(user.as_bytes());
        h.finalize()[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn tag(role: &str, round: usize) -> String {
        format!("[{role}]@round-{round}:")
    }
}

impl AgentBackend for MockBackend {
    fn complete(&self, r: &AgentRequest) -> Result<String, BackendError> {
        let own = format!("{} {}", Self::tag(&r.role, r.round), self.digest(&r.system, &r.user));
        if !self.echo || r.inputs.is_empty() {
            return Ok(own);
        }
        let mut out: Vec<&str> = r.inputs.iter().map(|(_, c)| c.as_str()).collect();
        out.push(&own);
        Ok(out.join(" "))
    }
}

/// Endpoint settings for an OpenAI-style chat-completion service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub temperature: f32,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
            max_retries: 3,
            temperature: 0.0,
            max_in_flight: 4,
        }
    }
}

impl RemoteConfig {
    /// Defaults overridden by `TOPOGEN_BASE_URL`, `TOPOGEN_MODEL`,
    /// `TOPOGEN_API_KEY_ENV`, `TOPOGEN_TIMEOUT_SECS` and `TOPOGEN_MAX_RETRIES`.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if let Some(v) = var("TOPOGEN_BASE_URL") {
            c.base_url = v;
        }
        if let Some(v) = var("TOPOGEN_MODEL") {
            c.model = v;
        }
        if let Some(v) = var("TOPOGEN_API_KEY_ENV") {
            c.api_key_env = v;
        }
        if let Some(v) = var("TOPOGEN_TIMEOUT_SECS").and_then(|v| v.parse().ok()) {
            c.timeout_secs = v;
        }
        if let Some(v) = var("TOPOGEN_MAX_RETRIES").and_then(|v| v.parse().ok()) {
            c.max_retries = v;
        }
        c
    }

    pub fn endpoint(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 2],
    temperature: f32,
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
    content: String,
}

/// HTTP chat-completion backend. One attempt per call; retries belong to
/// the executor.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError(e.to_string()))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }
}

impl AgentBackend for RemoteBackend {
    fn complete(&self, r: &AgentRequest) -> Result<String, BackendError> {
        let body = WireRequest {
            model: &self.config.model,
            messages: [
                WireMessage {
                    role: "system",
                    content: &r.system,
                },
                WireMessage {
                    role: "user",
                    content: &r.user,
                },
            ],
            temperature: self.config.temperature,
        };
        let mut req = self.client.post(self.config.endpoint()).json(&body);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError(format!("HTTP {status}")));
        }
        let parsed: WireResponse = resp.json().map_err(|e| BackendError(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError("response has no choices".into()))
    }
}
