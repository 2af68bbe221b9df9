//! Blocking HTTP client for an external text-completion endpoint.
//!
//! Wire format: `POST {endpoint}` with body `{"prompt": "..."}`, answered by
//! `{"text": "..."}`. The bearer token, when needed, comes from the
//! `ECSYNTH_API_TOKEN` environment variable.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOKEN_ENV: &str = "ECSYNTH_API_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpClientConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Retries after the first attempt.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

impl HttpClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

pub struct HttpCompletionClient {
    config: HttpClientConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpCompletionClient {
    /// Builds a client, reading the token from the environment.
    pub fn from_env(config: HttpClientConfig) -> Self {
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Self::with_token(config, token)
    }

    pub fn with_token(config: HttpClientConfig, token: Option<String>) -> Self {
        let timeout = Duration::from_millis(config.timeout_ms);
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self { config, token, agent }
    }

    pub fn config(&self) -> &HttpClientConfig {
        &self.config
    }

    fn attempt(&self, prompt: &str) -> std::result::Result<String, (bool, String)> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        match req.send_json(CompletionRequest { prompt }) {
            Ok(resp) => resp
                .into_json::<CompletionResponse>()
                .map(|r| r.text)
                .map_err(|e| (true, format!("bad response body: {e}"))),
            Err(ureq::Error::Status(code, _)) => {
                let retryable = code == 429 || code >= 500;
                Err((retryable, format!("HTTP status {code}")))
            }
            Err(e) => Err((true, e.to_string())),
        }
    }

    /// Sends `prompt`, retrying transport errors, 429 and 5xx up to the
    /// configured budget.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err((retryable, msg)) => {
                    log::debug!("completion attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                    if !retryable {
                        break;
                    }
                    if attempt + 1 < attempts && self.config.backoff_ms > 0 {
                        thread::sleep(Duration::from_millis(self.config.backoff_ms << attempt.min(6)));
                    }
                }
            }
        }
        Err(Error::Client(format!(
            "{} failed after {attempts} attempt(s): {last}",
            self.config.endpoint
        )))
    }
}
