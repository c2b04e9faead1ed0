//! HTTP backend for OpenAI-compatible chat-completions endpoints, with
//! bounded retries and exponential backoff for transient failures.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{validate_request, Backend, BackendError, CompletionRequest};

/// Environment variable consulted for the API key unless overridden.
pub const DEFAULT_API_KEY_ENV: &str = "CLAW_API_KEY";

const MAX_ATTEMPTS: u32 = 3;
const DEFAULT_BACKOFF: Duration = Duration::from_millis(500);

/// Connection settings for [`HttpBackend`]. API keys are only ever read
/// through environment variable indirection, never from config files.
#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    /// First retry delay; doubles per attempt. Tests shrink it.
    pub backoff_base: Duration,
    pub request_timeout: Duration,
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            backoff_base: DEFAULT_BACKOFF,
            request_timeout: Duration::from_secs(120),
        }
    }

    pub fn with_api_key_env(mut self, name: impl Into<String>) -> Self {
        self.api_key_env = name.into();
        self
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }
}

/// Issues `POST {base_url}/v1/chat/completions` and reads the first choice.
#[derive(Debug)]
pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        if !config.base_url.starts_with("http://") && !config.base_url.starts_with("https://") {
            return Err(BackendError::InvalidRequest(format!(
                "base_url {:?} must start with http:// or https://",
                config.base_url
            )));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.request_timeout))
            .build()
            .into();
        Ok(Self { config, agent })
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/v1/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn api_key(&self) -> Result<String, BackendError> {
        std::env::var(&self.config.api_key_env).map_err(|_| {
            BackendError::InvalidRequest(format!(
                "API key environment variable {} is not set",
                self.config.api_key_env
            ))
        })
    }

    /// One request attempt. `Err` values carry their retry class.
    fn attempt(&self, body: &serde_json::Value, key: &str) -> Result<String, BackendError> {
        let mut response = self
            .agent
            .post(&self.endpoint())
            .header("Authorization", &format!("Bearer {key}"))
            .header("Content-Type", "application/json")
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;

        let status = response.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Auth { status }),
            408 | 429 | 500..=599 => {
                return Err(BackendError::Transport(format!("HTTP {status}")));
            }
            _ => {
                return Err(BackendError::MalformedResponse(format!(
                    "unexpected HTTP {status}"
                )));
            }
        }

        let parsed: WireResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::MalformedResponse(format!("body parse: {e}")))?;
        let first = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedResponse("choices missing or empty".into()))?;
        first
            .message
            .content
            .ok_or_else(|| BackendError::MalformedResponse("choice content missing".into()))
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        validate_request(request)?;
        let key = self.api_key()?;
        let body = json!({
            "model": self.config.model,
            "messages": request.messages,
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
            "n": request.params.n_best,
        });

        let mut last_err = None;
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                let delay = self.config.backoff_base * 2u32.pow(attempt - 1);
                std::thread::sleep(delay);
            }
            match self.attempt(&body, &key) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        let last = last_err.expect("at least one attempt ran");
        Err(BackendError::Transport(format!(
            "{last} (after {MAX_ATTEMPTS} attempts)"
        )))
    }
}
