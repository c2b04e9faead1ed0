//! Uniform text-completion interface every agent runs over: a deterministic
//! scripted implementation for tests and offline runs, and an HTTP
//! implementation for OpenAI-compatible model endpoints.

mod http;
mod scripted;

pub use http::{HttpBackend, HttpBackendConfig, DEFAULT_API_KEY_ENV};
pub use scripted::{ScriptEntry, ScriptedBackend};

use std::sync::atomic::{AtomicU32, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::AgentStage;

/// Chat roles of the wire protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

/// One chat turn. Content must be nonempty for system and user roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }
}

/// Decoding parameters forwarded to the backend.
///
/// Chat-completion wire protocols expose no beam search; the engine maps
/// beam width onto `n_best` with temperature 0 and top-choice selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub n_best: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            temperature: 0.0,
            n_best: 3,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(1..=8192).contains(&self.max_tokens) {
            return Err(BackendError::InvalidRequest(format!(
                "max_tokens {} outside [1, 8192]",
                self.max_tokens
            )));
        }
        if !(1..=8).contains(&self.n_best) {
            return Err(BackendError::InvalidRequest(format!(
                "n_best {} outside [1, 8]",
                self.n_best
            )));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Identifies which agent call a completion belongs to.
///
/// The scripted backend keys its lookup on this; the HTTP backend ignores
/// it. `attempt` counts re-prompt retries, starting at 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallTag {
    pub case_id: String,
    pub stage: AgentStage,
    pub instance: String,
    pub attempt: u32,
}

impl CallTag {
    pub fn new(case_id: impl Into<String>, stage: AgentStage, instance: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            stage,
            instance: instance.into(),
            attempt: 0,
        }
    }

    pub fn with_attempt(mut self, attempt: u32) -> Self {
        self.attempt = attempt;
        self
    }
}

impl std::fmt::Display for CallTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, attempt {})",
            self.case_id, self.stage, self.instance, self.attempt
        )
    }
}

/// One completion request: chat messages, decoding params, call identity.
#[derive(Debug, Clone)]
pub struct CompletionRequest<'a> {
    pub messages: &'a [ChatMessage],
    pub params: &'a GenerationParams,
    pub tag: &'a CallTag,
}

/// Backend failure classes.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("per-case call budget of {limit} exceeded")]
    BudgetExceeded { limit: u32 },
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("script error: {0}")]
    Script(String),
}

impl BackendError {
    /// Only transient transport-class failures are ever retried.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// A text-completion provider. Implementations must tolerate concurrent
/// `complete` calls; the orchestrator issues the competitive call and
/// cooperative calls in parallel.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError>;
}

/// Shared request precondition: messages nonempty, first message is system,
/// system/user contents nonempty.
pub(crate) fn validate_request(request: &CompletionRequest<'_>) -> Result<(), BackendError> {
    let messages = request.messages;
    if messages.is_empty() {
        return Err(BackendError::InvalidRequest("messages must be nonempty".into()));
    }
    if messages[0].role != ChatRole::System {
        return Err(BackendError::InvalidRequest(
            "first message must have role system".into(),
        ));
    }
    for m in messages {
        if matches!(m.role, ChatRole::System | ChatRole::User) && m.content.is_empty() {
            return Err(BackendError::InvalidRequest(format!(
                "{:?} message content must be nonempty",
                m.role
            )));
        }
    }
    request.params.validate()
}

/// Wraps a backend with a per-case call cap so lesion fan-out cannot run
/// away. Shared by both flows of one case; concurrent calls see a single
/// atomic counter.
pub struct BudgetedBackend<'a> {
    inner: &'a dyn Backend,
    used: AtomicU32,
    limit: u32,
}

impl<'a> BudgetedBackend<'a> {
    pub fn new(inner: &'a dyn Backend, limit: u32) -> Self {
        Self {
            inner,
            used: AtomicU32::new(0),
            limit,
        }
    }

    pub fn calls_used(&self) -> u32 {
        self.used.load(Ordering::SeqCst)
    }
}

impl Backend for BudgetedBackend<'_> {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        let used = self.used.fetch_add(1, Ordering::SeqCst);
        if used >= self.limit {
            return Err(BackendError::BudgetExceeded { limit: self.limit });
        }
        self.inner.complete(request)
    }
}
