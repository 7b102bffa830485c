//! Text-generation backends.
//!
//! Every model the protocol talks to sits behind the [`Backend`] trait: the
//! remote chat-completions client in [`http`], the deterministic
//! [`ScriptedBackend`] used by tests and fixtures, and the cassette wrappers
//! in [`cassette`] that record or replay traffic.

pub mod cassette;
pub mod http;
pub mod scripted;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cassette::{record_wrap, CacheBackend, CassetteEntry, RecordingBackend, ReplayBackend};
pub use http::{HttpBackend, HttpBackendConfig, RetryPolicy};
pub use scripted::{scripted_backend, Dialogue, Script, ScriptReply, ScriptedBackend};

pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "System",
            Role::User => "User",
            Role::Assistant => "Assistant",
        })
    }
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub want_logprobs: bool,
}

impl CompletionRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
            want_logprobs: false,
        }
    }

    pub fn temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_logprobs(mut self, want: bool) -> Self {
        self.want_logprobs = want;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if let Some(i) = self
            .messages
            .iter()
            .position(|m| m.content.trim().is_empty())
        {
            return Err(BackendError::InvalidRequest(format!(
                "message {i} has empty content"
            )));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn last_user_message(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    pub fn first_user_message(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    /// Cassette key: backend id, messages, temperature and seed.
    /// `max_tokens` is left out so recordings survive budget changes.
    pub fn hash_for(&self, backend_id: &str) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            backend: &'a str,
            messages: &'a [ChatMessage],
            temperature: f64,
            seed: Option<u64>,
        }
        let key = Key {
            backend: backend_id,
            messages: &self.messages,
            temperature: self.temperature,
            seed: self.seed,
        };
        let bytes = serde_json::to_vec(&key).expect("request key serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    #[default]
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default)]
    pub finish_reason: FinishReason,
}

impl CompletionResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_logprobs: None,
            finish_reason: FinishReason::Stop,
        }
    }

    pub fn logprob_values(&self) -> Option<Vec<f64>> {
        self.token_logprobs
            .as_ref()
            .map(|t| t.iter().map(|l| l.logprob).collect())
    }
}

/// Prompt style a backend expects: chat messages or a single flattened prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    #[default]
    Chat,
    Completion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capability {
    Logprobs,
    SamplingSeed,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::Logprobs => "logprobs",
            Capability::SamplingSeed => "sampling-seed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub id: String,
    #[serde(default)]
    pub style: Style,
    #[serde(default)]
    pub capabilities: BTreeSet<Capability>,
}

impl BackendDescriptor {
    pub fn new(id: impl Into<String>, style: Style) -> Self {
        Self {
            id: id.into(),
            style,
            capabilities: BTreeSet::new(),
        }
    }

    pub fn with_capability(mut self, capability: Capability) -> Self {
        self.capabilities.insert(capability);
        self
    }

    pub fn supports(&self, capability: Capability) -> bool {
        self.capabilities.contains(&capability)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend `{backend}` unavailable after {attempts} attempt(s): {message}")]
    Unavailable {
        backend: String,
        attempts: u32,
        message: String,
    },
    #[error("backend `{backend}` rejected the request with status {status}: {body}")]
    Rejected {
        backend: String,
        status: u16,
        body: String,
    },
    #[error("backend `{backend}` does not advertise the {capability} capability")]
    Capability {
        backend: String,
        capability: Capability,
    },
    #[error("script miss: {0}")]
    ScriptMiss(String),
    #[error("script is empty")]
    EmptyScript,
    #[error("no recorded response for request {0}")]
    CassetteMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("backend call budget of {0} exhausted")]
    BudgetExhausted(u64),
    #[error("cassette io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cassette json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A text-generation backend.
///
/// Implementors provide [`Backend::generate`]; callers use
/// [`Backend::complete`], which validates the request, enforces the logprobs
/// capability and strips logprobs that were not asked for.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        let descriptor = self.descriptor();
        if request.want_logprobs && !descriptor.supports(Capability::Logprobs) {
            return Err(BackendError::Capability {
                backend: descriptor.id.clone(),
                capability: Capability::Logprobs,
            });
        }
        let mut response = self.generate(request)?;
        if !request.want_logprobs {
            response.token_logprobs = None;
        } else if response.token_logprobs.is_none() {
            return Err(BackendError::Protocol(format!(
                "backend `{}` returned no logprobs",
                descriptor.id
            )));
        }
        if let Some(lp) = &response.token_logprobs {
            if let Some(bad) = lp.iter().find(|t| t.logprob.is_nan() || t.logprob > 0.0) {
                return Err(BackendError::Protocol(format!(
                    "positive or NaN logprob {} for token {:?}",
                    bad.logprob, bad.token
                )));
            }
        }
        Ok(response)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }

    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).generate(request)
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }

    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).generate(request)
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).complete(request)
    }
}

/// Free-function form of [`Backend::complete`].
pub fn complete(
    backend: &dyn Backend,
    request: &CompletionRequest,
) -> Result<CompletionResponse, BackendError> {
    backend.complete(request)
}

/// Flattens a conversation into one prompt with role headers, ending with an
/// open assistant header, for completion-style models.
pub fn flatten_messages(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(&format!("{}: {}\n\n", m.role, m.content.trim()));
    }
    out.push_str("Assistant:");
    out
}
