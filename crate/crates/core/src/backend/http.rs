//! Remote backend speaking the JSON chat-completions wire format.
//!
//! Chat-style backends POST `{base_url}/chat/completions`; completion-style
//! backends POST `{base_url}/completions` with the conversation flattened by
//! [`flatten_messages`]. Transport failures, 429 and 5xx responses are
//! retried with exponential backoff.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    flatten_messages, Backend, BackendDescriptor, BackendError, CompletionRequest,
    CompletionResponse, FinishReason, Style, TokenLogprob,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 1000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): initial, 2x, 4x, ...
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64 << retry.saturating_sub(1).min(16);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout_secs() -> u64 {
    120
}

pub struct HttpBackend {
    descriptor: BackendDescriptor,
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(descriptor: BackendDescriptor, config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::InvalidRequest(format!("http client: {e}")))?;
        Ok(Self {
            descriptor,
            config,
            client,
        })
    }

    fn endpoint(&self) -> String {
        let base = self.config.base_url.trim_end_matches('/');
        match self.descriptor.style {
            Style::Chat => format!("{base}/chat/completions"),
            Style::Completion => format!("{base}/completions"),
        }
    }

    pub fn request_body(&self, request: &CompletionRequest) -> Value {
        let mut body = match self.descriptor.style {
            Style::Chat => json!({
                "model": self.config.model,
                "messages": request.messages,
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
                "logprobs": request.want_logprobs,
            }),
            Style::Completion => {
                let mut b = json!({
                    "model": self.config.model,
                    "prompt": flatten_messages(&request.messages),
                    "temperature": request.temperature,
                    "max_tokens": request.max_tokens,
                });
                if request.want_logprobs {
                    b["logprobs"] = json!(1);
                }
                b
            }
        };
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<CompletionResponse, Attempt> {
        let mut req = self.client.post(self.endpoint()).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("status {status}: {text}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::Rejected {
                backend: self.descriptor.id.clone(),
                status: status.as_u16(),
                body: text,
            }));
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(BackendError::Protocol(format!("{e}: {text}"))))?;
        parse_response(self.descriptor.style, &value).map_err(Attempt::Fatal)
    }
}

impl Backend for HttpBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let body = self.request_body(request);
        let attempts = self.config.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                thread::sleep(self.config.retry.backoff(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(BackendError::Unavailable {
            backend: self.descriptor.id.clone(),
            attempts,
            message: last,
        })
    }
}

fn finish_reason(choice: &Value) -> FinishReason {
    match choice["finish_reason"].as_str() {
        Some("length") => FinishReason::Length,
        Some("stop") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    }
}

/// Extracts text and token logprobs from a chat or completion response body.
pub fn parse_response(style: Style, value: &Value) -> Result<CompletionResponse, BackendError> {
    let choice = value["choices"]
        .get(0)
        .ok_or_else(|| BackendError::Protocol(format!("no choices in {value}")))?;
    let (text, token_logprobs) = match style {
        Style::Chat => {
            let text = choice["message"]["content"]
                .as_str()
                .ok_or_else(|| BackendError::Protocol("missing message.content".into()))?;
            let lps = choice["logprobs"]["content"].as_array().map(|items| {
                items
                    .iter()
                    .map(|t| TokenLogprob {
                        token: t["token"].as_str().unwrap_or_default().to_string(),
                        logprob: t["logprob"].as_f64().unwrap_or(f64::NAN),
                    })
                    .collect::<Vec<_>>()
            });
            (text.to_string(), lps)
        }
        Style::Completion => {
            let text = choice["text"]
                .as_str()
                .ok_or_else(|| BackendError::Protocol("missing text".into()))?;
            let lp = &choice["logprobs"];
            let lps = match (lp["tokens"].as_array(), lp["token_logprobs"].as_array()) {
                (Some(tokens), Some(values)) => Some(
                    tokens
                        .iter()
                        .zip(values)
                        .map(|(t, v)| TokenLogprob {
                            token: t.as_str().unwrap_or_default().to_string(),
                            logprob: v.as_f64().unwrap_or(f64::NAN),
                        })
                        .collect::<Vec<_>>(),
                ),
                _ => None,
            };
            (text.to_string(), lps)
        }
    };
    Ok(CompletionResponse {
        text,
        token_logprobs,
        finish_reason: finish_reason(choice),
    })
}
