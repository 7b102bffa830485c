//! Deterministic scripted backend.
//!
//! Replies come from a fixed script and never from improvisation: a lookup
//! that finds nothing is a [`BackendError::ScriptMiss`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    Backend, BackendDescriptor, BackendError, CompletionRequest, CompletionResponse,
    FinishReason, Role, Style, TokenLogprob,
};

/// One scripted reply: plain text, or text with token logprobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptReply {
    Text(String),
    Full {
        text: String,
        #[serde(default)]
        token_logprobs: Option<Vec<TokenLogprob>>,
    },
}

impl ScriptReply {
    fn to_response(&self) -> CompletionResponse {
        match self {
            ScriptReply::Text(text) => CompletionResponse::text(text.clone()),
            ScriptReply::Full {
                text,
                token_logprobs,
            } => CompletionResponse {
                text: text.clone(),
                token_logprobs: token_logprobs.clone(),
                finish_reason: FinishReason::Stop,
            },
        }
    }
}

impl From<&str> for ScriptReply {
    fn from(s: &str) -> Self {
        ScriptReply::Text(s.to_string())
    }
}

impl From<String> for ScriptReply {
    fn from(s: String) -> Self {
        ScriptReply::Text(s)
    }
}

/// A conversation script selected by a substring of the conversation opening:
/// any system messages plus the first user message. The reply index is the number of assistant messages that follow that
/// first user message, so the backend is stateless and can be shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub key: String,
    pub replies: Vec<ScriptReply>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Script {
    /// Replies consumed in order; one examination at a time.
    Sequence(Vec<ScriptReply>),
    /// Exact lookup on the final user message.
    Map(BTreeMap<String, ScriptReply>),
    Dialogues(Vec<Dialogue>),
}

impl Script {
    fn is_empty(&self) -> bool {
        match self {
            Script::Sequence(v) => v.is_empty(),
            Script::Map(m) => m.is_empty(),
            Script::Dialogues(d) => d.is_empty() || d.iter().all(|d| d.replies.is_empty()),
        }
    }
}

pub struct ScriptedBackend {
    descriptor: BackendDescriptor,
    script: Script,
    cursor: Mutex<usize>,
    calls: AtomicUsize,
}

/// Builds a chat-style scripted backend with id `scripted`.
pub fn scripted_backend(script: Script) -> Result<ScriptedBackend, BackendError> {
    ScriptedBackend::new(BackendDescriptor::new("scripted", Style::Chat), script)
}

impl ScriptedBackend {
    pub fn new(descriptor: BackendDescriptor, script: Script) -> Result<Self, BackendError> {
        if script.is_empty() {
            return Err(BackendError::EmptyScript);
        }
        Ok(Self {
            descriptor,
            script,
            cursor: Mutex::new(0),
            calls: AtomicUsize::new(0),
        })
    }

    pub fn sequence<I, R>(replies: I) -> Result<Self, BackendError>
    where
        I: IntoIterator<Item = R>,
        R: Into<ScriptReply>,
    {
        scripted_backend(Script::Sequence(
            replies.into_iter().map(Into::into).collect(),
        ))
    }

    pub fn map<I, K, R>(pairs: I) -> Result<Self, BackendError>
    where
        I: IntoIterator<Item = (K, R)>,
        K: Into<String>,
        R: Into<ScriptReply>,
    {
        scripted_backend(Script::Map(
            pairs
                .into_iter()
                .map(|(k, r)| (k.into(), r.into()))
                .collect(),
        ))
    }

    pub fn from_file(path: &Path, descriptor: BackendDescriptor) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path)?;
        let script: Script = serde_json::from_str(&text)?;
        Self::new(descriptor, script)
    }

    pub fn with_descriptor(mut self, descriptor: BackendDescriptor) -> Self {
        self.descriptor = descriptor;
        self
    }

    /// Number of `generate` calls served so far, misses included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Unconsumed replies of a sequence script; `None` for other scripts.
    pub fn remaining(&self) -> Option<usize> {
        match &self.script {
            Script::Sequence(v) => Some(v.len() - *self.cursor.lock().unwrap()),
            _ => None,
        }
    }

    fn lookup(&self, request: &CompletionRequest) -> Result<&ScriptReply, BackendError> {
        match &self.script {
            Script::Sequence(replies) => {
                let mut cursor = self.cursor.lock().unwrap();
                let reply = replies.get(*cursor).ok_or_else(|| {
                    BackendError::ScriptMiss(format!(
                        "sequence exhausted after {} replies (last user message: {:?})",
                        replies.len(),
                        request.last_user_message().unwrap_or("")
                    ))
                })?;
                *cursor += 1;
                Ok(reply)
            }
            Script::Map(map) => {
                let key = request.last_user_message().unwrap_or("");
                map.get(key)
                    .ok_or_else(|| BackendError::ScriptMiss(format!("no entry for {key:?}")))
            }
            Script::Dialogues(dialogues) => {
                let start = request
                    .messages
                    .iter()
                    .position(|m| m.role == Role::User)
                    .unwrap_or(0);
                let first: String = request.messages[..(start + 1).min(request.messages.len())]
                    .iter()
                    .filter(|m| m.role != Role::Assistant)
                    .map(|m| m.content.as_str())
                    .collect::<Vec<_>>()
                    .join("\n");
                let mut hits = dialogues.iter().filter(|d| first.contains(&d.key));
                let dialogue = match (hits.next(), hits.next()) {
                    (Some(d), None) => d,
                    (None, _) => {
                        return Err(BackendError::ScriptMiss(format!(
                            "no dialogue key found in {first:?}"
                        )))
                    }
                    (Some(a), Some(b)) => {
                        return Err(BackendError::ScriptMiss(format!(
                            "dialogue keys {:?} and {:?} both match",
                            a.key, b.key
                        )))
                    }
                };
                let index = request.messages[start..]
                    .iter()
                    .filter(|m| m.role == Role::Assistant)
                    .count();
                dialogue.replies.get(index).ok_or_else(|| {
                    BackendError::ScriptMiss(format!(
                        "dialogue {:?} has no reply #{index}",
                        dialogue.key
                    ))
                })
            }
        }
    }
}

impl Backend for ScriptedBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.lookup(request).map(ScriptReply::to_response)
    }
}
