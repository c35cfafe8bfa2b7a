//! Abstracts "send a chat, get a completion with token usage" over two
//! implementations: an OpenAI-compatible HTTP client (see [`crate::http`],
//! behind the `http` feature) and the deterministic [`ScriptedBackend`] used
//! by tests and offline runs.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Message author within a single role's conversation history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Assistant,
}

impl Speaker {
    pub fn wire_name(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub speaker: Speaker,
    pub text: String,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::Assistant,
            text: text.into(),
        }
    }
}

/// One request against a chat backend: a system message plus the requesting
/// role's own conversation so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub system_text: String,
    pub user_messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ChatRequest {
    /// Concatenation of system text and every message, in order. Scripted
    /// match rules are applied against this text.
    pub fn full_text(&self) -> String {
        let mut out = self.system_text.clone();
        for m in &self.user_messages {
            out.push('\n');
            out.push_str(&m.text);
        }
        out
    }
}

/// One completion with its usage counters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// True when the backend did not report usage and the counts come from
    /// [`estimate_tokens`].
    #[serde(default)]
    pub usage_estimated: bool,
}

/// Whitespace-token heuristic used whenever a backend omits usage counters:
/// a token is one whitespace-separated word. Deterministic, documented,
/// always flagged via `usage_estimated`.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("provider error (status {status}): {message}")]
    Provider { status: u16, message: String },
    #[error("transport failure after {attempts} attempts: {last_error}")]
    RetriesExhausted { attempts: u32, last_error: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("no script rule matches the request")]
    NoScriptMatch,
    #[error("script rule '{rule}' has no replies left")]
    ScriptExhausted { rule: String },
    #[error("missing environment variable {0}")]
    MissingEnv(&'static str),
    #[error("cannot read script '{path}': {detail}")]
    ScriptIo { path: String, detail: String },
    #[error("malformed script '{path}': {detail}")]
    ScriptFormat { path: String, detail: String },
}

/// A chat completion backend. Implementations must tolerate concurrent
/// `complete` calls; each single discussion issues them sequentially.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Component-wise token sums over a set of responses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

impl UsageTotals {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
            total_tokens: prompt_tokens + completion_tokens,
        }
    }

    pub fn add(&mut self, prompt_tokens: u64, completion_tokens: u64) {
        self.prompt_tokens += prompt_tokens;
        self.completion_tokens += completion_tokens;
        self.total_tokens += prompt_tokens + completion_tokens;
    }

    pub fn merge(&mut self, other: &UsageTotals) {
        self.add(other.prompt_tokens, other.completion_tokens);
    }
}

/// Sums prompt and completion tokens over responses; total = prompt + completion.
pub fn usage_total(responses: &[ChatResponse]) -> UsageTotals {
    let mut totals = UsageTotals::default();
    for r in responses {
        totals.add(r.prompt_tokens, r.completion_tokens);
    }
    totals
}

/// One reply in a script: either bare text (usage estimated) or text with
/// explicit usage counters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptReply {
    Text(String),
    Detailed {
        text: String,
        prompt_tokens: u64,
        completion_tokens: u64,
    },
}

/// Script file entry: requests whose full text contains `match` consume
/// `replies` front to back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: String,
    pub replies: Vec<ScriptReply>,
}

struct RuleState {
    matcher: String,
    queue: Mutex<VecDeque<ScriptReply>>,
}

/// Deterministic chat-backend test double driven by a match -> reply-queue
/// script. The first rule (in script order) whose substring matches the
/// request's full text answers; its replies are consumed in order and an
/// exhausted queue is an error surfaced to the caller.
pub struct ScriptedBackend {
    rules: Vec<RuleState>,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        let rules = rules
            .into_iter()
            .map(|r| RuleState {
                matcher: r.matcher,
                queue: Mutex::new(r.replies.into()),
            })
            .collect();
        Self {
            rules,
            calls: AtomicU64::new(0),
        }
    }

    /// Loads a script file: a JSON list of `{match, replies}` objects.
    pub fn from_script_file(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path).map_err(|e| BackendError::ScriptIo {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let rules: Vec<ScriptRule> =
            serde_json::from_str(&text).map_err(|e| BackendError::ScriptFormat {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        Ok(Self::new(rules))
    }

    /// Builder-style rule with plain-text replies, for tests.
    pub fn rule(mut self, matcher: &str, replies: &[&str]) -> Self {
        self.rules.push(RuleState {
            matcher: matcher.to_string(),
            queue: Mutex::new(
                replies
                    .iter()
                    .map(|r| ScriptReply::Text((*r).to_string()))
                    .collect(),
            ),
        });
        self
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    /// Number of completions served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let full_text = request.full_text();
        let rule = self
            .rules
            .iter()
            .find(|r| full_text.contains(&r.matcher))
            .ok_or(BackendError::NoScriptMatch)?;
        let reply = rule
            .queue
            .lock()
            .expect("script queue poisoned")
            .pop_front()
            .ok_or_else(|| BackendError::ScriptExhausted {
                rule: rule.matcher.clone(),
            })?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(match reply {
            ScriptReply::Text(text) => {
                let prompt_tokens = estimate_tokens(&full_text);
                let completion_tokens = estimate_tokens(&text);
                ChatResponse {
                    text,
                    prompt_tokens,
                    completion_tokens,
                    usage_estimated: true,
                }
            }
            ScriptReply::Detailed {
                text,
                prompt_tokens,
                completion_tokens,
            } => ChatResponse {
                text,
                prompt_tokens,
                completion_tokens,
                usage_estimated: false,
            },
        })
    }
}
