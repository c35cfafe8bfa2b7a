//! OpenAI-compatible chat-completions client.
//!
//! Endpoint and key come from `CONSILIUM_API_BASE` / `CONSILIUM_API_KEY`.
//! Transient transport failures (connect errors, 429, 5xx) are retried with
//! capped exponential backoff, 3 attempts total. The request's `max_tokens`
//! is sent exactly as built by the engine; this client never alters it.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::backend::{estimate_tokens, BackendError, ChatBackend, ChatRequest, ChatResponse};

pub const ENV_API_BASE: &str = "CONSILIUM_API_BASE";
pub const ENV_API_KEY: &str = "CONSILIUM_API_KEY";

const MAX_ATTEMPTS: u32 = 3;
const BASE_BACKOFF: Duration = Duration::from_millis(500);
const MAX_BACKOFF: Duration = Duration::from_secs(4);
const REQUEST_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug)]
pub struct HttpBackend {
    base_url: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        let base_url = base_url.into().trim_end_matches('/').to_string();
        Self {
            base_url,
            api_key: api_key.into(),
            client: reqwest::blocking::Client::builder()
                .timeout(REQUEST_TIMEOUT)
                .build()
                .expect("reqwest client"),
        }
    }

    /// Builds a backend from `CONSILIUM_API_BASE` and `CONSILIUM_API_KEY`.
    pub fn from_env() -> Result<Self, BackendError> {
        let base = std::env::var(ENV_API_BASE).map_err(|_| BackendError::MissingEnv(ENV_API_BASE))?;
        let key = std::env::var(ENV_API_KEY).map_err(|_| BackendError::MissingEnv(ENV_API_KEY))?;
        Ok(Self::new(base, key))
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }

    fn send_once(&self, request: &ChatRequest) -> Result<ChatResponse, Attempt> {
        let payload = build_payload(request);
        let response = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.api_key)
            .json(&payload)
            .send()
            .map_err(|e| Attempt::Retryable(e.to_string()))?;

        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            let body = response.text().unwrap_or_default();
            return Err(Attempt::Fatal(BackendError::Auth(truncate(&body))));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retryable(format!("status {status}")));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(Attempt::Fatal(BackendError::Provider {
                status: status.as_u16(),
                message: truncate(&body),
            }));
        }

        let body: CompletionBody = response
            .json()
            .map_err(|e| Attempt::Fatal(BackendError::MalformedResponse(e.to_string())))?;
        parse_body(body, request).map_err(Attempt::Fatal)
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut last_error = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                let backoff = BASE_BACKOFF
                    .saturating_mul(2u32.saturating_pow(attempt - 1))
                    .min(MAX_BACKOFF);
                log::debug!("retrying after {backoff:?}: {last_error}");
                std::thread::sleep(backoff);
            }
            match self.send_once(request) {
                Ok(response) => return Ok(response),
                Err(Attempt::Fatal(err)) => return Err(err),
                Err(Attempt::Retryable(detail)) => last_error = detail,
            }
        }
        Err(BackendError::RetriesExhausted {
            attempts: MAX_ATTEMPTS,
            last_error,
        })
    }
}

enum Attempt {
    Retryable(String),
    Fatal(BackendError),
}

/// Wire shape of the chat-completions request body.
pub fn build_payload(request: &ChatRequest) -> serde_json::Value {
    let mut messages = vec![json!({"role": "system", "content": request.system_text})];
    for m in &request.user_messages {
        messages.push(json!({"role": m.speaker.wire_name(), "content": m.text}));
    }
    json!({
        "model": request.model_name,
        "messages": messages,
        "max_tokens": request.max_tokens,
        "temperature": request.temperature,
    })
}

#[derive(Debug, Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

fn parse_body(body: CompletionBody, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
    let text = body
        .choices
        .first()
        .and_then(|c| c.message.content.clone())
        .ok_or_else(|| BackendError::MalformedResponse("no choices[0].message.content".into()))?;
    Ok(match body.usage {
        Some(usage) => ChatResponse {
            text,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            usage_estimated: false,
        },
        // Usage accounting must never silently vanish: estimate and flag.
        None => {
            let prompt_tokens = estimate_tokens(&request.full_text());
            let completion_tokens = estimate_tokens(&text);
            ChatResponse {
                text,
                prompt_tokens,
                completion_tokens,
                usage_estimated: true,
            }
        }
    })
}

fn truncate(body: &str) -> String {
    body.chars().take(300).collect()
}
