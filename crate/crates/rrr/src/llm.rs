//! Chat-completions client used for the reader and the frozen rewriter.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::retry::{with_backoff, Attempt, Backoff, RateLimiter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// A single-turn request carrying the whole prompt as one user message.
    pub fn single(model: &str, prompt: String, temperature: f64, max_tokens: u32) -> Self {
        Self { model: model.to_string(), messages: vec![Message { role: "user".into(), content: prompt }], temperature, max_tokens }
    }

    pub fn prompt(&self) -> &str {
        self.messages.first().map_or("", |m| m.content.as_str())
    }

    fn check(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::Invalid("messages must be non-empty"));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::Invalid("temperature must be >= 0"));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::Invalid("max_tokens must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    Invalid(&'static str),
    #[error("authentication failed (HTTP {status}): {message}")]
    Auth { status: u16, message: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("malformed completion response: {0}")]
    Malformed(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("{0}")]
    Mock(String),
}

pub trait ChatModel: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

/// Pulls `error.message` out of a provider error body, else the raw body.
fn provider_message(body: &str) -> String {
    serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(|m| m.as_str()).map(str::to_string))
        .unwrap_or_else(|| body.trim().to_string())
}

pub fn parse_completion(body: &str) -> Result<String, LlmError> {
    let resp: ChatResponse = serde_json::from_str(body).map_err(|e| LlmError::Malformed(e.to_string()))?;
    resp.choices.into_iter().next().map(|c| c.message.content).ok_or_else(|| LlmError::Malformed("no choices".into()))
}

pub struct HttpChatClient {
    http: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    backoff: Backoff,
    limiter: RateLimiter,
}

impl HttpChatClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, backoff: Backoff, requests_per_second: f64) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("HTTP client builds with static settings");
        Self { http, endpoint: endpoint.into(), api_key, backoff, limiter: RateLimiter::per_second(requests_per_second) }
    }
}

impl ChatModel for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.check()?;
        let mut last_attempt = 0;
        let result = with_backoff(&self.backoff, |attempt| {
            last_attempt = attempt;
            self.limiter.acquire();
            let mut req = self.http.post(&self.endpoint).json(request);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => return Attempt::Transient(LlmError::Transport(e.to_string())),
            };
            let status = resp.status().as_u16();
            let body = match resp.text() {
                Ok(b) => b,
                Err(e) => return Attempt::Transient(LlmError::Transport(e.to_string())),
            };
            match status {
                200..=299 => match parse_completion(&body) {
                    Ok(t) => Attempt::Done(t),
                    Err(e) => Attempt::Fatal(e),
                },
                401 | 403 => Attempt::Fatal(LlmError::Auth { status, message: provider_message(&body) }),
                429 => Attempt::Transient(LlmError::RateLimited { attempts: 0 }),
                s if s >= 500 => Attempt::Transient(LlmError::Status { status, body: provider_message(&body) }),
                _ => Attempt::Fatal(LlmError::Status { status, body: provider_message(&body) }),
            }
        });
        result.map_err(|e| match e {
            LlmError::RateLimited { .. } => LlmError::RateLimited { attempts: last_attempt + 1 },
            other => other,
        })
    }
}
