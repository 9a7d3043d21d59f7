//! Chat-completion backends and the retrying `complete` call.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{BackendKind, CellKey, RunConfig};

/// Coarse failure category recorded in failure rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Transport,
    HttpStatus,
    Timeout,
    /// The server answered but the body was not a completion.
    Protocol,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{class:?}{}: {message}", status.map(|s| format!(" {s}")).unwrap_or_default())]
pub struct CompletionError {
    pub class: ErrorClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    pub message: String,
}

impl CompletionError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        Self {
            class,
            status: None,
            message: message.into(),
        }
    }

    pub fn status(status: u16, message: impl Into<String>) -> Self {
        Self {
            class: ErrorClass::HttpStatus,
            status: Some(status),
            message: message.into(),
        }
    }

    /// Transport failures, timeouts, 429 and 5xx are worth another try.
    pub fn is_retryable(&self) -> bool {
        match self.class {
            ErrorClass::Transport | ErrorClass::Timeout => true,
            ErrorClass::HttpStatus => matches!(self.status, Some(429) | Some(500..=599)),
            ErrorClass::Protocol => false,
        }
    }
}

/// One chat request: a system and a user message for a model.
#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub model: &'a str,
    pub system: &'a str,
    pub user: &'a str,
    /// The plan cell being served, when the request comes from a plan.
    pub cell: Option<&'a CellKey>,
}

pub trait ChatBackend: Send + Sync {
    /// Sends one request and returns the assistant text.
    fn send(&self, request: &ChatRequest<'_>, config: &RunConfig) -> Result<String, CompletionError>;
}

/// Backend defined by a closure; handy for scripted and stub backends.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest<'_>) -> Result<String, CompletionError> + Send + Sync,
{
    fn send(&self, request: &ChatRequest<'_>, _config: &RunConfig) -> Result<String, CompletionError> {
        (self.0)(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub error: CompletionError,
    pub attempts: u32,
}

/// Sends `request`, retrying retryable failures up to `retry_limit` times
/// with exponential backoff starting at `backoff_base_ms`.
pub fn complete(backend: &dyn ChatBackend, request: &ChatRequest<'_>, config: &RunConfig) -> Result<Completion, Failure> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match backend.send(request, config) {
            Ok(text) => return Ok(Completion { text, attempts }),
            Err(error) if error.is_retryable() && attempts <= config.retry_limit => {
                let delay = config.backoff_base_ms.saturating_mul(1u64 << (attempts - 1).min(16));
                log::debug!("{}: attempt {attempts} failed ({error}); retrying in {delay} ms", request.model);
                std::thread::sleep(Duration::from_millis(delay));
            }
            Err(error) => return Err(Failure { error, attempts }),
        }
    }
}

/// JSON body for a chat-completion request.
pub fn request_body(kind: BackendKind, request: &ChatRequest<'_>, config: &RunConfig) -> Value {
    let mut body = json!({
        "model": request.model,
        "messages": [
            {"role": "system", "content": request.system},
            {"role": "user", "content": request.user},
        ],
        "max_tokens": config.max_response_tokens,
        "stream": false,
    });
    if kind == BackendKind::LocalServer {
        body["options"] = json!({
            "num_ctx": config.context_window_tokens,
            "num_predict": config.max_response_tokens,
        });
    }
    body
}

/// Assistant text from an OpenAI-style (`choices[0].message.content`) or
/// Ollama-style (`message.content`) response.
pub fn extract_content(body: &Value) -> Option<String> {
    body.pointer("/choices/0/message/content")
        .or_else(|| body.pointer("/message/content"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

/// OpenAI-compatible chat-completion endpoint over HTTP.
pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    kind: BackendKind,
}

/// Path appended to a backend's base URL.
pub const CHAT_COMPLETIONS_PATH: &str = "/v1/chat/completions";

impl HttpBackend {
    pub fn new(kind: BackendKind, base_url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: format!("{}{CHAT_COMPLETIONS_PATH}", base_url.trim_end_matches('/')),
            api_key,
            kind,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

fn classify(err: ureq::Error) -> CompletionError {
    match err {
        ureq::Error::Timeout(t) => CompletionError::new(ErrorClass::Timeout, t.to_string()),
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => {
            CompletionError::new(ErrorClass::Timeout, e.to_string())
        }
        ureq::Error::StatusCode(s) => CompletionError::status(s, "error status"),
        other => CompletionError::new(ErrorClass::Transport, other.to_string()),
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest<'_>, config: &RunConfig) -> Result<String, CompletionError> {
        let body = request_body(self.kind, request, config);
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = req.send_json(&body).map_err(classify)?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(classify)?;
        if !(200..300).contains(&status) {
            let snippet: String = text.chars().take(200).collect();
            return Err(CompletionError::status(status, snippet));
        }
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| CompletionError::new(ErrorClass::Protocol, format!("response is not JSON: {e}")))?;
        extract_content(&parsed)
            .ok_or_else(|| CompletionError::new(ErrorClass::Protocol, "response carries no assistant message"))
    }
}
