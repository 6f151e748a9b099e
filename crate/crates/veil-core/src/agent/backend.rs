//! Backend abstraction and the HTTP chat-completion client.
//!
//! The wire format is the common chat-completion JSON shape (message list
//! in, text out), so any compatible gateway works; model, endpoint, and key
//! environment variable are configuration data.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AgentSpec, Observation};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("API key environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("transport failure: {detail}")]
    Transport { detail: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed completion response: {detail}")]
    MalformedResponse { detail: String },
    #[error("scripted profile has no rule for task `{task}`")]
    UnsupportedTask { task: String },
}

/// Transport configuration for an HTTP chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Full URL of the completion endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Transport-level retries on failures and retryable statuses.
    #[serde(default = "default_transport_retries")]
    pub max_retries: u32,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_transport_retries() -> u32 {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

/// Feedback attached to a retry after a rejected response.
#[derive(Debug, Clone, PartialEq)]
pub enum Feedback {
    SchemaError { detail: String },
    TooShort { min: usize },
    ConstraintViolation { achievable: f64, message: String },
}

/// Everything a backend may look at for one elicitation attempt.
pub struct BackendRequest<'a> {
    pub agent: &'a AgentSpec,
    pub messages: &'a [ChatMessage],
    pub schema_kind: &'static str,
    pub observation: &'a Observation,
    pub feedback: Option<&'a Feedback>,
    pub attempt: u32,
}

/// A source of raw responses. Implementations must be shareable across
/// groups; any internal state is synchronized.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &BackendRequest<'_>) -> Result<String, BackendError>;

    /// Binding identifier recorded in agent specs and transcripts.
    fn id(&self) -> String;
}

/// Counting semaphore bounding global in-flight backend requests.
pub struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Semaphore {
        assert!(permits > 0, "semaphore needs at least one permit");
        Semaphore {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

pub struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock().unwrap();
        *permits += 1;
        self.semaphore.available.notify_one();
    }
}

/// Chat-completion client for any endpoint speaking the common JSON shape.
pub struct HttpBackend {
    config: BackendConfig,
    agent: ureq::Agent,
    permits: Option<Arc<Semaphore>>,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> HttpBackend {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build();
        HttpBackend {
            config,
            agent,
            permits: None,
        }
    }

    /// Caps concurrent in-flight requests across all groups.
    pub fn with_inflight_cap(mut self, permits: Arc<Semaphore>) -> HttpBackend {
        self.permits = Some(permits);
        self
    }

    fn api_key(&self) -> Result<String, BackendError> {
        std::env::var(&self.config.api_key_env)
            .map_err(|_| BackendError::MissingApiKey(self.config.api_key_env.clone()))
    }

    fn send_once(
        &self,
        key: &str,
        body: &serde_json::Value,
    ) -> Result<String, BackendError> {
        let _guard = self.permits.as_ref().map(|p| p.acquire());
        let response = self
            .agent
            .post(&self.config.endpoint)
            .set("Authorization", &format!("Bearer {key}"))
            .set("Content-Type", "application/json")
            .send_string(&body.to_string());
        match response {
            Ok(resp) => {
                let text = resp.into_string().map_err(|e| BackendError::Transport {
                    detail: e.to_string(),
                })?;
                extract_completion_text(&text)
            }
            Err(ureq::Error::Status(status, resp)) => Err(BackendError::Http {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => Err(BackendError::Transport {
                detail: t.to_string(),
            }),
        }
    }
}

fn retryable(error: &BackendError) -> bool {
    match error {
        BackendError::Transport { .. } => true,
        BackendError::Http { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

fn extract_completion_text(body: &str) -> Result<String, BackendError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedResponse {
            detail: e.to_string(),
        })?;
    value
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| BackendError::MalformedResponse {
            detail: "missing choices[0].message.content".into(),
        })
}

impl Backend for HttpBackend {
    fn complete(&self, request: &BackendRequest<'_>) -> Result<String, BackendError> {
        let key = self.api_key()?;
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| serde_json::json!({"role": m.role, "content": m.content}))
            .collect();
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.agent.temperature,
        });
        let mut last = None;
        for _ in 0..=self.config.max_retries {
            match self.send_once(&key, &body) {
                Ok(text) => return Ok(text),
                Err(e) if retryable(&e) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or(BackendError::Transport {
            detail: "no attempt made".into(),
        }))
    }

    fn id(&self) -> String {
        format!("http:{}", self.config.model)
    }
}

/// Deterministic backend returning pre-programmed raw responses in order.
/// The last response repeats once the sequence is exhausted. Used to drive
/// retry paths and adversarial parses in tests.
pub struct SequenceBackend {
    responses: Mutex<VecDeque<String>>,
    last: Mutex<Option<String>>,
    calls: AtomicU32,
}

impl SequenceBackend {
    pub fn new<I, S>(responses: I) -> SequenceBackend
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        SequenceBackend {
            responses: Mutex::new(responses.into_iter().map(Into::into).collect()),
            last: Mutex::new(None),
            calls: AtomicU32::new(0),
        }
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for SequenceBackend {
    fn complete(&self, _request: &BackendRequest<'_>) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut queue = self.responses.lock().unwrap();
        if let Some(next) = queue.pop_front() {
            *self.last.lock().unwrap() = Some(next.clone());
            return Ok(next);
        }
        self.last
            .lock()
            .unwrap()
            .clone()
            .ok_or(BackendError::Transport {
                detail: "sequence backend has no responses".into(),
            })
    }

    fn id(&self) -> String {
        "mock:sequence".into()
    }
}
