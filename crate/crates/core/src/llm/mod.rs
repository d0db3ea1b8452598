//! Chat-completion gateway: request types, retry/timeout policy, JSON extraction.

mod http;
mod scripted;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub use http::HttpLlmClient;
pub use scripted::{MatchSpec, Script, ScriptError, ScriptedClient, ScriptedFailure};

use crate::trace::{CallRecord, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Name of the calling tool, used for tracing and scripted lookup.
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl ChatRequest {
    pub fn new(tag: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            messages,
            temperature: 0.0,
            max_tokens: 1024,
            tag: tag.into(),
            model: None,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let bad = |m: &str| Err(LlmError::InvalidRequest(m.to_string()));
        match self.messages.first() {
            None => return bad("messages must be non-empty"),
            Some(m) if m.role == Role::Assistant => return bad("first message must be system or user"),
            _ => {}
        }
        if self.messages.iter().any(|m| m.content.trim().is_empty()) {
            return bad("message content must be non-empty");
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        Ok(())
    }

    /// All message contents joined, which is what scripts match against.
    pub fn transcript(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("completion timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Provider {
        status: Option<u16>,
        message: String,
        transient: bool,
    },
    #[error("provider returned an empty completion")]
    EmptyCompletion,
    #[error("no script matches tag {tag:?}")]
    NoScript { tag: String },
    #[error("completion does not match schema {schema}: {detail}")]
    Schema { schema: String, detail: String },
}

impl LlmError {
    pub fn is_transient(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Provider { transient, .. } => *transient,
            _ => false,
        }
    }
}

#[async_trait]
pub trait LlmClient: Send + Sync {
    async fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;

    /// Reported by the service health endpoint.
    fn mode(&self) -> &'static str {
        "configured"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    /// Retries after the first attempt, for transient failures only.
    pub retries: u32,
    pub backoff_ms: u64,
    /// Bound on one gateway call including all retries.
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    /// Per-tool model override, keyed by request tag.
    pub model_overrides: BTreeMap<String, String>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            retries: 2,
            backoff_ms: 250,
            timeout_ms: 60_000,
            max_in_flight: 8,
            model_overrides: BTreeMap::new(),
        }
    }
}

/// Shared entry point for every LLM-backed tool.
#[derive(Clone)]
pub struct Gateway {
    client: Arc<dyn LlmClient>,
    config: Arc<GatewayConfig>,
    in_flight: Arc<Semaphore>,
}

impl Gateway {
    pub fn new(client: Arc<dyn LlmClient>, config: GatewayConfig) -> Self {
        let permits = config.max_in_flight.max(1);
        Gateway {
            client,
            config: Arc::new(config),
            in_flight: Arc::new(Semaphore::new(permits)),
        }
    }

    pub fn mode(&self) -> &'static str {
        self.client.mode()
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// One completion with retries; the call is recorded on `trace` exactly once.
    pub async fn complete(&self, mut request: ChatRequest, trace: &mut Trace) -> Result<String, LlmError> {
        if let Some(model) = self.config.model_overrides.get(&request.tag) {
            request.model = Some(model.clone());
        }
        let started = Instant::now();
        let retries = AtomicU32::new(0);
        let result = self.complete_with_retries(&request, &retries).await;
        trace.record_call(CallRecord {
            tag: request.tag.clone(),
            retries: retries.load(Ordering::Relaxed),
            latency_ms: started.elapsed().as_millis() as u64,
            ok: result.is_ok(),
            error: result.as_ref().err().map(ToString::to_string),
        });
        result
    }

    async fn complete_with_retries(&self, request: &ChatRequest, retries: &AtomicU32) -> Result<String, LlmError> {
        request.validate()?;
        let _permit = self.in_flight.acquire().await.expect("semaphore never closed");
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let attempts = async {
            loop {
                match self.client.complete(request).await {
                    Ok(text) if text.trim().is_empty() => return Err(LlmError::EmptyCompletion),
                    Ok(text) => return Ok(text),
                    Err(e) if e.is_transient() && retries.load(Ordering::Relaxed) < self.config.retries => {
                        let n = retries.fetch_add(1, Ordering::Relaxed);
                        let delay = self.config.backoff_ms.saturating_mul(1u64 << n.min(16));
                        tokio::time::sleep(Duration::from_millis(delay)).await;
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        tokio::time::timeout(timeout, attempts)
            .await
            .unwrap_or(Err(LlmError::Timeout(timeout)))
    }

    /// Completion parsed as `T`. On a parse failure the reply is shown back with
    /// one repair instruction; a second failure is a schema error.
    pub async fn complete_json<T: DeserializeOwned>(
        &self,
        request: ChatRequest,
        schema: &str,
        trace: &mut Trace,
    ) -> Result<T, LlmError> {
        let first = self.complete(request.clone(), trace).await?;
        let first_err = match parse_json::<T>(&first) {
            Ok(v) => return Ok(v),
            Err(e) => e,
        };
        let mut repair = request;
        repair.messages.push(ChatMessage::assistant(first));
        repair.messages.push(ChatMessage::user(format!(
            "Your previous reply could not be parsed ({first_err}). Return only valid JSON."
        )));
        let second = self.complete(repair, trace).await?;
        parse_json::<T>(&second).map_err(|detail| LlmError::Schema {
            schema: schema.to_string(),
            detail,
        })
    }
}

/// Parses `text` as JSON, else the first balanced `{...}` span that parses.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    let mut last_err = match serde_json::from_str::<T>(text.trim()) {
        Ok(v) => return Ok(v),
        Err(e) => e.to_string(),
    };
    for candidate in balanced_objects(text) {
        match serde_json::from_str::<T>(candidate) {
            Ok(v) => return Ok(v),
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(last_err)
}

/// Balanced-brace spans starting at each `{`, in order of their opening brace.
/// String literals (with escapes) are skipped while counting depth.
pub fn balanced_objects(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    for (start, _) in text.match_indices('{') {
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(start) {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        out.push(&text[start..=i]);
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    out
}
