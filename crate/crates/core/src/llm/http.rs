//! Chat-completion provider over HTTPS (OpenAI-compatible wire format).

use std::time::Duration;

use async_trait::async_trait;
use serde::Serialize;

use super::{ChatMessage, ChatRequest, LlmClient, LlmError};

pub struct HttpLlmClient {
    http: reqwest::Client,
    endpoint: String,
    api_key: Option<String>,
    model: String,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

impl HttpLlmClient {
    /// `endpoint` is the full completions URL, e.g. `http://localhost:11434/v1/chat/completions`.
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>, timeout: Duration) -> Result<Self, LlmError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(HttpLlmClient {
            http,
            endpoint: endpoint.into(),
            api_key,
            model: model.into(),
        })
    }
}

#[async_trait]
impl LlmClient for HttpLlmClient {
    async fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let body = WireRequest {
            model: request.model.as_deref().unwrap_or(&self.model),
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout(Duration::ZERO)
            } else {
                LlmError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let message = resp.text().await.unwrap_or_default();
            return Err(LlmError::Provider {
                status: Some(status.as_u16()),
                message,
                transient: status.as_u16() == 429 || status.is_server_error(),
            });
        }
        let json: serde_json::Value = resp.json().await.map_err(|e| LlmError::Provider {
            status: Some(status.as_u16()),
            message: format!("unreadable response body: {e}"),
            transient: false,
        })?;
        let text = json
            .pointer("/choices/0/message/content")
            .or_else(|| json.pointer("/choices/0/text"))
            .and_then(|v| v.as_str())
            .ok_or_else(|| LlmError::Provider {
                status: Some(status.as_u16()),
                message: "response has no choices[0] text".into(),
                transient: false,
            })?;
        Ok(text.to_string())
    }
}
