//! Thin HTTP client for the research assistant service.

use std::collections::VecDeque;
use std::pin::Pin;

use futures::stream::{self, BoxStream};
use futures::{Stream, StreamExt};
use reqwest::{RequestBuilder, Response, StatusCode};
use serde::{Deserialize, Serialize};
use serde_json::json;

use sciqa_core::index::ShardSummary;
use sciqa_core::orchestrator::Session;
use sciqa_core::trace::TraceEvent;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("service answered {status}: {message}")]
    Status { status: StatusCode, message: String },
    #[error("malformed event stream: {0}")]
    Stream(String),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
            ClientError::Stream(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(default)]
    pub shards: Option<usize>,
    #[serde(default)]
    pub llm: Option<String>,
}

impl Health {
    pub fn ready(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Deserialize)]
struct Created {
    session_id: String,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

pub type EventStream = Pin<Box<dyn Stream<Item = Result<TraceEvent, ClientError>> + Send>>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: impl Into<String>, token: Option<String>) -> Self {
        Client {
            base: base_url.into().trim_end_matches('/').to_string(),
            token,
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn authed(&self, req: RequestBuilder) -> RequestBuilder {
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    async fn checked(resp: Response) -> Result<Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Status { status, message })
    }

    /// Health is readable while the service is still starting (503).
    pub async fn health(&self) -> Result<Health, ClientError> {
        let resp = self.http.get(format!("{}/v1/health", self.base)).send().await?;
        if resp.status() == StatusCode::SERVICE_UNAVAILABLE {
            return Ok(resp.json().await?);
        }
        Ok(Self::checked(resp).await?.json().await?)
    }

    pub async fn shards(&self) -> Result<Vec<ShardSummary>, ClientError> {
        let req = self.authed(self.http.get(format!("{}/v1/shards", self.base)));
        Ok(Self::checked(req.send().await?).await?.json().await?)
    }

    pub async fn create_session(&self) -> Result<String, ClientError> {
        let req = self.authed(self.http.post(format!("{}/v1/sessions", self.base)));
        let created: Created = Self::checked(req.send().await?).await?.json().await?;
        Ok(created.session_id)
    }

    pub async fn session(&self, session_id: &str) -> Result<Session, ClientError> {
        let req = self.authed(self.http.get(format!("{}/v1/sessions/{session_id}", self.base)));
        Ok(Self::checked(req.send().await?).await?.json().await?)
    }

    /// Posts a message and yields trace events until the service closes the stream.
    pub async fn send_message(&self, session_id: &str, text: &str) -> Result<EventStream, ClientError> {
        let req = self
            .authed(self.http.post(format!("{}/v1/sessions/{session_id}/messages", self.base)))
            .json(&json!({ "text": text }));
        let resp = Self::checked(req.send().await?).await?;
        Ok(parse_sse(resp.bytes_stream().map(|c| c.map(|b| b.to_vec())).boxed()))
    }

    /// Posts a message and collects the whole trace.
    pub async fn ask(&self, session_id: &str, text: &str) -> Result<Vec<TraceEvent>, ClientError> {
        let mut events = self.send_message(session_id, text).await?;
        let mut out = Vec::new();
        while let Some(ev) = events.next().await {
            out.push(ev?);
        }
        Ok(out)
    }
}

struct SseState {
    body: BoxStream<'static, Result<Vec<u8>, reqwest::Error>>,
    buf: Vec<u8>,
    ready: VecDeque<TraceEvent>,
    done: bool,
}

fn parse_block(block: &str) -> Result<Option<TraceEvent>, ClientError> {
    let mut data = Vec::new();
    for line in block.lines() {
        if let Some(d) = line.strip_prefix("data:") {
            data.push(d.strip_prefix(' ').unwrap_or(d));
        }
    }
    if data.is_empty() {
        return Ok(None);
    }
    serde_json::from_str(&data.join("\n"))
        .map(Some)
        .map_err(|e| ClientError::Stream(e.to_string()))
}

fn take_blocks(state: &mut SseState) -> Result<(), ClientError> {
    while let Some(pos) = state.buf.windows(2).position(|w| w == b"\n\n") {
        let block: Vec<u8> = state.buf.drain(..pos + 2).collect();
        let text = String::from_utf8(block).map_err(|e| ClientError::Stream(e.to_string()))?;
        if let Some(ev) = parse_block(&text.replace("\r\n", "\n"))? {
            state.ready.push_back(ev);
        }
    }
    Ok(())
}

fn parse_sse(body: BoxStream<'static, Result<Vec<u8>, reqwest::Error>>) -> EventStream {
    let state = SseState {
        body,
        buf: Vec::new(),
        ready: VecDeque::new(),
        done: false,
    };
    Box::pin(stream::unfold(state, |mut state| async move {
        loop {
            if let Some(ev) = state.ready.pop_front() {
                return Some((Ok(ev), state));
            }
            if state.done {
                return None;
            }
            match state.body.next().await {
                Some(Ok(chunk)) => {
                    state.buf.extend_from_slice(&chunk);
                    if let Err(e) = take_blocks(&mut state) {
                        state.done = true;
                        return Some((Err(e), state));
                    }
                }
                Some(Err(e)) => {
                    state.done = true;
                    return Some((Err(e.into()), state));
                }
                None => {
                    state.done = true;
                    state.buf.extend_from_slice(b"\n\n");
                    if let Err(e) = take_blocks(&mut state) {
                        return Some((Err(e), state));
                    }
                }
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunks(parts: &[&str]) -> BoxStream<'static, Result<Vec<u8>, reqwest::Error>> {
        let owned: Vec<Result<Vec<u8>, reqwest::Error>> = parts.iter().map(|p| Ok(p.as_bytes().to_vec())).collect();
        stream::iter(owned).boxed()
    }

    #[tokio::test]
    async fn events_split_across_chunks_and_keepalives() {
        let line = r#"{"seq":0,"kind":"plan_chosen","session_id":"s","turn":0,"payload":{},"ts":"2024-01-01T00:00:00Z"}"#;
        let (a, b) = line.split_at(30);
        let parts = [":\n\n", "event: plan_chosen\ndata: ", a, b, "\n\n:\n\n"];
        let events: Vec<_> = parse_sse(chunks(&parts)).collect().await;
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].as_ref().unwrap().seq, 0);
    }

    #[tokio::test]
    async fn garbage_data_is_an_error() {
        let events: Vec<_> = parse_sse(chunks(&["event: x\ndata: nope\n\n"])).collect().await;
        assert!(matches!(events[0], Err(ClientError::Stream(_))));
    }
}
