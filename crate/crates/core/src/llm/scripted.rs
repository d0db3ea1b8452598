//! Deterministic client answering from a script file, for tests and offline runs.
//!
//! A script file is a JSON array (or `{"scripts": [...]}`) of entries:
//!
//! ```json
//! {"tag": "rewrite", "match": "its variants", "response": "{...}"}
//! {"tag": "plan", "match": ["PPO", "latest"], "response": "{...}"}
//! {"tag": "generate", "error": "timeout"}
//! ```
//!
//! The first entry whose tag equals the request tag (or is `"*"`) and whose
//! match substrings all occur in the request transcript wins. An absent or
//! empty `match` matches any request with that tag.

use std::path::Path;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{ChatRequest, LlmClient, LlmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatchSpec {
    One(String),
    All(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptedFailure {
    Timeout,
    Transport,
    Provider,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub tag: String,
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub matches: Option<MatchSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ScriptedFailure>,
}

impl Script {
    pub fn reply(tag: &str, matches: &str, response: impl Into<String>) -> Self {
        Script {
            tag: tag.into(),
            matches: (!matches.is_empty()).then(|| MatchSpec::One(matches.into())),
            response: Some(response.into()),
            error: None,
        }
    }

    pub fn reply_all(tag: &str, matches: &[&str], response: impl Into<String>) -> Self {
        Script {
            tag: tag.into(),
            matches: Some(MatchSpec::All(matches.iter().map(|s| s.to_string()).collect())),
            response: Some(response.into()),
            error: None,
        }
    }

    pub fn fail(tag: &str, matches: &str, failure: ScriptedFailure) -> Self {
        Script {
            tag: tag.into(),
            matches: (!matches.is_empty()).then(|| MatchSpec::One(matches.into())),
            response: None,
            error: Some(failure),
        }
    }

    fn applies(&self, request: &ChatRequest, transcript: &str) -> bool {
        if self.tag != "*" && self.tag != request.tag {
            return false;
        }
        match &self.matches {
            None => true,
            Some(MatchSpec::One(s)) => transcript.contains(s.as_str()),
            Some(MatchSpec::All(all)) => all.iter().all(|s| transcript.contains(s.as_str())),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid script {path}: {detail}")]
    Parse { path: String, detail: String },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    List(Vec<Script>),
    Wrapped { scripts: Vec<Script> },
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedClient {
    scripts: Vec<Script>,
}

impl ScriptedClient {
    pub fn new(scripts: Vec<Script>) -> Self {
        ScriptedClient { scripts }
    }

    pub fn from_json(raw: &str) -> Result<Self, ScriptError> {
        let file: ScriptFile = serde_json::from_str(raw).map_err(|e| ScriptError::Parse {
            path: "<inline>".into(),
            detail: e.to_string(),
        })?;
        Ok(Self::new(match file {
            ScriptFile::List(s) | ScriptFile::Wrapped { scripts: s } => s,
        }))
    }

    pub fn from_file(path: &Path) -> Result<Self, ScriptError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&raw).map_err(|e| match e {
            ScriptError::Parse { detail, .. } => ScriptError::Parse {
                path: path.display().to_string(),
                detail,
            },
            other => other,
        })
    }

    pub fn scripts(&self) -> &[Script] {
        &self.scripts
    }

    pub fn push(&mut self, script: Script) {
        self.scripts.push(script);
    }

    /// Scripts are consulted in order, so earlier entries take precedence.
    pub fn extend(&mut self, scripts: impl IntoIterator<Item = Script>) {
        self.scripts.extend(scripts);
    }
}

#[async_trait]
impl LlmClient for ScriptedClient {
    async fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let transcript = request.transcript();
        let script = self
            .scripts
            .iter()
            .find(|s| s.applies(request, &transcript))
            .ok_or_else(|| LlmError::NoScript { tag: request.tag.clone() })?;
        match (script.error, &script.response) {
            (Some(ScriptedFailure::Timeout), _) => Err(LlmError::Timeout(Duration::ZERO)),
            (Some(ScriptedFailure::Transport), _) => Err(LlmError::Transport("scripted transport failure".into())),
            (Some(ScriptedFailure::Provider), _) => Err(LlmError::Provider {
                status: Some(500),
                message: "scripted provider failure".into(),
                transient: false,
            }),
            (Some(ScriptedFailure::Empty), _) | (None, None) => Ok(String::new()),
            (None, Some(text)) => Ok(text.clone()),
        }
    }

    fn mode(&self) -> &'static str {
        "scripted"
    }
}
