//! Service configuration: a TOML file plus environment overrides for secrets.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use sciqa_core::index::{HashingEmbedder, IndexCatalog};
use sciqa_core::llm::{Gateway, GatewayConfig, HttpLlmClient, LlmClient, ScriptedClient};
use sciqa_core::orchestrator::{Deps, PipelineConfig};
use sciqa_core::postprocess::{HttpReranker, OverlapReranker, Reranker};
use sciqa_core::prompts::PromptSet;
use sciqa_core::query_tools::LlmTools;
use sciqa_core::retrieval::{FixtureWebClient, HttpWebClient, WebSearchClient};

pub const ENV_AUTH_TOKEN: &str = "SCIQA_AUTH_TOKEN";
pub const ENV_LLM_API_KEY: &str = "SCIQA_LLM_API_KEY";
pub const ENV_WEB_API_KEY: &str = "SCIQA_WEB_API_KEY";
pub const ENV_BIND: &str = "SCIQA_BIND";
pub const ENV_DATA_DIR: &str = "SCIQA_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("invalid setting {key}: {detail}")]
    Invalid { key: &'static str, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApiConfig {
    pub bind: String,
    /// Bearer token required on API routes when set; normally supplied by the environment.
    #[serde(skip_serializing)]
    pub auth_token: Option<String>,
    /// Allowed browser origins; empty disables CORS headers.
    pub cors_allowlist: Vec<String>,
    pub keepalive_secs: u64,
    pub max_concurrent_turns: usize,
}

impl Default for ApiConfig {
    fn default() -> Self {
        ApiConfig {
            bind: "127.0.0.1:8080".into(),
            auth_token: None,
            cors_allowlist: Vec::new(),
            keepalive_secs: 15,
            max_concurrent_turns: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    #[default]
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub mode: LlmMode,
    /// Script file for scripted mode.
    pub script: Option<PathBuf>,
    /// Chat-completions URL for http mode.
    pub endpoint: Option<String>,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub request_timeout_ms: u64,
    /// Directory of prompt templates overriding the built-in ones.
    pub prompts_dir: Option<PathBuf>,
    pub gateway: GatewayConfig,
}

impl Default for LlmSettings {
    fn default() -> Self {
        LlmSettings {
            mode: LlmMode::Scripted,
            script: None,
            endpoint: None,
            model: "gpt-4o-mini".into(),
            api_key: None,
            request_timeout_ms: 60_000,
            prompts_dir: None,
            gateway: GatewayConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WebMode {
    #[default]
    None,
    Fixture,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WebSettings {
    pub mode: WebMode,
    pub fixture: Option<PathBuf>,
    pub endpoint: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankMode {
    #[default]
    Overlap,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankSettings {
    pub mode: RerankMode,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for RerankSettings {
    fn default() -> Self {
        RerankSettings {
            mode: RerankMode::Overlap,
            endpoint: None,
            timeout_ms: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub server: ApiConfig,
    pub llm: LlmSettings,
    pub web: WebSettings,
    pub rerank: RerankSettings,
    pub pipeline: PipelineConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            data_dir: PathBuf::from("data"),
            server: ApiConfig::default(),
            llm: LlmSettings::default(),
            web: WebSettings::default(),
            rerank: RerankSettings::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn parse(raw: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(raw).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            detail: e.to_string(),
        })
    }

    /// Reads `path` and applies environment overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::parse(&raw, &path.display().to_string())?;
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        let non_empty = |k: &str| get(k).filter(|v| !v.trim().is_empty());
        if let Some(v) = non_empty(ENV_AUTH_TOKEN) {
            self.server.auth_token = Some(v);
        }
        if let Some(v) = non_empty(ENV_LLM_API_KEY) {
            self.llm.api_key = Some(v);
        }
        if let Some(v) = non_empty(ENV_WEB_API_KEY) {
            self.web.api_key = Some(v);
        }
        if let Some(v) = non_empty(ENV_BIND) {
            self.server.bind = v;
        }
        if let Some(v) = non_empty(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(v);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key, detail: &str| {
            Err(ConfigError::Invalid {
                key,
                detail: detail.to_string(),
            })
        };
        if self.server.keepalive_secs == 0 {
            return invalid("server.keepalive_secs", "must be positive");
        }
        if self.server.max_concurrent_turns == 0 {
            return invalid("server.max_concurrent_turns", "must be positive");
        }
        if self.llm.mode == LlmMode::Scripted && self.llm.script.is_none() {
            return invalid("llm.script", "required in scripted mode");
        }
        if self.llm.mode == LlmMode::Http && self.llm.endpoint.is_none() {
            return invalid("llm.endpoint", "required in http mode");
        }
        if self.web.mode == WebMode::Fixture && self.web.fixture.is_none() {
            return invalid("web.fixture", "required in fixture mode");
        }
        if self.web.mode == WebMode::Http && self.web.endpoint.is_none() {
            return invalid("web.endpoint", "required in http mode");
        }
        if self.rerank.mode == RerankMode::Http && self.rerank.endpoint.is_none() {
            return invalid("rerank.endpoint", "required in http mode");
        }
        Ok(())
    }

    pub fn llm_client(&self) -> Result<Arc<dyn LlmClient>, ConfigError> {
        let invalid = |key, e: &dyn std::fmt::Display| ConfigError::Invalid { key, detail: e.to_string() };
        Ok(match self.llm.mode {
            LlmMode::Scripted => {
                let path = self.llm.script.as_deref().ok_or_else(|| invalid("llm.script", &"missing"))?;
                Arc::new(ScriptedClient::from_file(path).map_err(|e| invalid("llm.script", &e))?)
            }
            LlmMode::Http => {
                let endpoint = self.llm.endpoint.clone().ok_or_else(|| invalid("llm.endpoint", &"missing"))?;
                let client = HttpLlmClient::new(
                    endpoint,
                    self.llm.api_key.clone(),
                    self.llm.model.clone(),
                    Duration::from_millis(self.llm.request_timeout_ms),
                )
                .map_err(|e| invalid("llm.endpoint", &e))?;
                Arc::new(client)
            }
        })
    }

    pub fn tools(&self) -> Result<LlmTools, ConfigError> {
        let prompts = match &self.llm.prompts_dir {
            Some(dir) => PromptSet::with_overrides(dir).map_err(|e| ConfigError::Invalid {
                key: "llm.prompts_dir",
                detail: e.to_string(),
            })?,
            None => PromptSet::default(),
        };
        Ok(LlmTools::new(
            Gateway::new(self.llm_client()?, self.llm.gateway.clone()),
            Arc::new(prompts),
        ))
    }

    pub fn web_client(&self) -> Result<Option<Arc<dyn WebSearchClient>>, ConfigError> {
        let invalid = |key, e: &dyn std::fmt::Display| ConfigError::Invalid { key, detail: e.to_string() };
        Ok(match self.web.mode {
            WebMode::None => None,
            WebMode::Fixture => {
                let path = self.web.fixture.as_deref().ok_or_else(|| invalid("web.fixture", &"missing"))?;
                Some(Arc::new(FixtureWebClient::from_file(path).map_err(|e| invalid("web.fixture", &e))?))
            }
            WebMode::Http => {
                let endpoint = self.web.endpoint.clone().ok_or_else(|| invalid("web.endpoint", &"missing"))?;
                let timeout = Duration::from_millis(self.pipeline.web_timeout_ms);
                Some(Arc::new(
                    HttpWebClient::new(endpoint, self.web.api_key.clone(), timeout).map_err(|e| invalid("web.endpoint", &e))?,
                ))
            }
        })
    }

    pub fn reranker(&self) -> Result<Arc<dyn Reranker>, ConfigError> {
        Ok(match self.rerank.mode {
            RerankMode::Overlap => Arc::new(OverlapReranker),
            RerankMode::Http => {
                let endpoint = self.rerank.endpoint.clone().ok_or(ConfigError::Invalid {
                    key: "rerank.endpoint",
                    detail: "missing".into(),
                })?;
                Arc::new(
                    HttpReranker::new(endpoint, Duration::from_millis(self.rerank.timeout_ms)).map_err(|e| {
                        ConfigError::Invalid {
                            key: "rerank.endpoint",
                            detail: e.to_string(),
                        }
                    })?,
                )
            }
        })
    }

    /// Everything a turn needs, over an already opened catalog.
    pub fn deps(&self, catalog: Arc<IndexCatalog>) -> Result<Deps, ConfigError> {
        Ok(Deps {
            tools: self.tools()?,
            catalog,
            embedder: Arc::new(HashingEmbedder::default()),
            web: self.web_client()?,
            reranker: self.reranker()?,
        })
    }
}
