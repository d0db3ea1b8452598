//! Shard routing and the three retrievers: hybrid, BM25 and web search.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, ShardKey};
use crate::index::{Embedder, Hit, IndexCatalog, ShardIndex};

pub const DEFAULT_HYBRID_K_PER_SHARD: usize = 30;
pub const DEFAULT_BM25_CAP: usize = 80;
pub const DEFAULT_WEB_RESULTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteConstraints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_range: Option<TimeRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domains: Option<BTreeSet<String>>,
}

impl RouteConstraints {
    pub fn is_empty(&self) -> bool {
        self.time_range.is_none() && self.domains.is_none()
    }

    /// Swaps an inverted range and drops an empty domain set.
    pub fn normalized(mut self) -> Self {
        if let Some(r) = &mut self.time_range {
            if r.start > r.end {
                std::mem::swap(&mut r.start, &mut r.end);
            }
        }
        if self.domains.as_ref().is_some_and(BTreeSet::is_empty) {
            self.domains = None;
        }
        self
    }

    pub fn matches(&self, key: &ShardKey) -> bool {
        if let Some(range) = &self.time_range {
            match key.interval() {
                Ok((start, end)) if start <= range.end && range.start <= end => {}
                _ => return false,
            }
        }
        match &self.domains {
            Some(domains) => domains.iter().any(|d| domain_matches(&key.domain, d)),
            None => true,
        }
    }
}

/// `cs` matches `cs` and `cs.CL`; `cs.CL` matches `cs.CL` and the archive shard `cs`.
pub fn domain_matches(shard_domain: &str, requested: &str) -> bool {
    let nested = |outer: &str, inner: &str| {
        inner.len() > outer.len() && inner.starts_with(outer) && inner.as_bytes()[outer.len()] == b'.'
    };
    shard_domain == requested || nested(shard_domain, requested) || nested(requested, shard_domain)
}

/// Shards relevant to `constraints`, in (period, domain) order.
pub fn select_shards(catalog: &IndexCatalog, constraints: &RouteConstraints) -> Vec<ShardKey> {
    catalog.keys().into_iter().filter(|k| constraints.matches(k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Hybrid,
    Bm25,
    Web,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Hybrid => "hybrid",
            Source::Bm25 => "bm25",
            Source::Web => "web",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebResult {
    pub url: String,
    pub title: String,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RetrievedItem {
    Chunk(Chunk),
    Web(WebResult),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedChunk {
    pub source: Source,
    pub item: RetrievedItem,
    pub score: f64,
    pub rank: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shard_key: Option<ShardKey>,
}

impl RetrievedChunk {
    /// Chunk id, or the url for web results.
    pub fn id(&self) -> &str {
        match &self.item {
            RetrievedItem::Chunk(c) => &c.chunk_id,
            RetrievedItem::Web(w) => &w.url,
        }
    }

    /// Paper id, or the url for web results.
    pub fn source_id(&self) -> &str {
        match &self.item {
            RetrievedItem::Chunk(c) => &c.paper_id,
            RetrievedItem::Web(w) => &w.url,
        }
    }

    pub fn text(&self) -> String {
        match &self.item {
            RetrievedItem::Chunk(c) => c.text.clone(),
            RetrievedItem::Web(w) => format!("{}\n{}", w.title, w.snippet),
        }
    }

    pub fn ordinal(&self) -> Option<u32> {
        match &self.item {
            RetrievedItem::Chunk(c) => Some(c.ordinal),
            RetrievedItem::Web(_) => None,
        }
    }

    pub fn is_web(&self) -> bool {
        matches!(self.item, RetrievedItem::Web(_))
    }
}

/// Output of one retriever call over the routed shards.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RetrievalOutcome {
    pub results: Vec<RetrievedChunk>,
    pub shards: Vec<ShardKey>,
    /// Results contributed per shard, keyed by shard file stem.
    pub per_shard: BTreeMap<String, usize>,
    pub failures: Vec<String>,
}

fn search_shards<F>(catalog: &IndexCatalog, shards: &[ShardKey], search: F) -> (Vec<(ShardKey, Arc<ShardIndex>, Vec<Hit>)>, Vec<String>)
where
    F: Fn(&ShardIndex) -> Result<Vec<Hit>, String> + Sync,
{
    let per_shard: Vec<_> = shards
        .par_iter()
        .map(|key| {
            let index = catalog.open_shard(key).map_err(|e| format!("shard {key}: {e}"))?;
            let hits = search(&index).map_err(|e| format!("shard {key}: {e}"))?;
            Ok::<_, String>((key.clone(), index, hits))
        })
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for r in per_shard {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failures.push(e),
        }
    }
    (ok, failures)
}

fn merge(source: Source, shards: Vec<ShardKey>, found: Vec<(ShardKey, Arc<ShardIndex>, Vec<Hit>)>, failures: Vec<String>, cap: Option<usize>) -> RetrievalOutcome {
    let mut pooled: Vec<RetrievedChunk> = Vec::new();
    for (key, index, hits) in found {
        for hit in hits {
            let chunk = index.chunk(&hit.chunk_id).expect("hit refers to indexed chunk").clone();
            pooled.push(RetrievedChunk {
                source,
                item: RetrievedItem::Chunk(chunk),
                score: hit.score,
                rank: 0,
                shard_key: Some(key.clone()),
            });
        }
    }
    pooled.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id().cmp(b.id())));
    if let Some(cap) = cap {
        pooled.truncate(cap);
    }
    let mut per_shard = BTreeMap::new();
    for (i, r) in pooled.iter_mut().enumerate() {
        r.rank = i as u32 + 1;
        let key = r.shard_key.as_ref().expect("corpus result");
        *per_shard.entry(key.file_stem()).or_insert(0) += 1;
    }
    RetrievalOutcome {
        results: pooled,
        shards,
        per_shard,
        failures,
    }
}

/// Top `k_per_shard` hybrid hits from every routed shard, merged by fused score.
pub fn hybrid_retrieve(
    catalog: &IndexCatalog,
    embedder: &dyn Embedder,
    query_text: &str,
    constraints: &RouteConstraints,
    k_per_shard: usize,
) -> RetrievalOutcome {
    let shards = select_shards(catalog, constraints);
    let dense = embedder.embed_dense(query_text);
    let sparse = embedder.embed_sparse(query_text);
    let (found, failures) = search_shards(catalog, &shards, |idx| {
        idx.hybrid_search(&dense, &sparse, k_per_shard).map_err(|e| e.to_string())
    });
    merge(Source::Hybrid, shards, found, failures, None)
}

/// BM25 hits pooled over the routed shards, truncated to `cap` overall.
pub fn bm25_retrieve(
    catalog: &IndexCatalog,
    query_text: &str,
    constraints: &RouteConstraints,
    cap: usize,
) -> RetrievalOutcome {
    let shards = select_shards(catalog, constraints);
    let (found, failures) = search_shards(catalog, &shards, |idx| Ok(idx.bm25_search(query_text, cap)));
    merge(Source::Bm25, shards, found, failures, Some(cap))
}

#[derive(Debug, thiserror::Error)]
pub enum WebSearchError {
    #[error("web search timed out after {0:?}")]
    Timeout(Duration),
    #[error("web search transport error: {0}")]
    Transport(String),
    #[error("web search provider error: {0}")]
    Provider(String),
}

#[async_trait]
pub trait WebSearchClient: Send + Sync {
    /// At most `n` results in provider order.
    async fn search(&self, query: &str, n: usize) -> Result<Vec<WebResult>, WebSearchError>;
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct WebOutcome {
    pub results: Vec<RetrievedChunk>,
    pub warning: Option<String>,
}

/// Runs the web client under `timeout`; failures yield no results and a warning.
pub async fn web_retrieve(client: &dyn WebSearchClient, query_text: &str, n: usize, timeout: Duration) -> WebOutcome {
    let outcome = match tokio::time::timeout(timeout, client.search(query_text, n)).await {
        Ok(Ok(hits)) => hits,
        Ok(Err(e)) => return WebOutcome { results: vec![], warning: Some(e.to_string()) },
        Err(_) => {
            return WebOutcome {
                results: vec![],
                warning: Some(WebSearchError::Timeout(timeout).to_string()),
            }
        }
    };
    let mut warning = None;
    let mut seen = BTreeSet::new();
    let mut results = Vec::new();
    for hit in outcome {
        if hit.url.trim().is_empty() {
            warning = Some("web result without url dropped".to_string());
            continue;
        }
        if !seen.insert(hit.url.clone()) {
            continue;
        }
        if results.len() == n {
            break;
        }
        let rank = results.len() as u32 + 1;
        results.push(RetrievedChunk {
            source: Source::Web,
            item: RetrievedItem::Web(hit),
            score: 1.0 / f64::from(rank),
            rank,
            shard_key: None,
        });
    }
    WebOutcome { results, warning }
}

/// Canned results keyed by exact query text; a `"*"` key answers any other query.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
pub struct FixtureWebClient {
    results: BTreeMap<String, Vec<WebResult>>,
}

impl FixtureWebClient {
    pub fn new(results: BTreeMap<String, Vec<WebResult>>) -> Self {
        FixtureWebClient { results }
    }

    pub fn from_file(path: &Path) -> Result<Self, WebSearchError> {
        let raw = std::fs::read(path).map_err(|e| WebSearchError::Provider(format!("{}: {e}", path.display())))?;
        let results = serde_json::from_slice(&raw).map_err(|e| WebSearchError::Provider(format!("{}: {e}", path.display())))?;
        Ok(FixtureWebClient { results })
    }
}

#[async_trait]
impl WebSearchClient for FixtureWebClient {
    async fn search(&self, query: &str, n: usize) -> Result<Vec<WebResult>, WebSearchError> {
        let hits = self.results.get(query).or_else(|| self.results.get("*"));
        Ok(hits.map(|h| h.iter().take(n).cloned().collect()).unwrap_or_default())
    }
}

/// Search-engine API over HTTP: `GET <endpoint>?q=<query>&count=<n>` with a bearer key.
/// Accepts `{"results":[{url,title,snippet}]}` or a Bing-style `{"webPages":{"value":[{url,name,snippet}]}}`.
pub struct HttpWebClient {
    http: reqwest::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpWebClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, WebSearchError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| WebSearchError::Transport(e.to_string()))?;
        Ok(HttpWebClient {
            http,
            endpoint: endpoint.into(),
            api_key,
        })
    }
}

#[async_trait]
impl WebSearchClient for HttpWebClient {
    async fn search(&self, query: &str, n: usize) -> Result<Vec<WebResult>, WebSearchError> {
        let mut req = self.http.get(&self.endpoint).query(&[("q", query), ("count", &n.to_string())]);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key).header("Ocp-Apim-Subscription-Key", key);
        }
        let resp = req.send().await.map_err(|e| WebSearchError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(WebSearchError::Provider(format!("status {}", resp.status())));
        }
        let body: serde_json::Value = resp.json().await.map_err(|e| WebSearchError::Provider(e.to_string()))?;
        let mut hits = parse_web_results(&body);
        hits.truncate(n);
        Ok(hits)
    }
}

fn parse_web_results(body: &serde_json::Value) -> Vec<WebResult> {
    let field = |v: &serde_json::Value, names: &[&str]| {
        names.iter().find_map(|n| v.get(*n).and_then(|x| x.as_str())).unwrap_or_default().to_string()
    };
    let list = body
        .get("results")
        .or_else(|| body.pointer("/webPages/value"))
        .and_then(|v| v.as_array());
    list.map(|items| {
        items
            .iter()
            .map(|v| WebResult {
                url: field(v, &["url"]),
                title: field(v, &["title", "name"]),
                snippet: field(v, &["snippet", "description"]),
            })
            .collect()
    })
    .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_prefix_matching() {
        assert!(domain_matches("cs", "cs"));
        assert!(domain_matches("cs.CL", "cs"));
        assert!(domain_matches("cs", "cs.CL"));
        assert!(!domain_matches("cs", "csx"));
        assert!(!domain_matches("math", "cs"));
        assert!(!domain_matches("cs.CL", "cs.LG"));
    }

    #[test]
    fn parse_both_web_shapes() {
        let generic = serde_json::json!({"results":[{"url":"u1","title":"t","snippet":"s"}]});
        let bing = serde_json::json!({"webPages":{"value":[{"url":"u2","name":"n","snippet":"s"}]}});
        assert_eq!(parse_web_results(&generic)[0].url, "u1");
        assert_eq!(parse_web_results(&bing)[0].title, "n");
        assert!(parse_web_results(&serde_json::json!({})).is_empty());
    }
}
