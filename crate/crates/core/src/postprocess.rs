//! Rerank the pooled results, fuse same-source chunks into passages, drop redundancy and noise.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::query_tools::LlmTools;
use crate::retrieval::RetrievedChunk;
use crate::text::index_terms;
use crate::trace::Trace;

pub const DEFAULT_RERANK_K: usize = 10;
pub const DEFAULT_JACCARD_THRESHOLD: f64 = 0.8;
pub const SHINGLE_SIZE: usize = 5;

#[derive(Debug, Clone, thiserror::Error)]
#[error("reranker: {0}")]
pub struct RerankError(pub String);

/// Scores (query, passage) pairs. Implementations must be deterministic.
#[async_trait]
pub trait Reranker: Send + Sync {
    async fn score_batch(&self, query: &str, passages: &[String]) -> Vec<Result<f64, RerankError>>;
}

/// F1 of the distinct-term overlap between query and passage.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapReranker;

pub fn overlap_f1(query: &str, passage: &str) -> f64 {
    let q: BTreeSet<String> = index_terms(query).into_iter().collect();
    let p: BTreeSet<String> = index_terms(passage).into_iter().collect();
    let common = q.intersection(&p).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    let precision = common / p.len() as f64;
    let recall = common / q.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[async_trait]
impl Reranker for OverlapReranker {
    async fn score_batch(&self, query: &str, passages: &[String]) -> Vec<Result<f64, RerankError>> {
        passages.iter().map(|p| Ok(overlap_f1(query, p))).collect()
    }
}

/// Cross-encoder scoring service: `POST {query, passages[]}` returning `{scores[]}`.
pub struct HttpReranker {
    http: reqwest::Client,
    endpoint: String,
}

impl HttpReranker {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, RerankError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RerankError(e.to_string()))?;
        Ok(HttpReranker { http, endpoint: endpoint.into() })
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    query: &'a str,
    passages: &'a [String],
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<Option<f64>>,
}

#[async_trait]
impl Reranker for HttpReranker {
    async fn score_batch(&self, query: &str, passages: &[String]) -> Vec<Result<f64, RerankError>> {
        let all_failed = |msg: String| passages.iter().map(|_| Err(RerankError(msg.clone()))).collect();
        let resp = match self.http.post(&self.endpoint).json(&ScoreRequest { query, passages }).send().await {
            Ok(r) if r.status().is_success() => r,
            Ok(r) => return all_failed(format!("status {}", r.status())),
            Err(e) => return all_failed(e.to_string()),
        };
        let body: ScoreResponse = match resp.json().await {
            Ok(b) => b,
            Err(e) => return all_failed(e.to_string()),
        };
        if body.scores.len() != passages.len() {
            return all_failed(format!("expected {} scores, got {}", passages.len(), body.scores.len()));
        }
        body.scores
            .into_iter()
            .map(|s| match s {
                Some(v) if v.is_finite() => Ok(v),
                _ => Err(RerankError("missing or non-finite score".into())),
            })
            .collect()
    }
}

/// Keeps one copy per id (the best original rank), rescores with the reranker and
/// returns the top `k`, ranked from 1. Items the reranker fails on are dropped.
pub async fn rerank(
    query_text: &str,
    results: Vec<RetrievedChunk>,
    reranker: &dyn Reranker,
    k: usize,
    trace: &mut Trace,
) -> Vec<RetrievedChunk> {
    let mut unique: BTreeMap<String, RetrievedChunk> = BTreeMap::new();
    for r in results {
        match unique.get(r.id()) {
            Some(prev) if (prev.rank, prev.source) <= (r.rank, r.source) => {}
            _ => {
                unique.insert(r.id().to_string(), r);
            }
        }
    }
    let items: Vec<RetrievedChunk> = unique.into_values().collect();
    let texts: Vec<String> = items.iter().map(RetrievedChunk::text).collect();
    let scores = reranker.score_batch(query_text, &texts).await;

    let mut scored = Vec::with_capacity(items.len());
    let mut failed = Vec::new();
    for (item, score) in items.into_iter().zip(scores) {
        match score {
            Ok(s) => scored.push((s, item)),
            Err(e) => failed.push(format!("{}: {}", item.id(), e.0)),
        }
    }
    if !failed.is_empty() {
        trace.warn("rerank", format!("dropped {} unscored item(s): {}", failed.len(), failed.join("; ")));
    }
    scored.sort_by(|(sa, a), (sb, b)| {
        sb.total_cmp(sa)
            .then(a.rank.cmp(&b.rank))
            .then_with(|| a.id().cmp(b.id()))
    });
    scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (score, mut item))| {
            item.score = score;
            item.rank = i as u32 + 1;
            item
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    /// Paper id or url.
    pub source_id: String,
    pub text: String,
    pub member_chunks: Vec<String>,
    pub best_score: f64,
    pub is_web: bool,
}

/// Groups results by source; corpus members are ordered by ordinal and joined by a
/// newline, or by a `…` line where ordinals are not adjacent.
pub fn fuse(results: &[RetrievedChunk]) -> Vec<Passage> {
    let mut groups: BTreeMap<&str, Vec<&RetrievedChunk>> = BTreeMap::new();
    for r in results {
        groups.entry(r.source_id()).or_default().push(r);
    }
    let mut passages: Vec<Passage> = groups
        .into_iter()
        .map(|(source_id, mut members)| {
            members.sort_by(|a, b| {
                a.ordinal()
                    .cmp(&b.ordinal())
                    .then(a.rank.cmp(&b.rank))
                    .then_with(|| a.id().cmp(b.id()))
            });
            members.dedup_by(|b, a| a.id() == b.id());
            let mut text = String::new();
            let mut prev: Option<u32> = None;
            for m in &members {
                if !text.is_empty() {
                    match (prev, m.ordinal()) {
                        (Some(p), Some(o)) if o == p + 1 => text.push('\n'),
                        _ => text.push_str("\n…\n"),
                    }
                }
                text.push_str(&m.text());
                prev = m.ordinal();
            }
            Passage {
                source_id: source_id.to_string(),
                text,
                member_chunks: members.iter().map(|m| m.id().to_string()).collect(),
                best_score: members.iter().map(|m| m.score).fold(f64::NEG_INFINITY, f64::max),
                is_web: members.iter().all(|m| m.is_web()),
            }
        })
        .collect();
    passages.sort_by(|a, b| b.best_score.total_cmp(&a.best_score).then_with(|| a.source_id.cmp(&b.source_id)));
    passages
}

/// Word 5-gram shingles over index terms; shorter texts form one shingle.
pub fn shingles(text: &str) -> BTreeSet<String> {
    let terms = index_terms(text);
    if terms.is_empty() {
        return BTreeSet::new();
    }
    if terms.len() < SHINGLE_SIZE {
        return BTreeSet::from([terms.join(" ")]);
    }
    terms.windows(SHINGLE_SIZE).map(|w| w.join(" ")).collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Deterministic stage: scanning by score, drop any passage whose shingle Jaccard
/// with an already kept passage reaches `threshold`. Returns kept and dropped.
pub fn drop_near_duplicates(passages: Vec<Passage>, threshold: f64) -> (Vec<Passage>, Vec<Passage>) {
    let mut ordered = passages;
    ordered.sort_by(|a, b| b.best_score.total_cmp(&a.best_score).then_with(|| a.source_id.cmp(&b.source_id)));
    let mut kept: Vec<(Passage, BTreeSet<String>)> = Vec::new();
    let mut dropped = Vec::new();
    for p in ordered {
        let sh = shingles(&p.text);
        if kept.iter().any(|(_, k)| jaccard(k, &sh) >= threshold) {
            dropped.push(p);
        } else {
            kept.push((p, sh));
        }
    }
    (kept.into_iter().map(|(p, _)| p).collect(), dropped)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FilterOutcome {
    pub passages: Vec<Passage>,
    pub dropped_duplicates: Vec<String>,
    pub dropped_irrelevant: Vec<String>,
}

#[derive(Deserialize)]
struct FilterReply {
    keep: Vec<usize>,
}

pub fn numbered_passages(passages: &[Passage]) -> String {
    passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] ({})\n{}", i + 1, p.source_id, p.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Near-duplicate removal, then (when `tools` is given) an LLM relevance pass.
/// A non-empty input always keeps at least its top passage.
pub async fn filter(
    tools: Option<&LlmTools>,
    query_text: &str,
    passages: Vec<Passage>,
    jaccard_threshold: f64,
    trace: &mut Trace,
) -> FilterOutcome {
    let (kept, dups) = drop_near_duplicates(passages, jaccard_threshold);
    let mut outcome = FilterOutcome {
        dropped_duplicates: dups.into_iter().map(|p| p.source_id).collect(),
        ..FilterOutcome::default()
    };
    let Some(tools) = tools.filter(|_| kept.len() > 1) else {
        outcome.passages = kept;
        return outcome;
    };
    let listing = numbered_passages(&kept);
    let request = tools.request("filter", &[("query", query_text), ("passages", &listing)]);
    match tools.gateway.complete_json::<FilterReply>(request, "filter", trace).await {
        Ok(reply) => {
            let keep: BTreeSet<usize> = reply.keep.into_iter().filter(|i| (1..=kept.len()).contains(i)).collect();
            let keep = if keep.is_empty() { BTreeSet::from([1]) } else { keep };
            for (i, p) in kept.into_iter().enumerate() {
                if keep.contains(&(i + 1)) {
                    outcome.passages.push(p);
                } else {
                    outcome.dropped_irrelevant.push(p.source_id);
                }
            }
        }
        Err(e) => {
            trace.warn("filter", format!("relevance filter skipped: {e}"));
            outcome.passages = kept;
        }
    }
    outcome
}
