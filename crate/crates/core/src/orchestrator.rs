//! Sessions and the adaptive turn pipeline.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use chrono::NaiveDate;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::generation::{attach_citations, compose, generate, AnswerDraft, AnswerWithCitations, CitationConfig};
use crate::index::{Embedder, IndexCatalog};
use crate::postprocess::{filter, fuse, rerank, Passage, Reranker, DEFAULT_JACCARD_THRESHOLD, DEFAULT_RERANK_K};
use crate::query_tools::{clarify, decompose, rewrite, ClarifyDecision, HistoryTurn, LlmTools, DEFAULT_MAX_SUB_QUERIES};
use crate::refinement::{polish, reflect, DEFAULT_MAX_ROUNDS};
use crate::retrieval::{
    bm25_retrieve, hybrid_retrieve, select_shards, web_retrieve, RetrievalOutcome, RetrievedChunk, RouteConstraints,
    WebSearchClient, DEFAULT_BM25_CAP, DEFAULT_HYBRID_K_PER_SHARD, DEFAULT_WEB_RESULTS,
};
use crate::trace::{EventKind, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clarification: Option<String>,
    pub answer: AnswerWithCitations,
    #[serde(default)]
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingClarification {
    pub query: String,
    pub questions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    #[serde(default)]
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub pending_clarification: Option<PendingClarification>,
    /// Messages handled so far; numbers the traces.
    #[serde(default)]
    pub exchanges: u32,
}

impl Session {
    pub fn new(session_id: impl Into<String>) -> Self {
        Session {
            session_id: session_id.into(),
            turns: Vec::new(),
            pending_clarification: None,
            exchanges: 0,
        }
    }

    /// A fresh trace for the next message on this session.
    pub fn begin_exchange(&mut self) -> Trace {
        let trace = Trace::new(self.session_id.clone(), self.exchanges);
        self.exchanges += 1;
        trace
    }

    pub fn history(&self, window: usize) -> Vec<HistoryTurn> {
        let done: Vec<&Turn> = self.turns.iter().filter(|t| !t.failed).collect();
        done[done.len().saturating_sub(window)..]
            .iter()
            .map(|t| HistoryTurn {
                user: t.user.clone(),
                assistant: t.answer.text.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Direct,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub route: Route,
    pub use_web: bool,
    #[serde(default)]
    pub constraints: RouteConstraints,
}

impl PipelinePlan {
    pub fn retrieval() -> Self {
        PipelinePlan {
            route: Route::Retrieval,
            use_web: true,
            constraints: RouteConstraints::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClarifyPolicy {
    FirstTurn,
    Always,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub hybrid_k_per_shard: usize,
    pub bm25_cap: usize,
    pub web_results: usize,
    pub web_enabled: bool,
    pub web_timeout_ms: u64,
    pub rerank_k: usize,
    pub jaccard_threshold: f64,
    pub llm_filter: bool,
    pub max_sub_queries: usize,
    pub fanout: usize,
    pub history_window: usize,
    /// "Now" for relative time expressions in queries.
    pub horizon_date: NaiveDate,
    pub clarify: ClarifyPolicy,
    pub citation: CitationConfig,
    pub max_rounds: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            hybrid_k_per_shard: DEFAULT_HYBRID_K_PER_SHARD,
            bm25_cap: DEFAULT_BM25_CAP,
            web_results: DEFAULT_WEB_RESULTS,
            web_enabled: true,
            web_timeout_ms: 10_000,
            rerank_k: DEFAULT_RERANK_K,
            jaccard_threshold: DEFAULT_JACCARD_THRESHOLD,
            llm_filter: true,
            max_sub_queries: DEFAULT_MAX_SUB_QUERIES,
            fanout: 4,
            history_window: 6,
            horizon_date: NaiveDate::from_ymd_opt(2024, 6, 30).expect("valid date"),
            clarify: ClarifyPolicy::FirstTurn,
            citation: CitationConfig::default(),
            max_rounds: DEFAULT_MAX_ROUNDS,
        }
    }
}

/// Shared, read-only collaborators of a turn.
#[derive(Clone)]
pub struct Deps {
    pub tools: LlmTools,
    pub catalog: Arc<IndexCatalog>,
    pub embedder: Arc<dyn Embedder>,
    pub web: Option<Arc<dyn WebSearchClient>>,
    pub reranker: Arc<dyn Reranker>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TurnOutcome {
    Answered { answer: AnswerWithCitations },
    Clarification { questions: Vec<String> },
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TurnError {
    #[error("message text is empty")]
    EmptyMessage,
    #[error("session is waiting for a clarification reply")]
    PendingClarification,
    #[error("session has no pending clarification")]
    NoPendingClarification,
}

#[derive(Deserialize)]
struct PlanReply {
    route: Route,
    #[serde(default)]
    use_web: bool,
}

/// Classifies the query; failures fall back to the retrieval route.
pub async fn plan(tools: &LlmTools, query_text: &str, history: &[HistoryTurn], trace: &mut Trace) -> PipelinePlan {
    let hist = crate::query_tools::format_history(history);
    let request = tools.request("plan", &[("query", query_text), ("history", &hist)]);
    match tools.gateway.complete_json::<PlanReply>(request, "plan", trace).await {
        Ok(reply) => PipelinePlan {
            route: reply.route,
            use_web: reply.use_web,
            constraints: RouteConstraints::default(),
        },
        Err(e) => {
            trace.warn("plan", format!("defaulting to retrieval: {e}"));
            PipelinePlan::retrieval()
        }
    }
}

/// Routes a message to `resume_with_clarification` when the session is waiting
/// for a reply, and to `run_turn` otherwise.
pub async fn handle_message(
    session: &mut Session,
    text: &str,
    deps: &Deps,
    config: &PipelineConfig,
    trace: &mut Trace,
) -> Result<TurnOutcome, TurnError> {
    if session.pending_clarification.is_some() {
        resume_with_clarification(session, text, deps, config, trace).await
    } else {
        run_turn(session, text, deps, config, trace).await
    }
}

pub async fn run_turn(
    session: &mut Session,
    user_text: &str,
    deps: &Deps,
    config: &PipelineConfig,
    trace: &mut Trace,
) -> Result<TurnOutcome, TurnError> {
    if session.pending_clarification.is_some() {
        return Err(TurnError::PendingClarification);
    }
    let query = user_text.trim();
    if query.is_empty() {
        return Err(TurnError::EmptyMessage);
    }
    let history = session.history(config.history_window);
    let ask = match config.clarify {
        ClarifyPolicy::Always => true,
        ClarifyPolicy::FirstTurn => session.turns.is_empty(),
        ClarifyPolicy::Never => false,
    };
    if ask {
        let outcome = clarify(&deps.tools, query, &history, trace).await;
        if outcome.decision == ClarifyDecision::Ask {
            trace.emit(EventKind::ClarificationAsked, json!({ "questions": outcome.questions }));
            session.pending_clarification = Some(PendingClarification {
                query: query.to_string(),
                questions: outcome.questions.clone(),
            });
            return Ok(TurnOutcome::Clarification {
                questions: outcome.questions,
            });
        }
    }
    Ok(answer_turn(session, query.to_string(), None, query.to_string(), history, deps, config, trace).await)
}

pub async fn resume_with_clarification(
    session: &mut Session,
    user_reply: &str,
    deps: &Deps,
    config: &PipelineConfig,
    trace: &mut Trace,
) -> Result<TurnOutcome, TurnError> {
    let pending = session.pending_clarification.take().ok_or(TurnError::NoPendingClarification)?;
    let reply = user_reply.trim();
    let context = if reply.is_empty() {
        trace.warn("clarify", "empty clarification reply, using the original question");
        pending.query.clone()
    } else {
        let questions: String = pending.questions.iter().map(|q| format!("Q: {q}\n")).collect();
        format!("{}\nClarification:\n{questions}A: {reply}", pending.query)
    };
    let history = session.history(config.history_window);
    let clarification = (!reply.is_empty()).then(|| reply.to_string());
    Ok(answer_turn(session, pending.query, clarification, context, history, deps, config, trace).await)
}

#[allow(clippy::too_many_arguments)]
async fn answer_turn(
    session: &mut Session,
    user: String,
    clarification: Option<String>,
    context: String,
    history: Vec<HistoryTurn>,
    deps: &Deps,
    config: &PipelineConfig,
    trace: &mut Trace,
) -> TurnOutcome {
    let result = pipeline(&context, &history, deps, config, trace).await;
    let (answer, failed, outcome) = match result {
        Ok(answer) => {
            trace.emit(
                EventKind::FinalAnswer,
                json!({
                    "answer": answer,
                    "rendered": answer.render_with_markers(),
                    "sources": answer.cited_sources(),
                }),
            );
            (answer.clone(), false, TurnOutcome::Answered { answer })
        }
        Err(message) => {
            trace.emit(EventKind::Error, json!({ "message": message }));
            (AnswerWithCitations::default(), true, TurnOutcome::Failed { message })
        }
    };
    session.turns.push(Turn {
        user,
        clarification,
        answer,
        failed,
    });
    tracing::debug!(session = %session.session_id, failed, "turn finished");
    outcome
}

async fn pipeline(
    query: &str,
    history: &[HistoryTurn],
    deps: &Deps,
    config: &PipelineConfig,
    trace: &mut Trace,
) -> Result<AnswerWithCitations, String> {
    let mut chosen = plan(&deps.tools, query, history, trace).await;
    trace.emit(EventKind::PlanChosen, json!({ "route": chosen.route, "use_web": chosen.use_web }));

    if chosen.route == Route::Direct {
        let draft = generate(&deps.tools, query, &[], history, trace)
            .await
            .map_err(|e| format!("generation failed: {e}"))?;
        return Ok(AnswerWithCitations::uncited(draft.text));
    }

    let rewritten = rewrite(&deps.tools, query, history, config.horizon_date, trace).await;
    chosen.constraints = rewritten.constraints.clone();
    trace.emit(
        EventKind::QueryRewritten,
        json!({ "query": rewritten.text, "constraints": rewritten.constraints }),
    );
    let sub_plan = decompose(&deps.tools, &rewritten, config.max_sub_queries, trace).await;
    trace.emit(EventKind::SubqueriesPlanned, json!({ "sub_queries": sub_plan.sub_queries }));

    let use_web = chosen.use_web && config.web_enabled && deps.web.is_some();
    let mut jobs = Vec::with_capacity(sub_plan.sub_queries.len());
    for (i, sq) in sub_plan.sub_queries.iter().cloned().enumerate() {
        let mut child = trace.child();
        let constraints = chosen.constraints.clone();
        jobs.push(async move {
            let r = sub_query(i, &sq, &constraints, use_web, history, deps, config, &mut child).await;
            (r, child)
        });
    }
    let runs: Vec<(Result<SubResult, String>, Trace)> = stream::iter(jobs)
        .buffered(config.fanout.max(1))
        .collect()
        .await;

    let mut answered = Vec::new();
    for (result, child) in runs {
        trace.absorb(child);
        match result {
            Ok(r) => answered.push(r),
            Err(e) => trace.warn("generate", e),
        }
    }
    if answered.is_empty() {
        return Err("no sub-query could be answered".to_string());
    }

    let mut pool: Vec<Passage> = Vec::new();
    let mut seen = BTreeSet::new();
    for p in answered.iter().flat_map(|r| r.passages.iter()) {
        if seen.insert(p.source_id.clone()) {
            pool.push(p.clone());
        }
    }
    let used: Vec<String> = pool.iter().map(|p| p.source_id.clone()).collect();

    let draft = if sub_plan.sub_queries.len() == 1 {
        AnswerDraft {
            text: answered[0].answer.clone(),
            used_passage_ids: used,
        }
    } else {
        let pairs: Vec<(String, String)> = answered.iter().map(|r| (r.sub_query.clone(), r.answer.clone())).collect();
        compose(&deps.tools, query, &pairs, used, trace)
            .await
            .map_err(|e| format!("composition failed: {e}"))?
    };
    trace.emit(EventKind::FinalDraft, json!({ "text": draft.text }));

    let mut answer = attach_citations(&draft, &pool, &config.citation);
    trace.emit(
        EventKind::CitationsAttached,
        json!({ "sentences": answer.sentences.len(), "citations": answer.citations }),
    );

    for _ in 0..config.max_rounds {
        let report = reflect(&deps.tools, query, &answer.text, &pool, trace).await;
        trace.emit(EventKind::Reflection, json!({ "report": report }));
        if !report.needs_fix() {
            break;
        }
        answer = polish(&deps.tools, query, &answer, &report, &pool, &config.citation, trace).await;
        trace.emit(
            EventKind::Polished,
            json!({ "text": answer.text, "citations": answer.citations }),
        );
    }
    Ok(answer)
}

struct SubResult {
    sub_query: String,
    answer: String,
    passages: Vec<Passage>,
}

fn chunk_summaries(results: &[RetrievedChunk]) -> Value {
    Value::Array(
        results
            .iter()
            .map(|r| {
                json!({
                    "id": r.id(),
                    "source": r.source,
                    "score": r.score,
                    "rank": r.rank,
                    "shard": r.shard_key.as_ref().map(|k| k.file_stem()),
                })
            })
            .collect(),
    )
}

fn retrieved_event(trace: &mut Trace, index: usize, source: &str, outcome: &RetrievalOutcome) {
    trace.emit(
        EventKind::ChunksRetrieved,
        json!({
            "sub_query_index": index,
            "source": source,
            "count": outcome.results.len(),
            "per_shard": outcome.per_shard,
            "chunks": chunk_summaries(&outcome.results),
        }),
    );
    for failure in &outcome.failures {
        trace.warn(source, failure.clone());
    }
}

fn passage_cards(passages: &[Passage]) -> Value {
    serde_json::to_value(passages).unwrap_or(Value::Null)
}

#[allow(clippy::too_many_arguments)]
async fn sub_query(
    index: usize,
    text: &str,
    constraints: &RouteConstraints,
    use_web: bool,
    history: &[HistoryTurn],
    deps: &Deps,
    config: &PipelineConfig,
    trace: &mut Trace,
) -> Result<SubResult, String> {
    let shards = select_shards(&deps.catalog, constraints);
    trace.emit(
        EventKind::ShardsSelected,
        json!({
            "sub_query_index": index,
            "sub_query": text,
            "shards": shards.iter().map(|k| k.file_stem()).collect::<Vec<_>>(),
        }),
    );

    let (catalog, embedder) = (Arc::clone(&deps.catalog), Arc::clone(&deps.embedder));
    let (q, c) = (text.to_string(), constraints.clone());
    let (k, cap) = (config.hybrid_k_per_shard, config.bm25_cap);
    let (hybrid, bm25) = tokio::task::spawn_blocking(move || {
        (
            hybrid_retrieve(&catalog, embedder.as_ref(), &q, &c, k),
            bm25_retrieve(&catalog, &q, &c, cap),
        )
    })
    .await
    .map_err(|e| format!("retrieval task failed: {e}"))?;
    retrieved_event(trace, index, "hybrid", &hybrid);
    retrieved_event(trace, index, "bm25", &bm25);

    let mut pool = hybrid.results;
    pool.extend(bm25.results);
    if let Some(web) = deps.web.as_ref().filter(|_| use_web) {
        let out = web_retrieve(web.as_ref(), text, config.web_results, Duration::from_millis(config.web_timeout_ms)).await;
        trace.emit(
            EventKind::ChunksRetrieved,
            json!({
                "sub_query_index": index,
                "source": "web",
                "count": out.results.len(),
                "chunks": chunk_summaries(&out.results),
            }),
        );
        if let Some(w) = out.warning {
            trace.warn("web", w);
        }
        pool.extend(out.results);
    }

    let ranked = rerank(text, pool, deps.reranker.as_ref(), config.rerank_k, trace).await;
    trace.emit(
        EventKind::Reranked,
        json!({ "sub_query_index": index, "count": ranked.len(), "chunks": chunk_summaries(&ranked) }),
    );

    let fused = fuse(&ranked);
    trace.emit(
        EventKind::PassagesFused,
        json!({ "sub_query_index": index, "count": fused.len(), "passages": passage_cards(&fused) }),
    );

    let tools = config.llm_filter.then_some(&deps.tools);
    let filtered = filter(tools, text, fused, config.jaccard_threshold, trace).await;
    trace.emit(
        EventKind::PassagesFiltered,
        json!({
            "sub_query_index": index,
            "count": filtered.passages.len(),
            "passages": passage_cards(&filtered.passages),
            "dropped_duplicates": filtered.dropped_duplicates,
            "dropped_irrelevant": filtered.dropped_irrelevant,
        }),
    );

    let draft = generate(&deps.tools, text, &filtered.passages, history, trace)
        .await
        .map_err(|e| format!("sub-query {} generation failed: {e}", index + 1))?;
    trace.emit(
        EventKind::SubAnswer,
        json!({
            "sub_query_index": index,
            "sub_query": text,
            "answer": draft.text,
            "passages": draft.used_passage_ids,
        }),
    );
    Ok(SubResult {
        sub_query: text.to_string(),
        answer: draft.text,
        passages: filtered.passages,
    })
}
