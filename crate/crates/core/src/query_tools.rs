//! Active clarification, conversational rewriting with routing hints, and decomposition.
//!
//! Every operation degrades to a usable value when the gateway fails.

use std::collections::BTreeSet;
use std::sync::Arc;

use chrono::{Months, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::llm::{ChatRequest, Gateway};
use crate::prompts::PromptSet;
use crate::retrieval::{RouteConstraints, TimeRange};
use crate::trace::Trace;

pub const MAX_CLARIFYING_QUESTIONS: usize = 3;
pub const DEFAULT_MAX_SUB_QUERIES: usize = 4;

/// Gateway plus prompt templates: everything an LLM-backed tool needs.
#[derive(Clone)]
pub struct LlmTools {
    pub gateway: Gateway,
    pub prompts: Arc<PromptSet>,
}

impl LlmTools {
    pub fn new(gateway: Gateway, prompts: Arc<PromptSet>) -> Self {
        LlmTools { gateway, prompts }
    }

    pub(crate) fn request(&self, template: &str, vars: &[(&str, &str)]) -> ChatRequest {
        ChatRequest::new(template, self.prompts.get(template).render(vars))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryTurn {
    pub user: String,
    pub assistant: String,
}

pub fn format_history(history: &[HistoryTurn]) -> String {
    if history.is_empty() {
        return "(none)".to_string();
    }
    history
        .iter()
        .map(|t| format!("User: {}\nAssistant: {}", t.user, t.assistant))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClarifyDecision {
    Proceed,
    Ask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClarificationOutcome {
    pub decision: ClarifyDecision,
    pub questions: Vec<String>,
}

impl ClarificationOutcome {
    pub fn proceed() -> Self {
        ClarificationOutcome {
            decision: ClarifyDecision::Proceed,
            questions: Vec::new(),
        }
    }
}

#[derive(Deserialize)]
struct ClarifyReply {
    decision: ClarifyDecision,
    #[serde(default)]
    questions: Vec<String>,
}

pub async fn clarify(tools: &LlmTools, query: &str, history: &[HistoryTurn], trace: &mut Trace) -> ClarificationOutcome {
    let hist = format_history(history);
    let request = tools.request("clarify", &[("query", query), ("history", &hist)]);
    match tools.gateway.complete_json::<ClarifyReply>(request, "clarify", trace).await {
        Ok(reply) => {
            let questions: Vec<String> = reply
                .questions
                .into_iter()
                .map(|q| q.trim().to_string())
                .filter(|q| !q.is_empty())
                .take(MAX_CLARIFYING_QUESTIONS)
                .collect();
            match reply.decision {
                ClarifyDecision::Ask if !questions.is_empty() => ClarificationOutcome {
                    decision: ClarifyDecision::Ask,
                    questions,
                },
                _ => ClarificationOutcome::proceed(),
            }
        }
        Err(e) => {
            trace.warn("clarify", format!("clarification skipped: {e}"));
            ClarificationOutcome::proceed()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewrittenQuery {
    pub text: String,
    pub constraints: RouteConstraints,
}

#[derive(Deserialize)]
struct RewriteReply {
    query: String,
    #[serde(default)]
    time_range: Option<TimeRange>,
    #[serde(default)]
    recent: Option<bool>,
    #[serde(default)]
    domains: Option<Vec<String>>,
}

/// The twelve months ending at `horizon`.
pub fn recent_window(horizon: NaiveDate) -> TimeRange {
    let start = horizon
        .checked_sub_months(Months::new(12))
        .and_then(|d| d.succ_opt())
        .unwrap_or(horizon);
    TimeRange { start, end: horizon }
}

pub async fn rewrite(
    tools: &LlmTools,
    query: &str,
    history: &[HistoryTurn],
    horizon: NaiveDate,
    trace: &mut Trace,
) -> RewrittenQuery {
    let hist = format_history(history);
    let horizon_s = horizon.to_string();
    let request = tools.request("rewrite", &[("query", query), ("history", &hist), ("horizon_date", &horizon_s)]);
    let fallback = || RewrittenQuery {
        text: query.trim().to_string(),
        constraints: RouteConstraints::default(),
    };
    let reply = match tools.gateway.complete_json::<RewriteReply>(request, "rewrite", trace).await {
        Ok(r) => r,
        Err(e) => {
            trace.warn("rewrite", format!("using the original query: {e}"));
            return fallback();
        }
    };
    let text = reply.query.trim().to_string();
    if text.is_empty() {
        trace.warn("rewrite", "empty rewrite, using the original query");
        return fallback();
    }
    let time_range = reply
        .time_range
        .or_else(|| reply.recent.unwrap_or(false).then(|| recent_window(horizon)));
    let domains: Option<BTreeSet<String>> = reply.domains.map(|ds| {
        ds.into_iter()
            .map(|d| d.trim().to_string())
            .filter(|d| !d.is_empty())
            .collect()
    });
    RewrittenQuery {
        text,
        constraints: RouteConstraints { time_range, domains }.normalized(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQueryPlan {
    pub sub_queries: Vec<String>,
}

#[derive(Deserialize)]
struct DecomposeReply {
    subqueries: Vec<String>,
}

pub async fn decompose(tools: &LlmTools, rewritten: &RewrittenQuery, max_sub: usize, trace: &mut Trace) -> SubQueryPlan {
    let max_sub = max_sub.max(1);
    let single = || SubQueryPlan {
        sub_queries: vec![rewritten.text.clone()],
    };
    let max_s = max_sub.to_string();
    let request = tools.request("decompose", &[("query", &rewritten.text), ("max_sub", &max_s)]);
    match tools.gateway.complete_json::<DecomposeReply>(request, "decompose", trace).await {
        Ok(reply) => {
            let mut seen = BTreeSet::new();
            let sub_queries: Vec<String> = reply
                .subqueries
                .into_iter()
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty() && seen.insert(s.clone()))
                .take(max_sub)
                .collect();
            if sub_queries.is_empty() {
                single()
            } else {
                SubQueryPlan { sub_queries }
            }
        }
        Err(e) => {
            trace.warn("decompose", format!("treating the query as atomic: {e}"));
            single()
        }
    }
}
