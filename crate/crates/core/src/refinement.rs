//! Self-review of a draft answer and feedback-driven revision.

use serde::{Deserialize, Serialize};

use crate::generation::{attach_citations, AnswerDraft, AnswerWithCitations, CitationConfig, GENERATION_TEMPERATURE};
use crate::postprocess::{numbered_passages, Passage};
use crate::query_tools::LlmTools;
use crate::trace::Trace;

pub const DEFAULT_MAX_ROUNDS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    NeedsFix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IssueKind {
    Accuracy,
    Completeness,
    Grammar,
    Semantics,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub kind: IssueKind,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionReport {
    pub verdict: Verdict,
    #[serde(default)]
    pub issues: Vec<Issue>,
}

impl ReflectionReport {
    pub fn pass() -> Self {
        ReflectionReport {
            verdict: Verdict::Pass,
            issues: Vec::new(),
        }
    }

    pub fn needs_fix(&self) -> bool {
        self.verdict == Verdict::NeedsFix
    }

    fn normalized(mut self) -> Self {
        if self.verdict == Verdict::Pass {
            self.issues.clear();
        }
        self
    }

    pub fn feedback(&self) -> String {
        self.issues
            .iter()
            .map(|i| {
                let kind = serde_json::to_value(i.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                format!("- {kind}: {}", i.note.trim())
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Reviews the answer against the passages. Any failure yields a pass.
pub async fn reflect(
    tools: &LlmTools,
    query_text: &str,
    answer_text: &str,
    passages: &[Passage],
    trace: &mut Trace,
) -> ReflectionReport {
    if answer_text.trim().is_empty() {
        trace.warn("reflect", "empty answer not reviewed");
        return ReflectionReport::pass();
    }
    let listing = numbered_passages(passages);
    let request = tools.request("reflect", &[("query", query_text), ("answer", answer_text), ("passages", &listing)]);
    match tools.gateway.complete_json::<ReflectionReport>(request, "reflect", trace).await {
        Ok(report) => report.normalized(),
        Err(e) => {
            trace.warn("reflect", format!("reflection skipped: {e}"));
            ReflectionReport::pass()
        }
    }
}

/// Rewrites the answer to address the report's issues and recomputes citations
/// on the new text. On failure the original answer is returned.
pub async fn polish(
    tools: &LlmTools,
    query_text: &str,
    answer: &AnswerWithCitations,
    report: &ReflectionReport,
    passages: &[Passage],
    citation: &CitationConfig,
    trace: &mut Trace,
) -> AnswerWithCitations {
    if !report.needs_fix() {
        return answer.clone();
    }
    let listing = numbered_passages(passages);
    let feedback = report.feedback();
    let request = tools.request(
        "polish",
        &[("query", query_text), ("answer", &answer.text), ("feedback", &feedback), ("passages", &listing)],
    );
    match tools.gateway.complete(request.temperature(GENERATION_TEMPERATURE), trace).await {
        Ok(text) => {
            let draft = AnswerDraft {
                text: text.trim().to_string(),
                used_passage_ids: passages.iter().map(|p| p.source_id.clone()).collect(),
            };
            attach_citations(&draft, passages, citation)
        }
        Err(e) => {
            trace.warn("polish", format!("revision failed, keeping draft: {e}"));
            answer.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Script, ScriptedClient, ScriptedFailure};
    use crate::llm::{Gateway, GatewayConfig};
    use crate::prompts::PromptSet;
    use crate::trace::EventKind;
    use std::sync::Arc;

    fn tools(scripts: Vec<Script>) -> LlmTools {
        let cfg = GatewayConfig {
            backoff_ms: 1,
            ..GatewayConfig::default()
        };
        LlmTools::new(Gateway::new(Arc::new(ScriptedClient::new(scripts)), cfg), Arc::new(PromptSet::default()))
    }

    fn rt() -> tokio::runtime::Runtime {
        tokio::runtime::Builder::new_current_thread().enable_time().build().unwrap()
    }

    fn passages() -> Vec<Passage> {
        vec![Passage {
            source_id: "p1".into(),
            text: "policy gradient methods optimise a clipped surrogate objective".into(),
            member_chunks: vec!["p1#0".into()],
            best_score: 1.0,
            is_web: false,
        }]
    }

    #[test]
    fn flagged_gap_yields_completeness_issue() {
        let t = tools(vec![Script::reply(
            "reflect",
            "",
            r#"{"verdict":"needs_fix","issues":[{"kind":"completeness","note":"variants missing"}]}"#,
        )]);
        let mut trace = Trace::new("s", 0);
        let r = rt().block_on(reflect(&t, "q", "A draft.", &passages(), &mut trace));
        assert!(r.needs_fix());
        assert_eq!(r.issues, vec![Issue { kind: IssueKind::Completeness, note: "variants missing".into() }]);
    }

    #[test]
    fn pass_clears_issues_and_schema_failure_passes() {
        let t = tools(vec![Script::reply("reflect", "", r#"{"verdict":"pass","issues":[{"kind":"grammar","note":"x"}]}"#)]);
        let mut trace = Trace::new("s", 0);
        assert_eq!(rt().block_on(reflect(&t, "q", "A.", &[], &mut trace)), ReflectionReport::pass());

        let t = tools(vec![Script::reply("reflect", "", "not json at all")]);
        let mut trace = Trace::new("s", 0);
        assert_eq!(rt().block_on(reflect(&t, "q", "A.", &[], &mut trace)), ReflectionReport::pass());
        assert!(trace.events().iter().any(|e| e.kind == EventKind::Warning));
    }

    #[test]
    fn polish_recomputes_citations_and_survives_failure() {
        let report = ReflectionReport {
            verdict: Verdict::NeedsFix,
            issues: vec![Issue { kind: IssueKind::Completeness, note: "say more".into() }],
        };
        let original = AnswerWithCitations::uncited("Short.".into());
        let t = tools(vec![Script::reply(
            "polish",
            "say more",
            "Policy gradient methods optimise a clipped surrogate objective. Done.",
        )]);
        let mut trace = Trace::new("s", 0);
        let cfg = CitationConfig::default();
        let out = rt().block_on(polish(&t, "q", &original, &report, &passages(), &cfg, &mut trace));
        assert_eq!(out.sentences.len(), 2);
        assert_eq!(out.citations.len(), 1);
        assert_eq!(out.citations[0].source_id, "p1");

        let t = tools(vec![Script::fail("polish", "", ScriptedFailure::Transport)]);
        let mut trace = Trace::new("s", 0);
        let out = rt().block_on(polish(&t, "q", &original, &report, &passages(), &cfg, &mut trace));
        assert_eq!(out, original);
        assert!(trace.events().iter().any(|e| e.kind == EventKind::Warning));
    }
}
