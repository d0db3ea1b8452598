use chrono::NaiveDate;
use serde_json::json;

use sciqa_core::llm::{ChatMessage, ChatRequest, LlmClient, Script, ScriptedClient, ScriptedFailure};
use sciqa_core::query_tools::{clarify, decompose, recent_window, rewrite, ClarifyDecision, HistoryTurn, RewrittenQuery};
use sciqa_core::retrieval::{RouteConstraints, TimeRange};
use sciqa_core::testkit::scripted_tools;
use sciqa_core::trace::{EventKind, Trace};

fn d(y: i32, m: u32, day: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, day).unwrap()
}

fn warnings(trace: &Trace) -> usize {
    trace.events().iter().filter(|e| e.kind == EventKind::Warning).count()
}

#[tokio::test]
async fn clarify_caps_questions_at_three() {
    let reply = json!({"decision": "ask", "questions": ["a?", "b?", " ", "c?", "d?", "e?"]}).to_string();
    let tools = scripted_tools(vec![Script::reply("clarify", "", reply)]);
    let mut trace = Trace::new("s", 0);
    let out = clarify(&tools, "Tell me about it", &[], &mut trace).await;
    assert_eq!(out.decision, ClarifyDecision::Ask);
    assert_eq!(out.questions, vec!["a?", "b?", "c?"]);
}

#[tokio::test]
async fn clarify_ask_without_questions_proceeds() {
    let tools = scripted_tools(vec![Script::reply("clarify", "", r#"{"decision":"ask","questions":[]}"#)]);
    let mut trace = Trace::new("s", 0);
    assert_eq!(clarify(&tools, "q", &[], &mut trace).await.decision, ClarifyDecision::Proceed);
}

#[tokio::test]
async fn clarify_failure_proceeds_with_warning() {
    let tools = scripted_tools(vec![Script::fail("clarify", "", ScriptedFailure::Transport)]);
    let mut trace = Trace::new("s", 0);
    assert_eq!(clarify(&tools, "q", &[], &mut trace).await.decision, ClarifyDecision::Proceed);
    assert_eq!(warnings(&trace), 1);
}

#[tokio::test]
async fn rewrite_resolves_recent_and_history() {
    let tools = scripted_tools(vec![Script::reply_all(
        "rewrite",
        &["User: What is PPO?", "its variants", "2024-06-30"],
        json!({"query": "Recent variants of proximal policy optimization", "recent": true, "domains": ["cs.LG", " "]}).to_string(),
    )]);
    let history = vec![HistoryTurn { user: "What is PPO?".into(), assistant: "A policy gradient method.".into() }];
    let mut trace = Trace::new("s", 0);
    let out = rewrite(&tools, "What are its variants lately?", &history, d(2024, 6, 30), &mut trace).await;
    assert_eq!(out.text, "Recent variants of proximal policy optimization");
    assert_eq!(out.constraints.time_range, Some(TimeRange { start: d(2023, 7, 1), end: d(2024, 6, 30) }));
    assert_eq!(out.constraints.domains, Some(["cs.LG".to_string()].into_iter().collect()));
    assert_eq!(recent_window(d(2024, 6, 30)).start, d(2023, 7, 1));
}

#[tokio::test]
async fn rewrite_explicit_range_and_fallback() {
    let tools = scripted_tools(vec![
        Script::reply("rewrite", "2023", json!({"query": "q", "time_range": {"start": "2023-01-01", "end": "2023-12-31"}}).to_string()),
        Script::reply("rewrite", "", "I cannot do that"),
    ]);
    let mut trace = Trace::new("s", 0);
    let out = rewrite(&tools, "papers from 2023", &[], d(2024, 6, 30), &mut trace).await;
    assert_eq!(out.constraints.time_range, Some(TimeRange { start: d(2023, 1, 1), end: d(2023, 12, 31) }));

    let out = rewrite(&tools, "  original  ", &[], d(2024, 6, 30), &mut trace).await;
    assert_eq!(out, RewrittenQuery { text: "original".into(), constraints: RouteConstraints::default() });
    assert_eq!(warnings(&trace), 1);
}

#[tokio::test]
async fn decompose_bounds_and_fallback() {
    let rq = RewrittenQuery { text: "compare a and b".into(), constraints: RouteConstraints::default() };
    let many = json!({"subqueries": ["a", "b", "a", " ", "c", "d", "e", "f"]}).to_string();
    let tools = scripted_tools(vec![Script::reply("decompose", "", many)]);
    let mut trace = Trace::new("s", 0);
    let out = decompose(&tools, &rq, 4, &mut trace).await;
    assert_eq!(out.sub_queries, vec!["a", "b", "c", "d"]);
    assert_eq!(decompose(&tools, &rq, 0, &mut trace).await.sub_queries.len(), 1);

    let tools = scripted_tools(vec![Script::fail("decompose", "", ScriptedFailure::Timeout)]);
    let out = decompose(&tools, &rq, 4, &mut trace).await;
    assert_eq!(out.sub_queries, vec!["compare a and b"]);
    assert_eq!(warnings(&trace), 1);
}

#[tokio::test]
async fn every_gateway_call_is_recorded_once() {
    let tools = scripted_tools(vec![
        Script::reply("clarify", "", r#"{"decision":"proceed","questions":[]}"#),
        Script::reply("rewrite", "", r#"{"query":"x"}"#),
        Script::reply("decompose", "", r#"{"subqueries":["x"]}"#),
    ]);
    let mut trace = Trace::new("s", 0);
    clarify(&tools, "x", &[], &mut trace).await;
    let rq = rewrite(&tools, "x", &[], d(2024, 1, 1), &mut trace).await;
    decompose(&tools, &rq, 4, &mut trace).await;
    trace.emit(EventKind::FinalAnswer, json!({}));
    let tags: Vec<String> = trace.events().iter().flat_map(|e| e.calls.iter().map(|c| c.tag.clone())).collect();
    assert_eq!(tags, vec!["clarify", "rewrite", "decompose"]);
    assert!(trace.events()[0].calls.iter().all(|c| c.ok && c.retries == 0));
}

#[tokio::test]
async fn scripted_client_is_deterministic() {
    let client = ScriptedClient::from_json(r#"[{"tag": "*", "match": ["alpha", "beta"], "response": "both"}, {"tag": "*", "response": "other"}]"#).unwrap();
    let req = ChatRequest::new("x", vec![ChatMessage::user("alpha and beta")]);
    assert_eq!(client.complete(&req).await.unwrap(), "both");
    assert_eq!(client.complete(&req).await.unwrap(), "both");
    let other = ChatRequest::new("y", vec![ChatMessage::user("alpha only")]);
    assert_eq!(client.complete(&other).await.unwrap(), "other");
    assert_eq!(client.mode(), "scripted");
}
