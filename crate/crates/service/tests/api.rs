use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use sciqa_core::orchestrator::PipelineConfig;
use sciqa_core::testkit::{self, fixture_catalog, fixture_deps};
use sciqa_service::config::ApiConfig;
use sciqa_service::store::SessionStore;
use sciqa_service::{router, AppState};

const TOKEN: &str = "test-token";

fn state(max_turns: usize, ready: bool) -> Arc<AppState> {
    let api = ApiConfig {
        auth_token: Some(TOKEN.into()),
        max_concurrent_turns: max_turns,
        ..ApiConfig::default()
    };
    let state = AppState::new(api, PipelineConfig::default(), SessionStore::in_memory());
    if ready {
        state.set_ready(fixture_deps(fixture_catalog()));
    }
    state
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).header(header::AUTHORIZATION, format!("Bearer {TOKEN}")).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header(header::AUTHORIZATION, format!("Bearer {TOKEN}"))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

async fn send(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, String) {
    let resp = router(Arc::clone(state)).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn new_session(state: &Arc<AppState>) -> String {
    let (status, body) = send(state, post("/v1/sessions", Value::Null)).await;
    assert_eq!(status, StatusCode::CREATED);
    serde_json::from_str::<Value>(&body).unwrap()["session_id"].as_str().unwrap().to_string()
}

fn sse_events(body: &str) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    for block in body.split("\n\n") {
        let mut kind = None;
        let mut data = String::new();
        for line in block.lines() {
            if let Some(k) = line.strip_prefix("event:") {
                kind = Some(k.trim().to_string());
            } else if let Some(d) = line.strip_prefix("data:") {
                data.push_str(d.trim_start());
            }
        }
        if let Some(k) = kind {
            out.push((k, serde_json::from_str(&data).unwrap()));
        }
    }
    out
}

#[tokio::test]
async fn health_reports_starting_then_ok() {
    let s = state(4, false);
    let (status, body) = send(&s, Request::get("/v1/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(body.contains("starting"));
    s.set_ready(fixture_deps(fixture_catalog()));
    let (status, body) = send(&s, Request::get("/v1/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["shards"], 4);
}

#[tokio::test]
async fn api_routes_require_the_bearer_token() {
    let s = state(4, true);
    let req = Request::get("/v1/shards").body(Body::empty()).unwrap();
    assert_eq!(send(&s, req).await.0, StatusCode::UNAUTHORIZED);
    let req = Request::get("/v1/shards").header(header::AUTHORIZATION, "Bearer wrong").body(Body::empty()).unwrap();
    assert_eq!(send(&s, req).await.0, StatusCode::UNAUTHORIZED);
    let (status, body) = send(&s, get("/v1/shards")).await;
    assert_eq!(status, StatusCode::OK);
    let shards: Vec<Value> = serde_json::from_str(&body).unwrap();
    assert_eq!(shards.len(), 4);
}

#[tokio::test]
async fn message_streams_trace_and_persists_turn() {
    let s = state(4, true);
    let id = new_session(&s).await;
    let (status, body) = send(&s, post(&format!("/v1/sessions/{id}/messages"), serde_json::json!({"text": testkit::DIRECT_QUERY}))).await;
    assert_eq!(status, StatusCode::OK);
    let events = sse_events(&body);
    let kinds: Vec<&str> = events.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(kinds.last(), Some(&"final_answer"));
    assert!(kinds.contains(&"plan_chosen"));
    for (i, (_, data)) in events.iter().enumerate() {
        assert_eq!(data["seq"], i as u64);
    }
    let (status, body) = send(&s, get(&format!("/v1/sessions/{id}"))).await;
    assert_eq!(status, StatusCode::OK);
    let session: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(session["turns"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn error_statuses() {
    let s = state(4, true);
    let (status, _) = send(&s, post("/v1/sessions/nope/messages", serde_json::json!({"text": "hi"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(send(&s, get("/v1/sessions/nope")).await.0, StatusCode::NOT_FOUND);

    let id = new_session(&s).await;
    let uri = format!("/v1/sessions/{id}/messages");
    let (status, _) = send(&s, post(&uri, serde_json::json!({"text": "  "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let handle = s.sessions().get(&id).await.unwrap().unwrap();
    let guard = handle.lock().await;
    let (status, _) = send(&s, post(&uri, serde_json::json!({"text": "hi"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    drop(guard);

    let not_ready = state(4, false);
    let id = new_session(&not_ready).await;
    let (status, _) = send(&not_ready, post(&format!("/v1/sessions/{id}/messages"), serde_json::json!({"text": "hi"}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn turn_limit_answers_503() {
    let s = state(1, true);
    let id = new_session(&s).await;
    let other = new_session(&s).await;
    let first = router(Arc::clone(&s))
        .oneshot(post(&format!("/v1/sessions/{id}/messages"), serde_json::json!({"text": testkit::RETRIEVAL_QUERY})))
        .await
        .unwrap();
    assert_eq!(first.status(), StatusCode::OK);
    let (status, _) = send(&s, post(&format!("/v1/sessions/{other}/messages"), serde_json::json!({"text": "hi"}))).await;
    let body = first.into_body().collect().await.unwrap().to_bytes();
    assert!(String::from_utf8_lossy(&body).contains("final_answer"));
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}
