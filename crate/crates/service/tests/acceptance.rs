use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use futures::StreamExt;
use rand::rngs::StdRng;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tokio::runtime::Runtime;
use tokio::sync::oneshot;

use sciqa_core::corpus::{Chunk, ShardKey};
use sciqa_core::eval::{run_eval, Criterion, EvalItem};
use sciqa_core::generation::{attach_citations, AnswerDraft, CitationConfig};
use sciqa_core::index::{build_shard, load_shard, persist_shard, Bm25Params, Embedder, HashingEmbedder, IndexCatalog};
use sciqa_core::orchestrator::{handle_message, Deps, PipelineConfig, Session};
use sciqa_core::postprocess::{drop_near_duplicates, fuse, Passage, DEFAULT_JACCARD_THRESHOLD};
use sciqa_core::retrieval::{
    bm25_retrieve, hybrid_retrieve, select_shards, RetrievedChunk, RetrievedItem, RouteConstraints, Source, TimeRange, WebResult,
};
use sciqa_core::testkit::{self, oracle, random_chunks, random_query};
use sciqa_core::trace::{EventKind, TraceEvent};
use sciqa_service::config::{ServiceConfig, WebMode};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:?}, limit {limit:?}");
    Ok(took)
}

fn key() -> ShardKey {
    ShardKey::new("2024-Q1", "cs")
}

fn bm25_oracle() -> Outcome {
    let start = Instant::now();
    let params = Bm25Params::default();
    let mut compared = 0;
    for corpus in 0..5u64 {
        let mut rng = StdRng::seed_from_u64(0xb25 + corpus);
        let n = rng.random_range(100..=500);
        let vocab = rng.random_range(20..400);
        let chunks = random_chunks(corpus, n, vocab, &key());
        let index = build_shard(&key(), chunks.clone(), &HashingEmbedder::default(), params).map_err(|e| e.to_string())?;
        for _ in 0..50 {
            let q = random_query(&mut rng, vocab);
            let got: Vec<(String, f64)> = index.bm25_search(&q, 10).into_iter().map(|h| (h.chunk_id, h.score)).collect();
            let want = oracle::bm25(&chunks, &q, params.k1, params.b, 10);
            ensure!(got.len() == want.len(), "corpus {corpus} query {q:?}: {} hits, oracle {}", got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                ensure!(g.0 == w.0, "corpus {corpus} query {q:?}: id {} vs {}", g.0, w.0);
                ensure!((g.1 - w.1).abs() <= 1e-9, "corpus {corpus} query {q:?}: score {} vs {}", g.1, w.1);
            }
            compared += 1;
        }
    }
    let took = within(start, Duration::from_secs(5))?;
    Ok(format!("{compared} queries over 5 corpora, {took:.2?}"))
}

fn hybrid_oracle() -> Outcome {
    let start = Instant::now();
    let emb = HashingEmbedder::default();
    let mut compared = 0;
    for corpus in 0..5u64 {
        let mut rng = StdRng::seed_from_u64(0x4bd + corpus);
        let n = rng.random_range(100..=500);
        let vocab = rng.random_range(20..400);
        let chunks = random_chunks(corpus + 100, n, vocab, &key());
        let index = build_shard(&key(), chunks.clone(), &emb, Bm25Params::default()).map_err(|e| e.to_string())?;
        for _ in 0..50 {
            let q = random_query(&mut rng, vocab);
            let got: Vec<(String, f64)> = index
                .hybrid_search(&emb.embed_dense(&q), &emb.embed_sparse(&q), 10)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|h| (h.chunk_id, h.score))
                .collect();
            let want = oracle::hybrid(&chunks, &emb, &q, 10);
            ensure!(got == want, "corpus {corpus} query {q:?}: {got:?} vs {want:?}");
            compared += 1;
        }
    }
    let took = within(start, Duration::from_secs(5))?;
    Ok(format!("{compared} queries over 5 corpora, {took:.2?}"))
}

fn random_constraints(rng: &mut StdRng) -> RouteConstraints {
    const DOMAINS: &[&str] = &["cs", "cs.LG", "cs.CL", "stat", "stat.ML", "math", "q-bio"];
    let time_range = rng.random_bool(0.75).then(|| {
        let start = NaiveDate::from_ymd_opt(2023, 1, 1).unwrap() + chrono::Duration::days(rng.random_range(0..700));
        TimeRange {
            start,
            end: start + chrono::Duration::days(rng.random_range(0..300)),
        }
    });
    let domains = rng.random_bool(0.75).then(|| {
        let k = rng.random_range(1..=2);
        DOMAINS.choose_multiple(rng, k).map(|d| d.to_string()).collect()
    });
    RouteConstraints { time_range, domains }.normalized()
}

fn routing_soundness() -> Outcome {
    let catalog = testkit::fixture_catalog();
    let emb = HashingEmbedder::default();
    let mut rng = StdRng::seed_from_u64(0x7007);
    let mut violations = Vec::new();
    let mut opened = 0;
    for case in 0..20 {
        let c = random_constraints(&mut rng);
        let allowed = oracle::allowed_shards(&catalog.keys(), &c);
        let selected: BTreeSet<ShardKey> = select_shards(&catalog, &c).into_iter().collect();
        if selected != allowed {
            violations.push(format!("case {case}: selected {selected:?}, allowed {allowed:?}"));
        }
        catalog.evict_all();
        catalog.clear_access_log();
        let h = hybrid_retrieve(&catalog, &emb, "proximal policy optimization language model", &c, 30);
        let b = bm25_retrieve(&catalog, "proximal policy optimization language model", &c, 80);
        for k in catalog.access_log() {
            opened += 1;
            if !allowed.contains(&k) {
                violations.push(format!("case {case}: opened {k:?}"));
            }
        }
        for r in h.results.iter().chain(&b.results) {
            if !r.shard_key.as_ref().is_some_and(|k| allowed.contains(k)) {
                violations.push(format!("case {case}: result {} from {:?}", r.id(), r.shard_key));
            }
        }
    }
    ensure!(violations.is_empty(), "{} violations, first: {}", violations.len(), violations[0]);
    Ok(format!("20 cases, {opened} shard opens, 0 violations"))
}

async fn run_turns(deps: &Deps, config: &PipelineConfig, session_id: &str, texts: &[&str]) -> Vec<TraceEvent> {
    let mut session = Session::new(session_id);
    let mut events = Vec::new();
    for text in texts {
        let mut trace = session.begin_exchange();
        handle_message(&mut session, text, deps, config, &mut trace).await.expect("turn runs");
        events.extend(trace.events().iter().cloned());
    }
    events
}

fn pipeline_constants(rt: &Runtime) -> Outcome {
    let start = Instant::now();
    let catalog = testkit::fixture_catalog();
    let summaries = catalog.summaries();
    ensure!(summaries.len() == 4, "fixture has {} shards", summaries.len());
    ensure!(summaries.iter().all(|s| s.chunk_count >= 40), "fixture shard below 40 chunks: {summaries:?}");
    let deps = testkit::fixture_deps(catalog);
    let config = PipelineConfig::default();
    let events = rt.block_on(run_turns(&deps, &config, "constants", &[testkit::RETRIEVAL_QUERY]));
    ensure!(events.last().map(|e| e.kind) == Some(EventKind::FinalAnswer), "turn did not answer");

    let sub_queries = events.iter().filter(|e| e.kind == EventKind::SubAnswer).count();
    ensure!(sub_queries >= 1, "no sub-queries answered");
    let mut max_hybrid = 0;
    let mut max_bm25 = 0;
    let mut max_web = 0;
    for idx in 0..sub_queries as u64 {
        let of = |kind: EventKind| {
            events
                .iter()
                .filter(move |e| e.kind == kind && e.payload["sub_query_index"].as_u64() == Some(idx))
        };
        let selected: BTreeSet<String> = of(EventKind::ShardsSelected)
            .flat_map(|e| e.payload["shards"].as_array().cloned().unwrap_or_default())
            .filter_map(|s| s.as_str().map(String::from))
            .collect();
        let mut pool = BTreeSet::new();
        for e in of(EventKind::ChunksRetrieved) {
            let count = e.payload["count"].as_u64().unwrap_or(0);
            for c in e.payload["chunks"].as_array().into_iter().flatten() {
                pool.insert(c["id"].as_str().unwrap_or_default().to_string());
            }
            match e.payload["source"].as_str() {
                Some("hybrid") => {
                    for (shard, n) in e.payload["per_shard"].as_object().into_iter().flatten() {
                        let n = n.as_u64().unwrap_or(0);
                        ensure!(selected.contains(shard), "sub-query {idx}: hybrid hit from unselected {shard}");
                        ensure!(n <= 30, "sub-query {idx}: {n} hybrid chunks from {shard}");
                        max_hybrid = max_hybrid.max(n);
                    }
                }
                Some("bm25") => {
                    ensure!(count <= 80, "sub-query {idx}: {count} bm25 chunks");
                    max_bm25 = max_bm25.max(count);
                }
                Some("web") => {
                    ensure!(count <= 10, "sub-query {idx}: {count} web results");
                    max_web = max_web.max(count);
                }
                other => return Err(format!("unknown source {other:?}")),
            }
        }
        let reranked: Vec<u64> = of(EventKind::Reranked).map(|e| e.payload["count"].as_u64().unwrap_or(0)).collect();
        let want = pool.len().min(10) as u64;
        ensure!(reranked == vec![want], "sub-query {idx}: reranked {reranked:?}, expected [{want}]");
    }
    ensure!(max_web == 10, "web fixture offers 12 results but {max_web} were kept");
    let took = within(start, Duration::from_secs(10))?;
    Ok(format!(
        "{sub_queries} sub-queries; max hybrid/shard {max_hybrid}, bm25 {max_bm25}, web {max_web}, rerank 10; {took:.2?}"
    ))
}

const RETRIEVAL_KINDS: &[EventKind] = &[
    EventKind::QueryRewritten,
    EventKind::SubqueriesPlanned,
    EventKind::ShardsSelected,
    EventKind::ChunksRetrieved,
    EventKind::Reranked,
    EventKind::PassagesFused,
    EventKind::PassagesFiltered,
    EventKind::SubAnswer,
];

fn direct_route_purity(rt: &Runtime) -> Outcome {
    let deps = testkit::fixture_deps(testkit::fixture_catalog());
    deps.catalog.clear_access_log();
    let events = rt.block_on(run_turns(&deps, &PipelineConfig::default(), "direct", &[testkit::DIRECT_QUERY]));
    let plan = events.iter().find(|e| e.kind == EventKind::PlanChosen).ok_or("no plan_chosen event")?;
    ensure!(plan.payload["route"] == "direct", "planner chose {}", plan.payload["route"]);
    let leaked: Vec<&str> = events.iter().filter(|e| RETRIEVAL_KINDS.contains(&e.kind)).map(|e| e.kind.as_str()).collect();
    ensure!(leaked.is_empty(), "retrieval events in direct route: {leaked:?}");
    ensure!(deps.catalog.access_log().is_empty(), "direct route opened shards");
    ensure!(events.last().map(|e| e.kind) == Some(EventKind::FinalAnswer), "no final answer");
    Ok(format!("{} events, 0 retrieval-kind", events.len()))
}

fn citation_argmax() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xc17e);
    let mut passages = Vec::new();
    let mut copied = Vec::new();
    for p in 0..12 {
        let sentences: Vec<String> = (0..3)
            .map(|s| {
                let n = rng.random_range(6..14);
                let words: Vec<String> = (0..n).map(|_| format!("p{p}w{}", rng.random_range(0..20) + 20 * s)).collect();
                format!("{}.", words.join(" "))
            })
            .collect();
        copied.push((format!("2401.{p:05}"), sentences[rng.random_range(0..3)].clone()));
        passages.push(Passage {
            source_id: format!("2401.{p:05}"),
            text: sentences.join(" "),
            member_chunks: vec![format!("2401.{p:05}#0")],
            best_score: 1.0,
            is_web: false,
        });
    }
    copied.shuffle(&mut rng);
    let text = copied.iter().map(|(_, s)| s.as_str()).collect::<Vec<_>>().join(" ");
    let draft = AnswerDraft {
        text,
        used_passage_ids: passages.iter().map(|p| p.source_id.clone()).collect(),
    };
    let answer = attach_citations(&draft, &passages, &CitationConfig::default());
    ensure!(answer.sentences.len() == copied.len(), "{} sentences, expected {}", answer.sentences.len(), copied.len());

    let as_chunks: Vec<Chunk> = passages
        .iter()
        .map(|p| Chunk {
            chunk_id: p.source_id.clone(),
            paper_id: p.source_id.clone(),
            ordinal: 0,
            text: p.text.clone(),
            token_count: 0,
            shard_key: key(),
        })
        .collect();
    let cfg = CitationConfig::default();
    let mut hits = 0;
    for (i, (source, _)) in copied.iter().enumerate() {
        let cited = answer.citations.iter().find(|c| c.sentence_index == i).map(|c| c.source_id.as_str());
        ensure!(cited == Some(source.as_str()), "sentence {i} cited {cited:?}, copied from {source}");
        let best = oracle::bm25(&as_chunks, answer.sentence(i), cfg.params.k1, cfg.params.b, 1);
        ensure!(best.first().map(|b| b.0.as_str()) == cited, "sentence {i}: oracle argmax {best:?}, cited {cited:?}");
        hits += 1;
    }
    Ok(format!("{hits}/{} sentences cite their source (100%)", copied.len()))
}

fn end_to_end_determinism(rt: &Runtime) -> Outcome {
    let script = [
        testkit::AMBIGUOUS_QUERY,
        testkit::CLARIFICATION_REPLY,
        testkit::DIRECT_QUERY,
        testkit::RETRIEVAL_QUERY,
    ];
    let run = || {
        let deps = testkit::fixture_deps(testkit::fixture_catalog());
        let events = rt.block_on(run_turns(&deps, &PipelineConfig::default(), "determinism", &script));
        events.iter().map(TraceEvent::canonical_json).collect::<Vec<_>>().join("\n")
    };
    let a = run();
    let b = run();
    ensure!(a.contains("\"clarification_asked\""), "conversation never suspended for clarification");
    ensure!(a.matches("\"final_answer\"").count() == 3, "expected 3 answered turns");
    if a != b {
        let line = a.lines().zip(b.lines()).position(|(x, y)| x != y).unwrap_or(0);
        return Err(format!("traces diverge at event line {line}"));
    }
    Ok(format!("{} events, {} bytes identical", a.lines().count(), a.len()))
}

fn random_results(rng: &mut StdRng) -> Vec<RetrievedChunk> {
    let n = rng.random_range(0..40);
    (0..n)
        .map(|rank| {
            let score = rng.random_range(0.0..1.0);
            if rng.random_bool(0.15) {
                let u = rng.random_range(0..4);
                return RetrievedChunk {
                    source: Source::Web,
                    item: RetrievedItem::Web(WebResult {
                        url: format!("https://example.org/{u}"),
                        title: format!("page {u}"),
                        snippet: format!("snippet {u}"),
                    }),
                    score,
                    rank: rank as u32 + 1,
                    shard_key: None,
                };
            }
            let paper = format!("2401.{:05}", rng.random_range(0..6));
            let ordinal = rng.random_range(0..8u32);
            RetrievedChunk {
                source: if rng.random_bool(0.5) { Source::Hybrid } else { Source::Bm25 },
                item: RetrievedItem::Chunk(Chunk {
                    chunk_id: Chunk::make_id(&paper, ordinal),
                    paper_id: paper.clone(),
                    ordinal,
                    text: format!("{paper} part {ordinal} text"),
                    token_count: 4,
                    shard_key: key(),
                }),
                score,
                rank: rank as u32 + 1,
                shard_key: Some(key()),
            }
        })
        .collect()
}

fn random_passages(rng: &mut StdRng) -> Vec<Passage> {
    let n = rng.random_range(1..12);
    (0..n)
        .map(|i| {
            let len = rng.random_range(3..30);
            let words: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..15))).collect();
            Passage {
                source_id: format!("src{i}"),
                text: words.join(" "),
                member_chunks: vec![format!("src{i}#0")],
                best_score: rng.random_range(0.0..1.0),
                is_web: false,
            }
        })
        .collect()
}

fn fusion_filter_laws() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xf05e);
    for case in 0..100 {
        let results = random_results(&mut rng);
        let fused = fuse(&results);
        let mut sources = BTreeSet::new();
        for p in &fused {
            ensure!(sources.insert(p.source_id.clone()), "case {case}: source {} split", p.source_id);
            if !p.is_web {
                let ords: Vec<u32> = p.member_chunks.iter().map(|c| c.rsplit('#').next().unwrap().parse().unwrap()).collect();
                ensure!(ords.windows(2).all(|w| w[0] < w[1]), "case {case}: {} members out of order {ords:?}", p.source_id);
            }
        }
        let distinct: BTreeSet<&str> = results.iter().map(|r| r.id()).collect();
        let members: usize = fused.iter().map(|p| p.member_chunks.len()).sum();
        ensure!(members == distinct.len(), "case {case}: {members} members for {} distinct chunks", distinct.len());

        let mut passages = random_passages(&mut rng);
        let original = passages[rng.random_range(0..passages.len())].clone();
        passages.push(Passage {
            source_id: "planted".into(),
            best_score: original.best_score / 2.0,
            ..original.clone()
        });
        let n = passages.len();
        let (kept, dropped) = drop_near_duplicates(passages, DEFAULT_JACCARD_THRESHOLD);
        ensure!(kept.len() + dropped.len() == n, "case {case}: passages lost");
        ensure!(dropped.iter().any(|p| p.source_id == "planted"), "case {case}: planted duplicate kept");
        let (again, none) = drop_near_duplicates(kept.clone(), DEFAULT_JACCARD_THRESHOLD);
        ensure!(none.is_empty() && again == kept, "case {case}: filter not idempotent");
    }
    Ok("100 random inputs".into())
}

fn fixture_path(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

struct Running {
    base: String,
    stop: oneshot::Sender<()>,
    task: tokio::task::JoinHandle<()>,
}

impl Running {
    async fn shutdown(self) {
        let _ = self.stop.send(());
        let _ = self.task.await;
    }
}

async fn start_service(dir: &Path) -> Result<Running, String> {
    let mut cfg = ServiceConfig {
        data_dir: dir.to_path_buf(),
        ..ServiceConfig::default()
    };
    cfg.server.bind = "127.0.0.1:0".into();
    cfg.llm.script = Some(fixture_path("scripts/pipeline.json"));
    cfg.web.mode = WebMode::Fixture;
    cfg.web.fixture = Some(fixture_path("web.json"));
    let listener = sciqa_service::bind(&cfg).await.map_err(|e| e.to_string())?;
    let base = format!("http://{}", listener.local_addr().map_err(|e| e.to_string())?);
    let (stop, rx) = oneshot::channel();
    let task = tokio::spawn(async move {
        if let Err(e) = sciqa_service::serve_on(listener, cfg, async {
            let _ = rx.await;
        })
        .await
        {
            eprintln!("service error: {e}");
        }
    });
    let http = reqwest::Client::new();
    for _ in 0..500 {
        if let Ok(r) = http.get(format!("{base}/v1/health")).send().await {
            if r.status().is_success() {
                return Ok(Running { base, stop, task });
            }
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    Err("service never became ready".into())
}

async fn create_session(http: &reqwest::Client, base: &str) -> Result<String, String> {
    let v: Value = http
        .post(format!("{base}/v1/sessions"))
        .send()
        .await
        .map_err(|e| e.to_string())?
        .json()
        .await
        .map_err(|e| e.to_string())?;
    v["session_id"].as_str().map(String::from).ok_or_else(|| format!("bad create reply {v}"))
}

async fn post_message(http: &reqwest::Client, base: &str, id: &str, text: &str) -> Result<Vec<TraceEvent>, String> {
    let resp = http
        .post(format!("{base}/v1/sessions/{id}/messages"))
        .json(&json!({ "text": text }))
        .send()
        .await
        .map_err(|e| e.to_string())?;
    if !resp.status().is_success() {
        return Err(format!("message rejected with {}", resp.status()));
    }
    let mut body = String::new();
    let mut stream = resp.bytes_stream();
    while let Some(chunk) = stream.next().await {
        body.push_str(&String::from_utf8_lossy(&chunk.map_err(|e| e.to_string())?));
    }
    let mut events = Vec::new();
    for block in body.split("\n\n") {
        let data: Vec<&str> = block.lines().filter_map(|l| l.strip_prefix("data:")).map(str::trim_start).collect();
        if !data.is_empty() {
            events.push(serde_json::from_str(&data.join("\n")).map_err(|e| format!("bad event: {e}"))?);
        }
    }
    Ok(events)
}

async fn get_session(http: &reqwest::Client, base: &str, id: &str) -> Result<Value, String> {
    let resp = http.get(format!("{base}/v1/sessions/{id}")).send().await.map_err(|e| e.to_string())?;
    ensure!(resp.status().is_success(), "GET session answered {}", resp.status());
    resp.json().await.map_err(|e| e.to_string())
}

fn search_fingerprint(catalog: &IndexCatalog, queries: &[String]) -> Result<Vec<Vec<(String, u64)>>, String> {
    let emb = HashingEmbedder::default();
    let mut out = Vec::new();
    for key in catalog.keys() {
        let shard = catalog.open_shard(&key).map_err(|e| e.to_string())?;
        for q in queries {
            out.push(shard.bm25_search(q, 20).into_iter().map(|h| (h.chunk_id, h.score.to_bits())).collect());
            let hybrid = shard.hybrid_search(&emb.embed_dense(q), &emb.embed_sparse(q), 20).map_err(|e| e.to_string())?;
            out.push(hybrid.into_iter().map(|h| (h.chunk_id, h.score.to_bits())).collect());
        }
    }
    Ok(out)
}

fn persistence_round_trip(rt: &Runtime) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let memory = testkit::fixture_catalog();
    let queries: Vec<String> = [
        "proximal policy optimization",
        "retrieval augmented generation language model",
        "bayesian posterior inference",
        "reward clipped surrogate objective",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();

    for k in memory.keys() {
        let shard = memory.open_shard(&k).map_err(|e| e.to_string())?;
        let path = dir.path().join("single").join(format!("{}.idx", k.file_stem()));
        persist_shard(&shard, &path).map_err(|e| e.to_string())?;
        let loaded = load_shard(&path).map_err(|e| e.to_string())?;
        ensure!(loaded.chunks() == shard.chunks(), "{k:?}: chunks differ after reload");
    }

    let index_dir = dir.path().join("index");
    {
        let disk = IndexCatalog::open(&index_dir).map_err(|e| e.to_string())?;
        testkit::ingest_records(&disk, &testkit::fixture_records());
    }
    let reopened = IndexCatalog::open_existing(&index_dir).map_err(|e| e.to_string())?;
    ensure!(reopened.summaries() == memory.summaries(), "shard summaries differ after reload");
    ensure!(
        search_fingerprint(&reopened, &queries)? == search_fingerprint(&memory, &queries)?,
        "search results differ after reload"
    );

    rt.block_on(async {
        let http = reqwest::Client::new();
        let first = start_service(&index_dir).await?;
        let id = create_session(&http, &first.base).await?;
        let asked = post_message(&http, &first.base, &id, testkit::AMBIGUOUS_QUERY).await?;
        ensure!(
            asked.last().map(|e| e.kind) == Some(EventKind::ClarificationAsked),
            "fixture query did not ask for clarification"
        );
        let before = get_session(&http, &first.base, &id).await?;
        ensure!(!before["pending_clarification"].is_null(), "pending clarification not recorded");
        first.shutdown().await;

        let second = start_service(&index_dir).await?;
        let after = get_session(&http, &second.base, &id).await?;
        ensure!(before == after, "session changed across restart");
        let events = post_message(&http, &second.base, &id, testkit::CLARIFICATION_REPLY).await?;
        ensure!(
            events.last().map(|e| e.kind) == Some(EventKind::FinalAnswer),
            "pending clarification not resumed after restart"
        );
        post_message(&http, &second.base, &id, testkit::DIRECT_QUERY).await?;
        second.shutdown().await;

        let third = start_service(&index_dir).await?;
        let resumed = get_session(&http, &third.base, &id).await?;
        third.shutdown().await;
        let turns = resumed["turns"].as_array().cloned().unwrap_or_default();
        ensure!(turns.len() == 2, "expected 2 turns after restarts, found {}", turns.len());
        ensure!(
            turns[0]["clarification"] == testkit::CLARIFICATION_REPLY && turns[1]["user"] == testkit::DIRECT_QUERY,
            "turn history altered across restarts"
        );
        let turns = turns.len();
        Ok(format!("{} shards search-identical; session with {turns} turns survived restart", memory.len()))
    })
}

fn concurrency_isolation(rt: &Runtime) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    {
        let disk = IndexCatalog::open(dir.path()).map_err(|e| e.to_string())?;
        testkit::ingest_records(&disk, &testkit::fixture_records());
    }
    rt.block_on(async {
        let svc = start_service(dir.path()).await?;
        let http = reqwest::Client::new();
        let mut ids = Vec::new();
        for _ in 0..16 {
            ids.push(create_session(&http, &svc.base).await?);
        }
        let runs = futures::future::join_all(ids.iter().enumerate().map(|(i, id)| {
            let http = http.clone();
            let base = svc.base.clone();
            let text = if i % 2 == 0 { testkit::RETRIEVAL_QUERY } else { testkit::DIRECT_QUERY };
            async move { (id.clone(), post_message(&http, &base, id, text).await) }
        }))
        .await;
        svc.shutdown().await;
        let mut total = 0;
        for (id, events) in runs {
            let events = events?;
            ensure!(!events.is_empty(), "session {id}: no events");
            for (i, e) in events.iter().enumerate() {
                ensure!(e.session_id == id, "session {id} received an event of {}", e.session_id);
                ensure!(e.seq == i as u64, "session {id}: seq {} at position {i}", e.seq);
            }
            ensure!(events.last().unwrap().kind == EventKind::FinalAnswer, "session {id} did not finish");
            total += events.len();
        }
        Ok(format!("16 sessions, {total} events, 0 leaked"))
    })
}

fn eval_items() -> Vec<EvalItem> {
    let bodies = [
        ("Detailed account of the method and its variants.", "Brief note."),
        ("Brief note.", "Detailed survey with context and comparisons."),
        ("First-biased answer one.", "First-biased answer two."),
        ("It appeared in 2017.", "It was published in 2017."),
        ("Detailed derivation of the objective.", "Brief mention."),
    ];
    (0..20)
        .map(|i| {
            let (a, b) = bodies[i % bodies.len()];
            EvalItem {
                question: format!("Question number {i} about policy optimization?"),
                answer_a: a.to_string(),
                answer_b: b.to_string(),
                system_a: "assistant".into(),
                system_b: "baseline".into(),
            }
        })
        .collect()
}

fn eval_symmetry(rt: &Runtime) -> Outcome {
    let tools = testkit::scripted_tools(testkit::pipeline_scripts());
    let items = eval_items();
    let swapped: Vec<EvalItem> = items.iter().map(EvalItem::swapped).collect();
    let (forward, backward) = rt.block_on(async { (run_eval(&tools, &items, 8).await, run_eval(&tools, &swapped, 8).await) });
    ensure!(forward.rows.len() == 1 && backward.rows.len() == 1, "expected one system pair per run");
    let (f, b) = (&forward.rows[0], &backward.rows[0]);
    ensure!(f.system_a == b.system_b && f.system_b == b.system_a, "system labels not swapped");
    let mut summary = BTreeMap::new();
    for c in Criterion::ALL {
        let (x, y) = (f.table.counts(c), b.table.counts(c));
        ensure!(x.win == y.lose && x.lose == y.win && x.tie == y.tie, "{}: {x:?} vs swapped {y:?}", c.name());
        ensure!(x.win + x.tie + x.lose == 20, "{}: counts sum to {}", c.name(), x.win + x.tie + x.lose);
        ensure!(y.win + y.tie + y.lose == 20, "{}: swapped counts sum to {}", c.name(), y.win + y.tie + y.lose);
        summary.insert(c.name(), (x.win, x.tie, x.lose));
    }
    ensure!(summary.values().any(|(w, _, l)| *w > 0 && *l > 0), "scripted judge produced no decided items");
    Ok(format!("20 items, win/tie/lose {summary:?}"))
}

fn main() -> ExitCode {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("runtime");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("bm25 oracle equivalence", Box::new(bm25_oracle)),
        ("hybrid rrf oracle", Box::new(hybrid_oracle)),
        ("routing soundness", Box::new(routing_soundness)),
        ("pipeline constants", Box::new(|| pipeline_constants(&rt))),
        ("direct route purity", Box::new(|| direct_route_purity(&rt))),
        ("citation argmax", Box::new(citation_argmax)),
        ("end-to-end determinism", Box::new(|| end_to_end_determinism(&rt))),
        ("fusion and filter laws", Box::new(fusion_filter_laws)),
        ("persistence round-trip", Box::new(|| persistence_round_trip(&rt))),
        ("concurrency isolation", Box::new(|| concurrency_isolation(&rt))),
        ("eval harness symmetry", Box::new(|| eval_symmetry(&rt))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        match result {
            Ok(detail) => println!("PASS {name} ({:.2?}): {detail}", start.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({:.2?}): {detail}", start.elapsed());
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
