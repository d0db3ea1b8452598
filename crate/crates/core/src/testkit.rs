//! Fixture corpus, scripted transcripts and wiring shared by test suites.

use std::sync::Arc;

use chrono::NaiveDate;
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};

use crate::corpus::{ingest, Chunk, ChunkConfig, IngestReport, PaperRecord, ShardKey};
use crate::index::{Bm25Params, HashingEmbedder, IndexCatalog};
use crate::llm::{Gateway, GatewayConfig, Script, ScriptedClient};
use crate::orchestrator::Deps;
use crate::postprocess::OverlapReranker;
use crate::prompts::PromptSet;
use crate::query_tools::LlmTools;
use crate::retrieval::FixtureWebClient;

pub const PIPELINE_SCRIPT: &str = include_str!("../../../fixtures/scripts/pipeline.json");
pub const WEB_FIXTURE: &str = include_str!("../../../fixtures/web.json");

pub const DIRECT_QUERY: &str = "What is PPO?";
pub const RETRIEVAL_QUERY: &str = "Summarize the recent latest developments and variants of PPO?";
pub const AMBIGUOUS_QUERY: &str = "Tell me about optimization methods";
pub const CLARIFICATION_REPLY: &str = "reinforcement learning";

pub const PAPERS_PER_SHARD: usize = 14;
const BODY_TOKENS: usize = 640;
const SEED: u64 = 20240630;

const RL: &[&str] = &[
    "proximal", "policy", "optimization", "ppo", "gradient", "clipped", "surrogate", "objective", "advantage",
    "estimation", "actor", "critic", "reward", "trust", "region", "entropy", "bonus", "value", "function",
    "rollout", "environment", "agent", "variants", "developments", "kl", "penalty", "sample", "efficiency",
    "on-policy", "return", "discount", "exploration", "stability", "update", "minibatch", "epochs",
    "reinforcement", "learning",
];
const LM: &[&str] = &[
    "language", "model", "transformer", "attention", "retrieval", "augmented", "generation", "token",
    "pretraining", "instruction", "tuning", "alignment", "preference", "decoding", "context", "window",
    "embedding", "corpus", "benchmark", "evaluation", "prompt", "reasoning", "hallucination", "citation",
    "summarization", "question", "answering", "dense", "sparse",
];
const STAT: &[&str] = &[
    "bayesian", "inference", "posterior", "prior", "variational", "likelihood", "sampling", "markov", "monte",
    "carlo", "gaussian", "process", "kernel", "regression", "estimator", "variance", "bias", "hierarchical",
    "uncertainty", "calibration", "conformal", "prediction", "interval", "bootstrap", "hypothesis", "test",
];
const FILLER: &[&str] = &[
    "the", "of", "and", "a", "in", "we", "show", "that", "this", "with", "for", "our", "results", "method",
    "approach", "paper", "propose", "study", "experiments", "on", "is", "are", "by", "to", "new", "from",
];

struct ShardPlan {
    category: &'static str,
    year: i32,
    first_month: u32,
    primary: &'static [&'static str],
    secondary: &'static [&'static str],
}

const SHARDS: [ShardPlan; 4] = [
    ShardPlan { category: "cs.LG", year: 2023, first_month: 4, primary: RL, secondary: LM },
    ShardPlan { category: "cs.CL", year: 2023, first_month: 10, primary: LM, secondary: RL },
    ShardPlan { category: "cs.LG", year: 2024, first_month: 1, primary: RL, secondary: STAT },
    ShardPlan { category: "stat.ML", year: 2024, first_month: 4, primary: STAT, secondary: LM },
];

fn sentence(rng: &mut StdRng, plan: &ShardPlan, words: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(words);
    for _ in 0..words {
        let roll: f64 = rng.random();
        let pool = if roll < 0.65 {
            plan.primary
        } else if roll < 0.8 {
            plan.secondary
        } else {
            FILLER
        };
        out.push(pool.choose(rng).expect("non-empty pool").to_string());
    }
    out
}

fn prose(rng: &mut StdRng, plan: &ShardPlan, tokens: usize) -> String {
    let mut words = Vec::with_capacity(tokens);
    while words.len() < tokens {
        let n = rng.random_range(8..16).min(tokens - words.len());
        let mut s = sentence(rng, plan, n);
        if let Some(last) = s.last_mut() {
            last.push('.');
        }
        words.extend(s);
    }
    words.join(" ")
}

/// 56 papers over four (quarter, archive) shards: 2023-Q2/cs, 2023-Q4/cs,
/// 2024-Q1/cs and 2024-Q2/stat, each paper yielding three chunks under the
/// default chunking. Records are interleaved across shards.
pub fn fixture_records() -> Vec<PaperRecord> {
    let mut rng = StdRng::seed_from_u64(SEED);
    let mut by_shard: Vec<Vec<PaperRecord>> = Vec::new();
    for plan in &SHARDS {
        let mut papers = Vec::new();
        for i in 0..PAPERS_PER_SHARD {
            let month = plan.first_month + (i % 3) as u32;
            let day = 1 + (i as u32 * 2) % 27;
            let mut title_words = sentence(&mut rng, plan, 6);
            title_words.retain(|w| !FILLER.contains(&w.as_str()));
            papers.push(PaperRecord {
                paper_id: format!("{:02}{:02}.{:05}", plan.year % 100, month, 100 + i),
                title: title_words.join(" "),
                abstract_text: prose(&mut rng, plan, 60),
                body: Some(prose(&mut rng, plan, BODY_TOKENS - 60 - title_words.len())),
                categories: vec![plan.category.to_string()],
                primary_category: plan.category.to_string(),
                published: NaiveDate::from_ymd_opt(plan.year, month, day).expect("valid fixture date"),
            });
        }
        by_shard.push(papers);
    }
    (0..PAPERS_PER_SHARD)
        .flat_map(|i| by_shard.iter().map(move |papers| papers[i].clone()))
        .collect()
}

pub fn to_jsonl(records: &[PaperRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn ingest_records(catalog: &IndexCatalog, records: &[PaperRecord]) -> IngestReport {
    let jsonl = to_jsonl(records);
    ingest(
        jsonl.as_bytes(),
        &ChunkConfig::default(),
        catalog,
        &HashingEmbedder::default(),
        Bm25Params::default(),
    )
    .expect("fixture ingest")
}

/// The fixture corpus indexed in memory.
pub fn fixture_catalog() -> Arc<IndexCatalog> {
    let catalog = IndexCatalog::in_memory();
    ingest_records(&catalog, &fixture_records());
    Arc::new(catalog)
}

pub fn pipeline_scripts() -> Vec<Script> {
    ScriptedClient::from_json(PIPELINE_SCRIPT).expect("pipeline script parses").scripts().to_vec()
}

pub fn scripted_tools(scripts: Vec<Script>) -> LlmTools {
    let config = GatewayConfig {
        backoff_ms: 1,
        ..GatewayConfig::default()
    };
    LlmTools::new(
        Gateway::new(Arc::new(ScriptedClient::new(scripts)), config),
        Arc::new(PromptSet::default()),
    )
}

pub fn fixture_web() -> FixtureWebClient {
    FixtureWebClient::new(serde_json::from_str(WEB_FIXTURE).expect("web fixture parses"))
}

/// Scripted LLM, fixture web search and the overlap reranker over `catalog`.
pub fn fixture_deps(catalog: Arc<IndexCatalog>) -> Deps {
    Deps {
        tools: scripted_tools(pipeline_scripts()),
        catalog,
        embedder: Arc::new(HashingEmbedder::default()),
        web: Some(Arc::new(fixture_web())),
        reranker: Arc::new(OverlapReranker),
    }
}

/// Random chunks over a `vocab`-word vocabulary, for oracle comparisons.
pub fn random_chunks(seed: u64, n: usize, vocab: usize, key: &ShardKey) -> Vec<Chunk> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..40);
            let text: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..vocab))).collect();
            let paper_id = format!("p{i:04}");
            Chunk {
                chunk_id: Chunk::make_id(&paper_id, 0),
                paper_id,
                ordinal: 0,
                text: text.join(" "),
                token_count: len as u32,
                shard_key: key.clone(),
            }
        })
        .collect()
}

/// A random query of 1 to 5 words over the same vocabulary.
pub fn random_query(rng: &mut StdRng, vocab: usize) -> String {
    let len = rng.random_range(1..=5);
    (0..len).map(|_| format!("w{}", rng.random_range(0..vocab))).collect::<Vec<_>>().join(" ")
}

/// Brute-force reference implementations, written without the index internals.
pub mod oracle {
    use std::collections::{BTreeMap, BTreeSet};

    use chrono::{Datelike, NaiveDate};

    use crate::corpus::{Chunk, ShardKey};
    use crate::index::Embedder;
    use crate::retrieval::RouteConstraints;

    fn terms(text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    }

    fn top(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
        scored.retain(|(_, s)| *s > 0.0);
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    /// Okapi BM25 over each chunk's full term list, recomputing statistics per query.
    pub fn bm25(chunks: &[Chunk], query: &str, k1: f64, b: f64, k: usize) -> Vec<(String, f64)> {
        let docs: Vec<Vec<String>> = chunks.iter().map(|c| terms(&c.text)).collect();
        let n = docs.len() as f64;
        let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n.max(1.0);
        let q: BTreeSet<String> = terms(query).into_iter().collect();
        let df: BTreeMap<&String, f64> = q
            .iter()
            .map(|t| (t, docs.iter().filter(|d| d.contains(t)).count() as f64))
            .collect();
        let scored = chunks
            .iter()
            .zip(&docs)
            .map(|(c, d)| {
                let mut score = 0.0;
                for t in &q {
                    let df = df[t];
                    let tf = d.iter().filter(|w| *w == t).count() as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avgdl));
                }
                (c.chunk_id.clone(), score)
            })
            .collect();
        top(scored, k)
    }

    fn ranking(scores: Vec<(String, f64)>) -> Vec<String> {
        top(scores, usize::MAX).into_iter().map(|(id, _)| id).collect()
    }

    /// Reciprocal rank fusion (k = 60) of the exhaustive dense and sparse rankings.
    pub fn hybrid(chunks: &[Chunk], embedder: &dyn Embedder, query: &str, k: usize) -> Vec<(String, f64)> {
        let qd = embedder.embed_dense(query);
        let qs: BTreeMap<u32, f64> = embedder.embed_sparse(query).entries().iter().copied().collect();
        let mut dense = Vec::new();
        let mut sparse = Vec::new();
        for c in chunks {
            let d = embedder.embed_dense(&c.text);
            let dot: f64 = d.values.iter().zip(&qd.values).map(|(a, b)| a * b).sum();
            dense.push((c.chunk_id.clone(), dot));
            let ds: BTreeMap<u32, f64> = embedder.embed_sparse(&c.text).entries().iter().copied().collect();
            let mut s = 0.0;
            for (t, w) in &qs {
                if let Some(dw) = ds.get(t) {
                    s += w * dw;
                }
            }
            sparse.push((c.chunk_id.clone(), s));
        }
        let mut fused: BTreeMap<String, f64> = BTreeMap::new();
        for (r, id) in ranking(dense).into_iter().enumerate() {
            *fused.entry(id).or_default() += 1.0 / (60.0 + (r + 1) as f64);
        }
        for (r, id) in ranking(sparse).into_iter().enumerate() {
            *fused.entry(id).or_default() += 1.0 / (60.0 + (r + 1) as f64);
        }
        top(fused.into_iter().collect(), k)
    }

    /// First and last day covered by a period label.
    pub fn period_days(period: &str) -> (NaiveDate, NaiveDate) {
        let (year, rest) = period.split_once('-').expect("period has a dash");
        let year: i32 = year.parse().expect("year");
        let (first, last) = match rest.strip_prefix('Q') {
            Some(q) => {
                let q: u32 = q.parse().expect("quarter");
                (3 * q - 2, 3 * q)
            }
            None => {
                let m: u32 = rest.parse().expect("month");
                (m, m)
            }
        };
        let start = NaiveDate::from_ymd_opt(year, first, 1).expect("start");
        let next = if last == 12 {
            NaiveDate::from_ymd_opt(year + 1, 1, 1)
        } else {
            NaiveDate::from_ymd_opt(year, last + 1, 1)
        }
        .expect("next");
        debug_assert_eq!(start.year(), year);
        (start, next.pred_opt().expect("end"))
    }

    /// Shards a constrained query may touch: period overlapping the time range and
    /// domain equal to, or a dotted parent or child of, a requested domain.
    pub fn allowed_shards(keys: &[ShardKey], constraints: &RouteConstraints) -> BTreeSet<ShardKey> {
        keys.iter()
            .filter(|k| {
                let time_ok = constraints.time_range.is_none_or(|r| {
                    let (s, e) = period_days(&k.period);
                    s <= r.end && r.start <= e
                });
                let domain_ok = constraints.domains.as_ref().is_none_or(|ds| {
                    ds.iter().any(|d| {
                        *d == k.domain
                            || d.starts_with(&format!("{}.", k.domain))
                            || k.domain.starts_with(&format!("{d}."))
                    })
                });
                time_ok && domain_ok
            })
            .cloned()
            .collect()
    }
}
