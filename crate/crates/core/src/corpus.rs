//! Paper records, chunking and time x domain shard assignment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::index::{build_shard, Bm25Params, Embedder, IndexCatalog, IndexError};
use crate::text::whitespace_tokens;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("invalid record {paper_id:?}: {reason}")]
    Invalid { paper_id: String, reason: String },
    #[error("record {0:?} has neither abstract nor body text")]
    NoText(String),
    #[error("invalid chunk config: {0}")]
    Config(String),
    #[error("invalid shard period {0:?}")]
    Period(String),
    #[error("failed to read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub paper_id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    pub categories: Vec<String>,
    pub primary_category: String,
    pub published: NaiveDate,
}

/// Wire form of a corpus line. `published` stays a string so a bad date yields a
/// rejection that names the record instead of a bare serde error.
#[derive(Deserialize)]
struct RawRecord {
    paper_id: String,
    #[serde(default)]
    title: String,
    #[serde(rename = "abstract", default)]
    abstract_text: String,
    #[serde(default)]
    body: Option<String>,
    categories: Vec<String>,
    primary_category: String,
    published: String,
}

impl PaperRecord {
    /// Parses one corpus line and checks the record invariants.
    pub fn from_json_line(line: &str) -> Result<Self, CorpusError> {
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::Malformed(e.to_string()))?;
        let published = NaiveDate::parse_from_str(raw.published.trim(), "%Y-%m-%d").map_err(|e| {
            CorpusError::Invalid {
                paper_id: raw.paper_id.clone(),
                reason: format!("invalid published date {:?}: {e}", raw.published),
            }
        })?;
        let record = PaperRecord {
            paper_id: raw.paper_id,
            title: raw.title,
            abstract_text: raw.abstract_text,
            body: raw.body,
            categories: raw.categories,
            primary_category: raw.primary_category,
            published,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: &str| CorpusError::Invalid {
            paper_id: self.paper_id.clone(),
            reason: reason.to_string(),
        };
        if self.paper_id.trim().is_empty() {
            return Err(invalid("empty paper_id"));
        }
        if self.categories.is_empty() {
            return Err(invalid("categories must be non-empty"));
        }
        if !self.categories.contains(&self.primary_category) {
            return Err(invalid("primary_category not among categories"));
        }
        Ok(())
    }

    fn has_text(&self) -> bool {
        !self.abstract_text.trim().is_empty()
            || self.body.as_deref().is_some_and(|b| !b.trim().is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeriodGranularity {
    Month,
    Quarter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainGranularity {
    /// Top-level archive, e.g. `cs` for `cs.CL`.
    Archive,
    /// Full category, e.g. `cs.CL`.
    Category,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Granularity {
    pub period: PeriodGranularity,
    pub domain: DomainGranularity,
}

impl Default for Granularity {
    fn default() -> Self {
        Granularity {
            period: PeriodGranularity::Quarter,
            domain: DomainGranularity::Archive,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.period {
            PeriodGranularity::Month => "month",
            PeriodGranularity::Quarter => "quarter",
        };
        let d = match self.domain {
            DomainGranularity::Archive => "archive",
            DomainGranularity::Category => "category",
        };
        write!(f, "{p}-{d}")
    }
}

impl FromStr for Granularity {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (p, d) = s
            .split_once(['-', 'x', '×'])
            .ok_or_else(|| CorpusError::Config(format!("unknown granularity {s:?}")))?;
        let period = match p {
            "month" => PeriodGranularity::Month,
            "quarter" => PeriodGranularity::Quarter,
            _ => return Err(CorpusError::Config(format!("unknown period granularity {p:?}"))),
        };
        let domain = match d {
            "archive" => DomainGranularity::Archive,
            "category" => DomainGranularity::Category,
            _ => return Err(CorpusError::Config(format!("unknown domain granularity {d:?}"))),
        };
        Ok(Granularity { period, domain })
    }
}

/// Identifies one shard: a time period label and a domain.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShardKey {
    pub period: String,
    pub domain: String,
}

impl ShardKey {
    pub fn new(period: impl Into<String>, domain: impl Into<String>) -> Self {
        ShardKey {
            period: period.into(),
            domain: domain.into(),
        }
    }

    /// Inclusive date interval covered by `period` (`YYYY-Qn` or `YYYY-MM`).
    pub fn interval(&self) -> Result<(NaiveDate, NaiveDate), CorpusError> {
        period_interval(&self.period)
    }

    /// File stem used for the shard's index file.
    pub fn file_stem(&self) -> String {
        format!("{}__{}", self.period, self.domain)
    }
}

impl fmt::Display for ShardKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.period, self.domain)
    }
}

pub fn period_interval(period: &str) -> Result<(NaiveDate, NaiveDate), CorpusError> {
    let bad = || CorpusError::Period(period.to_string());
    let (year, rest) = period.split_once('-').ok_or_else(bad)?;
    let year: i32 = year.parse().map_err(|_| bad())?;
    let (first_month, months) = if let Some(q) = rest.strip_prefix('Q') {
        let q: u32 = q.parse().map_err(|_| bad())?;
        if !(1..=4).contains(&q) {
            return Err(bad());
        }
        ((q - 1) * 3 + 1, 3)
    } else {
        if rest.len() != 2 {
            return Err(bad());
        }
        let m: u32 = rest.parse().map_err(|_| bad())?;
        (m, 1)
    };
    let start = NaiveDate::from_ymd_opt(year, first_month, 1).ok_or_else(bad)?;
    let next = start
        .checked_add_months(chrono::Months::new(months))
        .ok_or_else(bad)?;
    Ok((start, next.pred_opt().ok_or_else(bad)?))
}

/// Archive of a category: the text before the first dot, or the whole string.
pub fn archive_of(category: &str) -> &str {
    category.split_once('.').map_or(category, |(a, _)| a)
}

pub fn shard_key_for(record: &PaperRecord, granularity: Granularity) -> ShardKey {
    let date = record.published;
    let period = match granularity.period {
        PeriodGranularity::Month => format!("{:04}-{:02}", date.year(), date.month()),
        PeriodGranularity::Quarter => format!("{:04}-Q{}", date.year(), (date.month() - 1) / 3 + 1),
    };
    let domain = match granularity.domain {
        DomainGranularity::Archive => archive_of(&record.primary_category).to_string(),
        DomainGranularity::Category => record.primary_category.clone(),
    };
    ShardKey { period, domain }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub paper_id: String,
    pub ordinal: u32,
    pub text: String,
    pub token_count: u32,
    pub shard_key: ShardKey,
}

impl Chunk {
    pub fn make_id(paper_id: &str, ordinal: u32) -> String {
        format!("{paper_id}#{ordinal}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub target_tokens: usize,
    pub overlap_tokens: usize,
    pub granularity: Granularity,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            target_tokens: 256,
            overlap_tokens: 32,
            granularity: Granularity::default(),
        }
    }
}

impl ChunkConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.target_tokens == 0 {
            return Err(CorpusError::Config("target_tokens must be positive".into()));
        }
        if self.overlap_tokens >= self.target_tokens {
            return Err(CorpusError::Config(
                "overlap_tokens must be smaller than target_tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Half-open token windows `[start, end)` covering `n` tokens.
pub fn window_bounds(n: usize, target: usize, overlap: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut start = 0;
    loop {
        let end = (start + target).min(n);
        out.push((start, end));
        if end == n {
            break;
        }
        start = end - overlap;
    }
    out
}

/// Title, abstract and body as one whitespace-token sequence.
pub fn paper_tokens(record: &PaperRecord) -> Vec<&str> {
    let mut tokens = whitespace_tokens(&record.title);
    tokens.extend(whitespace_tokens(&record.abstract_text));
    if let Some(body) = &record.body {
        tokens.extend(whitespace_tokens(body));
    }
    tokens
}

pub fn chunk_paper(record: &PaperRecord, cfg: &ChunkConfig) -> Result<Vec<Chunk>, CorpusError> {
    cfg.validate()?;
    if !record.has_text() {
        return Err(CorpusError::NoText(record.paper_id.clone()));
    }
    let shard_key = shard_key_for(record, cfg.granularity);
    let tokens = paper_tokens(record);
    let chunks = window_bounds(tokens.len(), cfg.target_tokens, cfg.overlap_tokens)
        .into_iter()
        .enumerate()
        .map(|(ordinal, (start, end))| {
            let ordinal = ordinal as u32;
            Chunk {
                chunk_id: Chunk::make_id(&record.paper_id, ordinal),
                paper_id: record.paper_id.clone(),
                ordinal,
                text: tokens[start..end].join(" "),
                token_count: (end - start) as u32,
                shard_key: shard_key.clone(),
            }
        })
        .collect();
    Ok(chunks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paper_id: Option<String>,
    pub line_no: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardCount {
    pub period: String,
    pub domain: String,
    pub chunk_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    /// Chunks produced by this ingest, per shard, in shard key order.
    pub shards: Vec<ShardCount>,
    pub total_chunks: usize,
    pub accepted_records: usize,
    pub rejected: usize,
    pub rejections: Vec<Rejection>,
}

/// Reads line-delimited records, chunks them and (re)builds every touched shard.
///
/// Bad lines become rejections; only an I/O failure on the reader or a catalog
/// write failure aborts. Existing chunks of a re-ingested paper are replaced.
pub fn ingest<R: BufRead>(
    reader: R,
    cfg: &ChunkConfig,
    catalog: &IndexCatalog,
    embedder: &dyn Embedder,
    params: Bm25Params,
) -> Result<IngestReport, CorpusError> {
    cfg.validate()?;
    let mut report = IngestReport::default();
    let mut records: Vec<(usize, PaperRecord)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match PaperRecord::from_json_line(&line) {
            Ok(record) if !seen.insert(record.paper_id.clone()) => {
                report.rejections.push(Rejection {
                    paper_id: Some(record.paper_id),
                    line_no,
                    reason: "duplicate paper_id".into(),
                });
            }
            Ok(record) => records.push((line_no, record)),
            Err(err) => report.rejections.push(Rejection {
                paper_id: paper_id_hint(&line, &err),
                line_no,
                reason: err.to_string(),
            }),
        }
    }

    let chunked: Vec<(usize, String, Result<Vec<Chunk>, CorpusError>)> = records
        .par_iter()
        .map(|(line_no, r)| (*line_no, r.paper_id.clone(), chunk_paper(r, cfg)))
        .collect();

    let mut by_shard: BTreeMap<ShardKey, Vec<Chunk>> = BTreeMap::new();
    for (line_no, paper_id, result) in chunked {
        match result {
            Ok(chunks) => {
                report.accepted_records += 1;
                for c in chunks {
                    by_shard.entry(c.shard_key.clone()).or_default().push(c);
                }
            }
            Err(err) => report.rejections.push(Rejection {
                paper_id: Some(paper_id),
                line_no,
                reason: err.to_string(),
            }),
        }
    }
    report.rejections.sort_by_key(|r| r.line_no);
    report.rejected = report.rejections.len();

    let mut merged = Vec::with_capacity(by_shard.len());
    for (key, fresh) in by_shard {
        report.total_chunks += fresh.len();
        report.shards.push(ShardCount {
            period: key.period.clone(),
            domain: key.domain.clone(),
            chunk_count: fresh.len(),
        });
        let papers: BTreeSet<&str> = fresh.iter().map(|c| c.paper_id.as_str()).collect();
        let mut all: Vec<Chunk> = match catalog.contains(&key) {
            true => catalog
                .open_shard(&key)?
                .chunks()
                .iter()
                .filter(|c| !papers.contains(c.paper_id.as_str()))
                .cloned()
                .collect(),
            false => Vec::new(),
        };
        all.extend(fresh);
        merged.push((key, all));
    }

    let built: Vec<_> = merged
        .into_par_iter()
        .map(|(key, chunks)| build_shard(&key, chunks, embedder, params))
        .collect();
    for index in built {
        catalog.publish(index?)?;
    }
    Ok(report)
}

fn paper_id_hint(line: &str, err: &CorpusError) -> Option<String> {
    if let CorpusError::Invalid { paper_id, .. } = err {
        return Some(paper_id.clone());
    }
    serde_json::from_str::<serde_json::Value>(line)
        .ok()?
        .get("paper_id")?
        .as_str()
        .map(str::to_string)
}
