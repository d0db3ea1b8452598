//! Okapi BM25 over an in-memory inverted index.
//!
//! ```text
//! score(q, d) = sum over distinct query terms t of
//!     IDF(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))
//! IDF(t)      = ln(1 + (N - n_t + 0.5) / (n_t + 0.5))
//! ```
//!
//! The `ln(1 + x)` IDF keeps every term contribution non-negative.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::IndexError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), IndexError> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(IndexError::Params(format!("k1 must be > 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(IndexError::Params(format!("b must be in [0,1], got {}", self.b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Corpus {
    params: Bm25Params,
    doc_lens: Vec<u32>,
    avgdl: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

impl Bm25Corpus {
    /// Builds postings from pre-tokenized documents; document `i` gets doc id `i`.
    pub fn from_terms<I, D>(docs: I, params: Bm25Params) -> Self
    where
        I: IntoIterator<Item = D>,
        D: AsRef<[String]>,
    {
        let mut doc_lens = Vec::new();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (doc, terms) in docs.into_iter().enumerate() {
            let terms = terms.as_ref();
            doc_lens.push(terms.len() as u32);
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (term, tf) in tf {
                postings.entry(term.to_string()).or_default().push(Posting { doc: doc as u32, tf });
            }
        }
        Self::from_parts(params, doc_lens, postings)
    }

    pub(crate) fn from_parts(
        params: Bm25Params,
        doc_lens: Vec<u32>,
        postings: BTreeMap<String, Vec<Posting>>,
    ) -> Self {
        let avgdl = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_lens.len() as f64
        };
        Bm25Corpus { params, doc_lens, avgdl, postings }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lens.is_empty()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_lens(&self) -> &[u32] {
        &self.doc_lens
    }

    pub fn postings(&self) -> &BTreeMap<String, Vec<Posting>> {
        &self.postings
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, doc_freq: usize) -> f64 {
        let n = self.len() as f64;
        let n_t = doc_freq as f64;
        (1.0 + (n - n_t + 0.5) / (n_t + 0.5)).ln()
    }

    /// BM25 score of every document for the distinct terms of `query_terms`.
    pub fn score_all(&self, query_terms: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.len()];
        // avgdl is 0 only when every document is empty, in which case no posting exists
        let avgdl = if self.avgdl > 0.0 { self.avgdl } else { 1.0 };
        let Bm25Params { k1, b } = self.params;
        let distinct: BTreeSet<&str> = query_terms.iter().map(String::as_str).collect();
        for term in distinct {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(list.len());
            for p in list {
                let tf = f64::from(p.tf);
                let len = f64::from(self.doc_lens[p.doc as usize]);
                scores[p.doc as usize] += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avgdl));
            }
        }
        scores
    }

    /// Top `k` positive-score documents, by score descending then doc id ascending.
    pub fn search(&self, query_terms: &[String], k: usize) -> Vec<(u32, f64)> {
        let mut hits: Vec<(u32, f64)> = self
            .score_all(query_terms)
            .into_iter()
            .enumerate()
            .filter(|(_, s)| *s > 0.0)
            .map(|(d, s)| (d as u32, s))
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(k);
        hits
    }
}
