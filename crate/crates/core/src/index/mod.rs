//! Per-shard BM25 inverted index plus dense and sparse vector stores.

mod bm25;
mod catalog;
mod persist;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use bm25::{Bm25Corpus, Bm25Params, Posting};
pub use catalog::{IndexCatalog, ShardSummary};
pub use persist::{load_shard, persist_shard, FORMAT_VERSION, MAGIC};

use crate::corpus::{Chunk, ShardKey};
use crate::text::{fnv1a64, index_terms};

/// Reciprocal rank fusion constant.
pub const RRF_K: f64 = 60.0;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("invalid BM25 parameters: {0}")]
    Params(String),
    #[error("chunk {chunk_id} belongs to shard {found}, expected {expected}")]
    MixedShards {
        chunk_id: String,
        expected: ShardKey,
        found: ShardKey,
    },
    #[error("duplicate chunk id {0}")]
    DuplicateChunk(String),
    #[error("dense dimension mismatch: index has {index}, query has {query}")]
    DimensionMismatch { index: usize, query: usize },
    #[error("invalid sparse vector: {0}")]
    Sparse(String),
    #[error("unsupported shard file version: {0}")]
    Version(String),
    #[error("truncated shard file: {0}")]
    Truncated(String),
    #[error("corrupt shard file: {0}")]
    Corrupt(String),
    #[error("unknown shard {0}")]
    UnknownShard(ShardKey),
    #[error("catalog manifest: {0}")]
    Manifest(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl IndexError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        IndexError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector {
    pub values: Vec<f64>,
}

impl DenseVector {
    /// L2-normalizes `values`; an all-zero input stays zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        DenseVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    entries: Vec<(u32, f64)>,
}

impl SparseVector {
    /// Entries must be strictly ascending by term id with positive weights.
    pub fn new(entries: Vec<(u32, f64)>) -> Result<Self, IndexError> {
        for w in entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(IndexError::Sparse(format!(
                    "term ids not strictly ascending at {}",
                    w[1].0
                )));
            }
        }
        if let Some((t, w)) = entries.iter().find(|(_, w)| !(*w > 0.0 && w.is_finite())) {
            return Err(IndexError::Sparse(format!("weight {w} for term {t} is not positive")));
        }
        Ok(SparseVector { entries })
    }

    /// Sums weights of repeated term ids and drops non-positive totals.
    pub fn from_unsorted(entries: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut merged: BTreeMap<u32, f64> = BTreeMap::new();
        for (t, w) in entries {
            *merged.entry(t).or_default() += w;
        }
        SparseVector {
            entries: merged.into_iter().filter(|(_, w)| *w > 0.0).collect(),
        }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        let (a, b) = (&self.entries, &other.entries);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

/// Text encoder producing both vector representations. Must be deterministic.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_dense(&self, text: &str) -> DenseVector;
    fn embed_sparse(&self, text: &str) -> SparseVector;
}

/// Feature-hashed unigram counts: dense buckets (L2-normalized) and sparse hashed term ids.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dense dimension must be positive");
        HashingEmbedder { dim }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(64)
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_dense(&self, text: &str) -> DenseVector {
        let mut values = vec![0.0; self.dim];
        for term in index_terms(text) {
            values[(fnv1a64(term.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        DenseVector::normalized(values)
    }

    fn embed_sparse(&self, text: &str) -> SparseVector {
        SparseVector::from_unsorted(
            index_terms(text)
                .into_iter()
                .map(|t| ((fnv1a64(t.as_bytes()) & 0xFFFF_FFFF) as u32, 1.0)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub chunk_id: String,
    pub score: f64,
}

/// One immutable shard. Documents are stored in ascending `chunk_id` order, so
/// doc-id order doubles as the tie-break order.
#[derive(Debug, Clone)]
pub struct ShardIndex {
    shard_key: ShardKey,
    dim: usize,
    chunks: Vec<Chunk>,
    bm25: Bm25Corpus,
    dense: Vec<DenseVector>,
    sparse: Vec<SparseVector>,
    sparse_postings: HashMap<u32, Vec<(u32, f64)>>,
}

pub fn build_shard(
    shard_key: &ShardKey,
    mut chunks: Vec<Chunk>,
    embedder: &dyn Embedder,
    params: Bm25Params,
) -> Result<ShardIndex, IndexError> {
    params.validate()?;
    if let Some(c) = chunks.iter().find(|c| &c.shard_key != shard_key) {
        return Err(IndexError::MixedShards {
            chunk_id: c.chunk_id.clone(),
            expected: shard_key.clone(),
            found: c.shard_key.clone(),
        });
    }
    chunks.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
    if let Some(w) = chunks.windows(2).find(|w| w[0].chunk_id == w[1].chunk_id) {
        return Err(IndexError::DuplicateChunk(w[0].chunk_id.clone()));
    }
    let bm25 = Bm25Corpus::from_terms(chunks.iter().map(|c| index_terms(&c.text)), params);
    let dense = chunks.iter().map(|c| embedder.embed_dense(&c.text)).collect();
    let sparse = chunks.iter().map(|c| embedder.embed_sparse(&c.text)).collect();
    Ok(ShardIndex::from_parts(shard_key.clone(), embedder.dim(), chunks, bm25, dense, sparse))
}

impl ShardIndex {
    pub(crate) fn from_parts(
        shard_key: ShardKey,
        dim: usize,
        chunks: Vec<Chunk>,
        bm25: Bm25Corpus,
        dense: Vec<DenseVector>,
        sparse: Vec<SparseVector>,
    ) -> Self {
        let mut sparse_postings: HashMap<u32, Vec<(u32, f64)>> = HashMap::new();
        for (doc, v) in sparse.iter().enumerate() {
            for &(t, w) in v.entries() {
                sparse_postings.entry(t).or_default().push((doc as u32, w));
            }
        }
        ShardIndex {
            shard_key,
            dim,
            chunks,
            bm25,
            dense,
            sparse,
            sparse_postings,
        }
    }

    pub fn shard_key(&self) -> &ShardKey {
        &self.shard_key
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn params(&self) -> Bm25Params {
        self.bm25.params()
    }

    pub fn avgdl(&self) -> f64 {
        self.bm25.avgdl()
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&Chunk> {
        self.chunks
            .binary_search_by(|c| c.chunk_id.as_str().cmp(chunk_id))
            .ok()
            .map(|i| &self.chunks[i])
    }

    pub fn doc_len(&self, chunk_id: &str) -> Option<u32> {
        let i = self.chunks.binary_search_by(|c| c.chunk_id.as_str().cmp(chunk_id)).ok()?;
        Some(self.bm25.doc_lens()[i])
    }

    pub fn dense_vector(&self, chunk_id: &str) -> Option<&DenseVector> {
        let i = self.chunks.binary_search_by(|c| c.chunk_id.as_str().cmp(chunk_id)).ok()?;
        Some(&self.dense[i])
    }

    pub fn sparse_vector(&self, chunk_id: &str) -> Option<&SparseVector> {
        let i = self.chunks.binary_search_by(|c| c.chunk_id.as_str().cmp(chunk_id)).ok()?;
        Some(&self.sparse[i])
    }

    pub(crate) fn bm25(&self) -> &Bm25Corpus {
        &self.bm25
    }

    pub(crate) fn dense_store(&self) -> &[DenseVector] {
        &self.dense
    }

    pub(crate) fn sparse_store(&self) -> &[SparseVector] {
        &self.sparse
    }

    fn hit(&self, doc: u32, score: f64) -> Hit {
        Hit {
            chunk_id: self.chunks[doc as usize].chunk_id.clone(),
            score,
        }
    }

    pub fn bm25_search(&self, query_text: &str, k: usize) -> Vec<Hit> {
        self.bm25
            .search(&index_terms(query_text), k)
            .into_iter()
            .map(|(d, s)| self.hit(d, s))
            .collect()
    }

    /// Dense ranking (dot product of unit vectors), descending, positive scores only.
    fn dense_ranking(&self, q: &DenseVector) -> Vec<u32> {
        let mut scored: Vec<(u32, f64)> = self
            .dense
            .iter()
            .enumerate()
            .map(|(d, v)| (d as u32, v.dot(q)))
            .filter(|(_, s)| *s > 0.0)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().map(|(d, _)| d).collect()
    }

    fn sparse_ranking(&self, q: &SparseVector) -> Vec<u32> {
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        for &(t, qw) in q.entries() {
            if let Some(list) = self.sparse_postings.get(&t) {
                for &(doc, w) in list {
                    *acc.entry(doc).or_default() += qw * w;
                }
            }
        }
        let mut scored: Vec<(u32, f64)> = acc.into_iter().filter(|(_, s)| *s > 0.0).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().map(|(d, _)| d).collect()
    }

    /// Dense and sparse rankings fused with reciprocal rank fusion (`k = 60`, ranks from 1).
    pub fn hybrid_search(
        &self,
        dense_q: &DenseVector,
        sparse_q: &SparseVector,
        k: usize,
    ) -> Result<Vec<Hit>, IndexError> {
        if dense_q.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                index: self.dim,
                query: dense_q.dim(),
            });
        }
        let mut fused: BTreeMap<u32, f64> = BTreeMap::new();
        for (rank, doc) in self.dense_ranking(dense_q).into_iter().enumerate() {
            *fused.entry(doc).or_default() += 1.0 / (RRF_K + (rank + 1) as f64);
        }
        for (rank, doc) in self.sparse_ranking(sparse_q).into_iter().enumerate() {
            *fused.entry(doc).or_default() += 1.0 / (RRF_K + (rank + 1) as f64);
        }
        let mut hits: Vec<(u32, f64)> = fused.into_iter().collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(k);
        Ok(hits.into_iter().map(|(d, s)| self.hit(d, s)).collect())
    }
}
