//! Single-file binary shard format.
//!
//! Layout (little endian): `MAGIC`, one version byte, the payload, then an
//! FNV-1a 64 checksum of everything before it. Strings are `u32` length + UTF-8.
//! Every map is written in sorted order so equal indexes produce equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Bm25Corpus, Bm25Params, DenseVector, IndexError, Posting, ShardIndex, SparseVector};
use crate::corpus::{Chunk, ShardKey};
use crate::text::fnv1a64;

pub const MAGIC: &[u8; 6] = b"SQIDX\0";
pub const FORMAT_VERSION: u8 = 1;

pub fn encode(index: &ShardIndex) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(4096));
    w.0.extend_from_slice(MAGIC);
    w.0.push(FORMAT_VERSION);
    w.str(&index.shard_key().period);
    w.str(&index.shard_key().domain);
    let params = index.params();
    w.f64(params.k1);
    w.f64(params.b);
    w.u32(index.dim() as u32);
    w.u32(index.len() as u32);
    for (i, c) in index.chunks().iter().enumerate() {
        w.str(&c.chunk_id);
        w.str(&c.paper_id);
        w.u32(c.ordinal);
        w.str(&c.text);
        w.u32(c.token_count);
        w.u32(index.bm25().doc_lens()[i]);
        for v in &index.dense_store()[i].values {
            w.f64(*v);
        }
        let sparse = index.sparse_store()[i].entries();
        w.u32(sparse.len() as u32);
        for &(t, wt) in sparse {
            w.u32(t);
            w.f64(wt);
        }
    }
    let postings = index.bm25().postings();
    w.u32(postings.len() as u32);
    for (term, list) in postings {
        w.str(term);
        w.u32(list.len() as u32);
        for p in list {
            w.u32(p.doc);
            w.u32(p.tf);
        }
    }
    let sum = fnv1a64(&w.0);
    w.0.extend_from_slice(&sum.to_le_bytes());
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<ShardIndex, IndexError> {
    if bytes.len() < MAGIC.len() + 1 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(IndexError::Version(format!(
            "missing shard header ({} bytes)",
            bytes.len()
        )));
    }
    let version = bytes[MAGIC.len()];
    if version != FORMAT_VERSION {
        return Err(IndexError::Version(format!(
            "file has version {version}, reader supports {FORMAT_VERSION}"
        )));
    }
    if bytes.len() < MAGIC.len() + 1 + 8 {
        return Err(IndexError::Truncated("no checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { buf: body, pos: MAGIC.len() + 1 };
    let index = read_body(&mut r)?;
    if r.pos != body.len() {
        return Err(IndexError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if stored != fnv1a64(body) {
        return Err(IndexError::Corrupt("checksum mismatch".into()));
    }
    Ok(index)
}

fn read_body(r: &mut Reader<'_>) -> Result<ShardIndex, IndexError> {
    let key = ShardKey::new(r.str()?, r.str()?);
    let params = Bm25Params { k1: r.f64()?, b: r.f64()? };
    let dim = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut chunks = Vec::with_capacity(n.min(1 << 16));
    let mut doc_lens = Vec::with_capacity(n.min(1 << 16));
    let mut dense = Vec::with_capacity(n.min(1 << 16));
    let mut sparse = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        chunks.push(Chunk {
            chunk_id: r.str()?,
            paper_id: r.str()?,
            ordinal: r.u32()?,
            text: r.str()?,
            token_count: r.u32()?,
            shard_key: key.clone(),
        });
        doc_lens.push(r.u32()?);
        let values = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        dense.push(DenseVector { values });
        let m = r.u32()? as usize;
        let entries = (0..m)
            .map(|_| Ok((r.u32()?, r.f64()?)))
            .collect::<Result<Vec<_>, IndexError>>()?;
        sparse.push(SparseVector::new(entries).map_err(|e| IndexError::Corrupt(e.to_string()))?);
    }
    let terms = r.u32()? as usize;
    let mut postings = BTreeMap::new();
    for _ in 0..terms {
        let term = r.str()?;
        let len = r.u32()? as usize;
        let mut list = Vec::with_capacity(len.min(n));
        for _ in 0..len {
            let p = Posting { doc: r.u32()?, tf: r.u32()? };
            if p.doc as usize >= n {
                return Err(IndexError::Corrupt(format!("posting for unknown doc {}", p.doc)));
            }
            list.push(p);
        }
        postings.insert(term, list);
    }
    let bm25 = Bm25Corpus::from_parts(params, doc_lens, postings);
    Ok(ShardIndex::from_parts(key, dim, chunks, bm25, dense, sparse))
}

/// Writes the shard next to `path` and renames it into place, so readers see
/// either the old file or the complete new one.
pub fn persist_shard(index: &ShardIndex, path: &Path) -> Result<(), IndexError> {
    let bytes = encode(index);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| IndexError::io(dir, e))?;
    }
    let tmp = path.with_extension("idx.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| IndexError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| IndexError::io(&tmp, e))?;
        f.sync_all().map_err(|e| IndexError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| IndexError::io(path, e))
}

pub fn load_shard(path: &Path) -> Result<ShardIndex, IndexError> {
    let bytes = fs::read(path).map_err(|e| IndexError::io(path, e))?;
    decode(&bytes)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            IndexError::Truncated(format!("need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64, IndexError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, IndexError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|e| IndexError::Corrupt(e.to_string()))
    }
}
