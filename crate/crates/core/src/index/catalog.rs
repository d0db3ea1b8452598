//! Maps shard keys to shard indexes, in memory or backed by `<data_dir>`.
//!
//! On disk: `<data_dir>/catalog.json` lists every shard with its file path
//! (relative to the data dir) and chunk count; shard files live under
//! `<data_dir>/shards/<period>__<domain>.idx`. Shards are loaded lazily and
//! every open is recorded in an access log so routing can be audited.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{load_shard, persist_shard, IndexError, ShardIndex};
use crate::corpus::ShardKey;

const MANIFEST: &str = "catalog.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSummary {
    pub period: String,
    pub domain: String,
    pub chunk_count: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    shards: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    period: String,
    domain: String,
    file: String,
    chunk_count: usize,
}

#[derive(Debug, Clone)]
struct Entry {
    file: Option<String>,
    chunk_count: usize,
    loaded: Option<Arc<ShardIndex>>,
}

#[derive(Debug)]
pub struct IndexCatalog {
    data_dir: Option<PathBuf>,
    entries: RwLock<BTreeMap<ShardKey, Entry>>,
    access_log: Mutex<Vec<ShardKey>>,
}

impl IndexCatalog {
    pub fn in_memory() -> Self {
        IndexCatalog {
            data_dir: None,
            entries: RwLock::new(BTreeMap::new()),
            access_log: Mutex::new(Vec::new()),
        }
    }

    /// Opens the catalog under `data_dir`, creating the directory if needed.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, IndexError> {
        let data_dir = data_dir.into();
        fs::create_dir_all(&data_dir).map_err(|e| IndexError::io(&data_dir, e))?;
        let catalog = IndexCatalog {
            data_dir: Some(data_dir.clone()),
            entries: RwLock::new(BTreeMap::new()),
            access_log: Mutex::new(Vec::new()),
        };
        let path = data_dir.join(MANIFEST);
        if path.exists() {
            let raw = fs::read(&path).map_err(|e| IndexError::io(&path, e))?;
            let manifest: Manifest =
                serde_json::from_slice(&raw).map_err(|e| IndexError::Manifest(e.to_string()))?;
            if manifest.version != MANIFEST_VERSION {
                return Err(IndexError::Manifest(format!(
                    "unsupported manifest version {}",
                    manifest.version
                )));
            }
            let mut entries = catalog.entries.write().expect("catalog lock");
            for e in manifest.shards {
                entries.insert(
                    ShardKey::new(e.period, e.domain),
                    Entry {
                        file: Some(e.file),
                        chunk_count: e.chunk_count,
                        loaded: None,
                    },
                );
            }
        }
        Ok(catalog)
    }

    /// Like [`IndexCatalog::open`] but requires the directory to exist already.
    pub fn open_existing(data_dir: impl AsRef<Path>) -> Result<Self, IndexError> {
        let dir = data_dir.as_ref();
        if !dir.is_dir() {
            return Err(IndexError::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
            ));
        }
        Self::open(dir)
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    pub fn keys(&self) -> Vec<ShardKey> {
        self.entries.read().expect("catalog lock").keys().cloned().collect()
    }

    pub fn contains(&self, key: &ShardKey) -> bool {
        self.entries.read().expect("catalog lock").contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("catalog lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn summaries(&self) -> Vec<ShardSummary> {
        self.entries
            .read()
            .expect("catalog lock")
            .iter()
            .map(|(k, e)| ShardSummary {
                period: k.period.clone(),
                domain: k.domain.clone(),
                chunk_count: e.chunk_count,
            })
            .collect()
    }

    pub fn total_chunks(&self) -> usize {
        self.entries.read().expect("catalog lock").values().map(|e| e.chunk_count).sum()
    }

    pub fn shard_path(&self, key: &ShardKey) -> Option<PathBuf> {
        let dir = self.data_dir.as_ref()?;
        let entries = self.entries.read().expect("catalog lock");
        entries.get(key)?.file.as_ref().map(|f| dir.join(f))
    }

    /// Returns the shard, loading it from disk on first use. Every call is logged.
    pub fn open_shard(&self, key: &ShardKey) -> Result<Arc<ShardIndex>, IndexError> {
        self.access_log.lock().expect("access log").push(key.clone());
        let file = {
            let entries = self.entries.read().expect("catalog lock");
            let entry = entries.get(key).ok_or_else(|| IndexError::UnknownShard(key.clone()))?;
            if let Some(idx) = &entry.loaded {
                return Ok(idx.clone());
            }
            entry.file.clone()
        };
        let (Some(dir), Some(file)) = (&self.data_dir, file) else {
            return Err(IndexError::UnknownShard(key.clone()));
        };
        let index = Arc::new(load_shard(&dir.join(file))?);
        if index.shard_key() != key {
            return Err(IndexError::Corrupt(format!(
                "file for {key} holds shard {}",
                index.shard_key()
            )));
        }
        let mut entries = self.entries.write().expect("catalog lock");
        if let Some(entry) = entries.get_mut(key) {
            entry.loaded.get_or_insert_with(|| index.clone());
        }
        Ok(index)
    }

    /// Installs a complete shard, replacing any previous one with the same key.
    /// When disk-backed, the shard file and then the manifest are written atomically.
    pub fn publish(&self, index: ShardIndex) -> Result<(), IndexError> {
        let key = index.shard_key().clone();
        let file = match &self.data_dir {
            Some(dir) => {
                let rel = format!("shards/{}.idx", key.file_stem());
                persist_shard(&index, &dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        let mut entries = self.entries.write().expect("catalog lock");
        entries.insert(
            key,
            Entry {
                file,
                chunk_count: index.len(),
                loaded: Some(Arc::new(index)),
            },
        );
        if let Some(dir) = &self.data_dir {
            write_manifest(dir, &entries)?;
        }
        Ok(())
    }

    /// Drops cached shards so the next open reads from disk again.
    pub fn evict_all(&self) {
        if self.data_dir.is_none() {
            return;
        }
        for e in self.entries.write().expect("catalog lock").values_mut() {
            e.loaded = None;
        }
    }

    pub fn access_log(&self) -> Vec<ShardKey> {
        self.access_log.lock().expect("access log").clone()
    }

    pub fn clear_access_log(&self) {
        self.access_log.lock().expect("access log").clear();
    }
}

fn write_manifest(dir: &Path, entries: &BTreeMap<ShardKey, Entry>) -> Result<(), IndexError> {
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        shards: entries
            .iter()
            .filter_map(|(k, e)| {
                Some(ManifestEntry {
                    period: k.period.clone(),
                    domain: k.domain.clone(),
                    file: e.file.clone()?,
                    chunk_count: e.chunk_count,
                })
            })
            .collect(),
    };
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| IndexError::Manifest(e.to_string()))?;
    let path = dir.join(MANIFEST);
    let tmp = dir.join("catalog.json.tmp");
    fs::write(&tmp, bytes).map_err(|e| IndexError::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| IndexError::io(&path, e))
}
