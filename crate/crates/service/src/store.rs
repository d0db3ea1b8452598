//! Session store: one JSON file per session under `<data_dir>/sessions`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex as StdMutex};

use tokio::sync::Mutex;

use sciqa_core::orchestrator::Session;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("session store io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt session file {path}: {detail}")]
    Corrupt { path: String, detail: String },
}

pub type SessionHandle = Arc<Mutex<Session>>;

#[derive(Debug, Default)]
pub struct SessionStore {
    dir: Option<PathBuf>,
    live: StdMutex<HashMap<String, SessionHandle>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

impl SessionStore {
    /// Sessions kept only in memory.
    pub fn in_memory() -> Self {
        SessionStore::default()
    }

    pub fn open(data_dir: &Path) -> Result<Self, StoreError> {
        let dir = data_dir.join("sessions");
        std::fs::create_dir_all(&dir).map_err(|source| StoreError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(SessionStore {
            dir: Some(dir),
            live: StdMutex::default(),
        })
    }

    fn path(&self, id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{id}.json")))
    }

    pub async fn create(&self) -> Result<String, StoreError> {
        let id = uuid::Uuid::new_v4().to_string();
        let session = Session::new(id.clone());
        self.save(&session).await?;
        self.live
            .lock()
            .expect("session map poisoned")
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    /// The live handle for `id`, loading it from disk on first use.
    pub async fn get(&self, id: &str) -> Result<Option<SessionHandle>, StoreError> {
        if !valid_id(id) {
            return Ok(None);
        }
        if let Some(h) = self.live.lock().expect("session map poisoned").get(id) {
            return Ok(Some(Arc::clone(h)));
        }
        let Some(path) = self.path(id) else { return Ok(None) };
        let raw = match tokio::fs::read(&path).await {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => {
                return Err(StoreError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        let session: Session = serde_json::from_slice(&raw).map_err(|e| StoreError::Corrupt {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mut live = self.live.lock().expect("session map poisoned");
        let handle = live.entry(id.to_string()).or_insert_with(|| Arc::new(Mutex::new(session)));
        Ok(Some(Arc::clone(handle)))
    }

    /// Writes the session atomically (temp file, then rename).
    pub async fn save(&self, session: &Session) -> Result<(), StoreError> {
        let Some(path) = self.path(&session.session_id) else { return Ok(()) };
        let io = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        let bytes = serde_json::to_vec_pretty(session).expect("session serializes");
        let tmp = path.with_extension("json.tmp");
        tokio::fs::write(&tmp, bytes).await.map_err(io)?;
        tokio::fs::rename(&tmp, &path).await.map_err(io)?;
        Ok(())
    }
}
