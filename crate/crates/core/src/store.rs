//! Content-addressed, write-once persistence for model outputs and pipeline
//! intermediates. Every backend call is keyed by a digest of
//! (model id, decode params, prompt bytes) so ablation grids can share one
//! warm cache and reruns hit disk instead of the model.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::DecodeParams;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record for key {key} exists with different content")]
    Conflict { key: String },
    #[error("corrupt record file {path}: stored digest does not match body")]
    Corrupt { path: PathBuf },
    #[error("unserializable record: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Stable cache key for one backend call: sha256 over a canonical,
/// length-prefixed serialization of the (model, params, prompt) triple.
pub fn cache_key(model_id: &str, params: &DecodeParams, prompt_bytes: &[u8]) -> String {
    let params_canonical = serde_json::to_vec(params).expect("DecodeParams serializes");
    let mut hasher = Sha256::new();
    for field in [model_id.as_bytes(), &params_canonical, prompt_bytes] {
        hasher.update((field.len() as u64).to_be_bytes());
        hasher.update(field);
    }
    hex_digest(&hasher.finalize())
}

/// Digest of a rendered prompt alone, used to key scripted-fake fixtures.
pub fn prompt_digest(prompt_bytes: &[u8]) -> String {
    hex_digest(&Sha256::digest(prompt_bytes))
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    schema: u32,
    body_digest: String,
    body: serde_json::Value,
}

const SCHEMA_VERSION: u32 = 1;

/// On-disk blob store. Records are JSON envelopes carrying their own body
/// digest; writes go through a temp file and an atomic rename.
#[derive(Debug, Clone)]
pub struct CacheStore {
    root: PathBuf,
}

impl CacheStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| StoreError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(CacheStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn blob_path(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.json"))
    }

    /// Looks a record up. A miss is `Ok(None)`, never a silent default.
    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, StoreError> {
        let path = self.blob_path(key);
        let raw = match fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(StoreError::Io { path, source }),
        };
        let envelope: Envelope =
            serde_json::from_str(&raw).map_err(|_| StoreError::Corrupt { path: path.clone() })?;
        let body_bytes = serde_json::to_vec(&envelope.body)?;
        if prompt_digest(&body_bytes) != envelope.body_digest {
            return Err(StoreError::Corrupt { path });
        }
        Ok(Some(serde_json::from_value(envelope.body)?))
    }

    /// Write-once put. Re-putting identical content is a no-op; different
    /// content under the same key is a conflict.
    pub fn put<T: Serialize>(&self, key: &str, record: &T) -> Result<(), StoreError> {
        let body = serde_json::to_value(record)?;
        let body_bytes = serde_json::to_vec(&body)?;
        let envelope = Envelope {
            schema: SCHEMA_VERSION,
            body_digest: prompt_digest(&body_bytes),
            body,
        };
        let path = self.blob_path(key);
        if path.exists() {
            let existing: Option<serde_json::Value> = self.get(key)?;
            let new_body = serde_json::to_value(record)?;
            return match existing {
                Some(old) if old == new_body => Ok(()),
                _ => Err(StoreError::Conflict {
                    key: key.to_string(),
                }),
            };
        }
        let serialized = serde_json::to_vec_pretty(&envelope)?;
        static TMP_COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
        let unique = TMP_COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let tmp = self
            .root
            .join(format!(".{key}.{}.{unique}.tmp", std::process::id()));
        let write = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serialized)?;
            f.sync_all()
        })();
        write.map_err(|source| StoreError::Io {
            path: tmp.clone(),
            source,
        })?;
        // Atomic publish; a concurrent identical put just wins the rename race.
        fs::rename(&tmp, &path).map_err(|source| StoreError::Io { path, source })?;
        Ok(())
    }

    /// Lists stored keys with their file sizes.
    pub fn list(&self) -> Result<Vec<(String, u64)>, StoreError> {
        let mut out = Vec::new();
        let entries = fs::read_dir(&self.root).map_err(|source| StoreError::Io {
            path: self.root.clone(),
            source,
        })?;
        for entry in entries {
            let entry = entry.map_err(|source| StoreError::Io {
                path: self.root.clone(),
                source,
            })?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(key) = name.strip_suffix(".json") {
                let len = entry
                    .metadata()
                    .map_err(|source| StoreError::Io {
                        path: entry.path(),
                        source,
                    })?
                    .len();
                out.push((key.to_string(), len));
            }
        }
        out.sort();
        Ok(out)
    }

    /// Removes every stored record.
    pub fn purge(&self) -> Result<usize, StoreError> {
        let mut removed = 0;
        for (key, _) in self.list()? {
            let path = self.blob_path(&key);
            fs::remove_file(&path).map_err(|source| StoreError::Io { path, source })?;
            removed += 1;
        }
        Ok(removed)
    }
}

/// Append-only writer for per-run, line-delimited artifact records.
pub struct RecordWriter {
    path: PathBuf,
    file: fs::File,
}

impl RecordWriter {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| StoreError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        let file = fs::File::create(&path).map_err(|source| StoreError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(RecordWriter { path, file })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .map_err(|source| StoreError::Io {
                path: self.path.clone(),
                source,
            })
    }
}

/// Reads a line-delimited record file back.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let raw = fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(StoreError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> DecodeParams {
        DecodeParams::greedy(16)
    }

    #[test]
    fn cache_key_stable() {
        let a = cache_key("m", &params(), b"prompt");
        let b = cache_key("m", &params(), b"prompt");
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn cache_key_sensitive_to_prompt() {
        assert_ne!(
            cache_key("m", &params(), b"prompt"),
            cache_key("m", &params(), b"promp t")
        );
    }

    #[test]
    fn cache_key_sensitive_to_seed() {
        let a = DecodeParams::top_k_50(16, Some(1));
        let b = DecodeParams::top_k_50(16, Some(2));
        assert_ne!(cache_key("m", &a, b"p"), cache_key("m", &b, b"p"));
    }

    #[test]
    fn put_then_get_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        store.put("k1", &"hello".to_string()).unwrap();
        let got: Option<String> = store.get("k1").unwrap();
        assert_eq!(got.as_deref(), Some("hello"));
    }

    #[test]
    fn get_miss_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        let got: Option<String> = store.get("absent").unwrap();
        assert!(got.is_none());
    }

    #[test]
    fn identical_reput_is_noop() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        store.put("k", &42u32).unwrap();
        store.put("k", &42u32).unwrap();
    }

    #[test]
    fn conflicting_put_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        store.put("k", &1u32).unwrap();
        let err = store.put("k", &2u32).unwrap_err();
        assert!(matches!(err, StoreError::Conflict { .. }));
    }

    #[test]
    fn concurrent_identical_puts_agree() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        std::thread::scope(|s| {
            for _ in 0..8 {
                let store = store.clone();
                s.spawn(move || store.put("shared", &"same".to_string()).unwrap());
            }
        });
        let got: Option<String> = store.get("shared").unwrap();
        assert_eq!(got.as_deref(), Some("same"));
        assert_eq!(store.list().unwrap().len(), 1);
    }

    #[test]
    fn tampered_file_is_corruption_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        store.put("k", &"payload".to_string()).unwrap();
        let path = dir.path().join("k.json");
        let mut raw = fs::read_to_string(&path).unwrap();
        raw = raw.replace("payload", "pAyload");
        fs::write(&path, raw).unwrap();
        let err = store.get::<String>("k").unwrap_err();
        assert!(matches!(err, StoreError::Corrupt { .. }));
    }

    #[test]
    fn list_and_purge() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        store.put("a", &1u32).unwrap();
        store.put("b", &2u32).unwrap();
        assert_eq!(store.list().unwrap().len(), 2);
        assert_eq!(store.purge().unwrap(), 2);
        assert!(store.list().unwrap().is_empty());
    }

    #[test]
    fn record_writer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let mut w = RecordWriter::create(&path).unwrap();
        w.append(&serde_json::json!({"id": 1})).unwrap();
        w.append(&serde_json::json!({"id": 2})).unwrap();
        drop(w);
        let records: Vec<serde_json::Value> = read_records(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[1]["id"], 2);
    }
}
