//! Persistent response cache keyed by a digest of the full request.
//!
//! Layout: `<dir>/<first two hex chars>/<digest>.json`. Entries are written
//! to a temporary file in the shard directory and renamed into place, so a
//! reader never observes a partial entry. Every entry carries its own digest
//! and a checksum of the text; entries failing either check count as misses.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatRequest, GatewayError};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(String);

impl CacheKey {
    /// SHA-256 over the canonical wire encoding (model, messages,
    /// temperature, seed, max_tokens).
    pub fn of(request: &ChatRequest) -> Self {
        Self(sha256_hex(request.wire_json().as_bytes()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize, Deserialize)]
struct Entry {
    digest: String,
    text: String,
    text_sha256: String,
    timestamp: u64,
}

#[derive(Debug, PartialEq, Eq)]
enum Lookup {
    Hit(String),
    Missing,
    Corrupt,
}

pub struct ResponseCache {
    dir: PathBuf,
    locks: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, locks: Mutex::new(HashMap::new()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(&key.0[..2]).join(format!("{}.json", key.0))
    }

    fn key_lock(&self, key: &CacheKey) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("cache lock map poisoned");
        locks.entry(key.clone()).or_default().clone()
    }

    fn lookup(&self, key: &CacheKey) -> Lookup {
        let bytes = match fs::read(self.entry_path(key)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Lookup::Missing,
            Err(_) => return Lookup::Corrupt,
        };
        match serde_json::from_slice::<Entry>(&bytes) {
            Ok(entry) if entry.digest == key.0 && entry.text_sha256 == sha256_hex(entry.text.as_bytes()) => {
                Lookup::Hit(entry.text)
            }
            _ => Lookup::Corrupt,
        }
    }

    /// Stored text for `key`, if a valid entry exists.
    pub fn get(&self, key: &CacheKey) -> Option<String> {
        match self.lookup(key) {
            Lookup::Hit(text) => Some(text),
            _ => None,
        }
    }

    /// Atomically persists `text`. Without `overwrite`, an entry that
    /// appeared concurrently wins and its text is returned instead.
    pub fn put(&self, key: &CacheKey, text: &str, overwrite: bool) -> io::Result<String> {
        let path = self.entry_path(key);
        let shard = path.parent().expect("entry path has a shard directory");
        fs::create_dir_all(shard)?;
        let entry = Entry {
            digest: key.0.clone(),
            text: text.to_string(),
            text_sha256: sha256_hex(text.as_bytes()),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        let mut tmp = tempfile::Builder::new().prefix(".tmp-").tempfile_in(shard)?;
        tmp.write_all(&serde_json::to_vec(&entry).map_err(io::Error::other)?)?;
        tmp.as_file().sync_all()?;
        if overwrite {
            tmp.persist(&path).map_err(|e| e.error)?;
            return Ok(text.to_string());
        }
        match tmp.persist_noclobber(&path) {
            Ok(_) => Ok(text.to_string()),
            Err(e) if e.error.kind() == io::ErrorKind::AlreadyExists => match self.lookup(key) {
                Lookup::Hit(existing) => Ok(existing),
                _ => {
                    e.file.persist(&path).map_err(|e| e.error)?;
                    Ok(text.to_string())
                }
            },
            Err(e) => Err(e.error),
        }
    }

    /// Number of entries on disk.
    pub fn len(&self) -> io::Result<usize> {
        let mut n = 0;
        for shard in fs::read_dir(&self.dir)? {
            let shard = shard?;
            if !shard.file_type()?.is_dir() {
                continue;
            }
            for entry in fs::read_dir(shard.path())? {
                let name = entry?.file_name();
                let name = name.to_string_lossy();
                if name.ends_with(".json") && !name.starts_with(".tmp-") {
                    n += 1;
                }
            }
        }
        Ok(n)
    }

    pub fn is_empty(&self) -> io::Result<bool> {
        Ok(self.len()? == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachedCompletion {
    pub text: String,
    pub cache_hit: bool,
}

/// Serves `request` from `cache` when possible; otherwise asks `backend`
/// and stores the answer before returning it. Concurrent misses on the same
/// key within one process are serialized, so only one backend call happens.
pub fn cached_chat_complete(
    request: &ChatRequest,
    cache: &ResponseCache,
    backend: &dyn ChatBackend,
) -> Result<CachedCompletion, GatewayError> {
    request.validate()?;
    let key = CacheKey::of(request);
    let lock = cache.key_lock(&key);
    let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
    let overwrite = match cache.lookup(&key) {
        Lookup::Hit(text) => return Ok(CachedCompletion { text, cache_hit: true }),
        Lookup::Missing => false,
        Lookup::Corrupt => {
            log::warn!("cache: entry {} failed verification; refetching", key.as_str());
            true
        }
    };
    let completion = backend.complete(request)?;
    let text = cache.put(&key, &completion.text, overwrite)?;
    Ok(CachedCompletion { text, cache_hit: false })
}
