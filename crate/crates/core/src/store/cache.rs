//! Content-addressed cache of model generations (captions, summaries).
//!
//! Keys are SHA-256 over `image bytes ∥ 0x00 ∥ prompt text ∥ 0x00 ∥ model id`.
//! When backed by a directory, each entry is a file named by the hex key,
//! written to a temp file and renamed into place.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheKey([u8; 32]);

impl CacheKey {
    pub fn new(image: &[u8], prompt_text: &str, model_id: &str) -> Self {
        let mut h = Sha256::new();
        h.update(image);
        h.update([0u8]);
        h.update(prompt_text.as_bytes());
        h.update([0u8]);
        h.update(model_id.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&h.finalize());
        Self(out)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey({})", self.to_hex())
    }
}

#[derive(Debug, Default)]
pub struct GenerationCache {
    dir: Option<PathBuf>,
    entries: Mutex<HashMap<CacheKey, String>>,
    key_locks: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl GenerationCache {
    /// A cache that lives only for this process.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// A cache persisted under `dir`, created if missing.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir: Some(dir),
            ..Self::default()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<String>> {
        if let Some(text) = self.entries.lock().expect("cache poisoned").get(key) {
            return Ok(Some(text.clone()));
        }
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let path = dir.join(key.to_hex());
        match std::fs::read(&path) {
            Ok(bytes) => {
                let text = String::from_utf8(bytes).map_err(|_| {
                    Error::io(
                        &path,
                        std::io::Error::new(std::io::ErrorKind::InvalidData, "not UTF-8"),
                    )
                })?;
                self.entries
                    .lock()
                    .expect("cache poisoned")
                    .insert(*key, text.clone());
                Ok(Some(text))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn store(&self, key: CacheKey, text: &str) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join(key.to_hex());
            let tmp = dir.join(format!(
                "{}.tmp.{}.{}",
                key.to_hex(),
                std::process::id(),
                TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
            ));
            std::fs::write(&tmp, text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        self.entries
            .lock()
            .expect("cache poisoned")
            .insert(key, text.to_string());
        Ok(())
    }

    /// Returns the cached text for `key`, or runs `generate` and stores its
    /// output. Within one process `generate` runs at most once per key even
    /// under concurrent callers. Failed or empty generations are not stored.
    pub fn get_or_generate<F>(&self, key: CacheKey, generate: F) -> Result<String>
    where
        F: FnOnce() -> Result<String>,
    {
        if let Some(text) = self.get(&key)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(text);
        }
        let lock = self
            .key_locks
            .lock()
            .expect("cache poisoned")
            .entry(key)
            .or_default()
            .clone();
        let _guard = lock.lock().expect("key lock poisoned");
        if let Some(text) = self.get(&key)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(text);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let text = generate()?;
        if text.is_empty() {
            return Err(Error::EmptyGeneration);
        }
        self.store(key, &text)?;
        Ok(text)
    }
}
