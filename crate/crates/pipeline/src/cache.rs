//! Content-addressed on-disk cache. Each entry lives at
//! `<root>/<key[..2]>/<key>` and holds a SHA-256 line followed by the JSON
//! payload; entries whose checksum does not match are treated as absent.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone)]
pub struct DiskCache {
    root: PathBuf,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, key: &str) -> Result<PathBuf> {
        if key.len() < 3 || !key.bytes().all(|b| b.is_ascii_alphanumeric()) {
            return Err(Error::Config(format!("invalid cache key {key:?}")));
        }
        Ok(self.root.join(&key[..2]).join(key))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        let path = self.entry_path(key)?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let text = String::from_utf8_lossy(&bytes);
        let Some((sum, payload)) = text.split_once('\n') else {
            log::warn!("cache entry {} is truncated; ignoring it", path.display());
            return Ok(None);
        };
        if io::sha256_hex(payload.as_bytes()) != sum {
            log::warn!("cache entry {} failed its checksum; ignoring it", path.display());
            return Ok(None);
        }
        match serde_json::from_str(payload) {
            Ok(v) => Ok(Some(v)),
            Err(e) => {
                log::warn!("cache entry {} does not decode ({e}); ignoring it", path.display());
                Ok(None)
            }
        }
    }

    /// Atomic put; concurrent writers of the same key resolve last-writer-wins.
    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<()> {
        let path = self.entry_path(key)?;
        let payload = serde_json::to_string(value).expect("serializable cache value");
        let body = format!("{}\n{payload}", io::sha256_hex(payload.as_bytes()));
        io::atomic_write(&path, body.as_bytes())
    }
}
