//! Sentence embedders, their cache, and the persisted selection index.
//!
//! Index file layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  b"EMPIDX1\n"
//! hlen       u32      length of the header in bytes
//! header     hlen     JSON {"backend_id": str, "dim": int, "count": int, "field": "situation"|"context"}
//! count records, each:
//!   idlen    u32
//!   id       idlen bytes of UTF-8
//!   vector   dim x f64
//! ```

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use empathic_core::corpus::Conversation;
use empathic_core::knowledge::normalize_source;
use empathic_core::prompting::render_dialogue;
use empathic_core::selection::{top_k, EmbeddingVector, RankedCandidates};
use empathic_core::text;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cache::DiskCache;
use crate::error::{Error, Result};
use crate::io;
use crate::knowledge::BackendKind;
use crate::par;
use crate::transport::{RetryPolicy, Transport};

pub trait Embedder: Send + Sync {
    fn backend_id(&self) -> &str;
    fn kind(&self) -> BackendKind;
    fn dim(&self) -> usize;
    fn embed_raw(&self, text: &str) -> Result<Vec<f64>>;
}

/// Signed feature hashing of word unigrams and bigrams, L2-normalized.
/// Deterministic and offline; a stand-in when no sentence encoder is
/// available.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    id: String,
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2, "hashing embedder needs at least two dimensions");
        Self {
            id: format!("hashing-uni-bi-v1-{dim}"),
            dim,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashingEmbedder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Builtin
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, input: &str) -> Result<Vec<f64>> {
        let words = text::words(input);
        let mut v = vec![0.0; self.dim];
        let mut add = |feature: &str, weight: f64| {
            let h = fnv1a(feature.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign * weight;
        };
        // keeps the vector non-zero for inputs without words
        add("<s>", 0.25);
        for w in &words {
            add(w, 1.0);
        }
        for pair in words.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]), 0.5);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub backend_id: String,
    pub text: String,
    pub vector: Vec<f64>,
}

/// Recorded vectors keyed by normalized text.
pub struct FixtureEmbedder {
    id: String,
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl FixtureEmbedder {
    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Config("embedding fixture is empty".into()))?;
        let id = first.backend_id.clone();
        let dim = first.vector.len();
        let mut vectors = HashMap::new();
        for r in records {
            if r.backend_id != id || r.vector.len() != dim {
                return Err(Error::Config(format!(
                    "embedding fixture record for {:?} disagrees on backend or dim",
                    r.text
                )));
            }
            vectors.insert(normalize_source(&r.text), r.vector);
        }
        Ok(Self { id, dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(io::read_jsonl(path)?)
    }
}

impl Embedder for FixtureEmbedder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Fixture
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(&normalize_source(text))
            .cloned()
            .ok_or_else(|| Error::FixtureMiss {
                backend: self.id.clone(),
                what: format!("embedding of {text:?}"),
            })
    }
}

/// Sentence encoder server: `POST {"text": str}` answered by `{"vector": [f64]}`.
pub struct ModelServerEmbedder {
    id: String,
    dim: usize,
    endpoint: String,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
}

impl ModelServerEmbedder {
    pub fn new(id: &str, dim: usize, endpoint: &str, transport: Arc<dyn Transport>, retry: RetryPolicy) -> Self {
        Self {
            id: id.to_string(),
            dim,
            endpoint: endpoint.to_string(),
            transport,
            retry,
        }
    }
}

#[derive(Deserialize)]
struct VectorResponse {
    vector: Vec<f64>,
}

impl Embedder for ModelServerEmbedder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::ModelServer
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>> {
        let body = json!({ "text": text });
        let (value, _) = self
            .retry
            .run(|| self.transport.post_json(&self.endpoint, &[], &body))
            .map_err(|(e, n)| Error::backend(&self.id, format!("unreachable after {n} attempt(s): {e}")))?;
        let resp: VectorResponse =
            serde_json::from_value(value).map_err(|e| Error::backend(&self.id, format!("bad response: {e}")))?;
        Ok(resp.vector)
    }
}

/// Validating, caching front for an embedder.
pub struct EmbeddingService {
    backend: Arc<dyn Embedder>,
    cache: Option<DiskCache>,
    max_parallel: usize,
}

impl EmbeddingService {
    pub fn new(backend: Arc<dyn Embedder>, cache: Option<DiskCache>) -> Self {
        Self {
            backend,
            cache,
            max_parallel: 4,
        }
    }

    pub fn with_max_parallel(mut self, n: usize) -> Self {
        self.max_parallel = n.max(1);
        self
    }

    pub fn backend(&self) -> &dyn Embedder {
        self.backend.as_ref()
    }

    fn key(&self, text: &str) -> String {
        io::sha256_hex(format!("embed\0{}\0{}", self.backend.backend_id(), normalize_source(text)).as_bytes())
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(empathic_core::Error::Precondition("embedding text is empty".into()).into());
        }
        let key = self.key(text);
        if let Some(cache) = &self.cache {
            if let Some(v) = cache.get::<Vec<f64>>(&key)? {
                if v.len() == self.backend.dim() {
                    return Ok(EmbeddingVector::new(v)?);
                }
            }
        }
        let v = self.backend.embed_raw(&normalize_source(text))?;
        if v.len() != self.backend.dim() {
            return Err(empathic_core::Error::DimensionMismatch {
                expected: self.backend.dim(),
                actual: v.len(),
            }
            .into());
        }
        let vector = EmbeddingVector::new(v)?;
        if let Some(cache) = &self.cache {
            cache.put(&key, &vector.values())?;
        }
        Ok(vector)
    }

    pub fn embed_many(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        par::map_bounded(texts, self.max_parallel, |t| self.embed(t))
            .into_iter()
            .collect()
    }
}

/// Which conversation text is embedded for selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexField {
    #[default]
    Situation,
    Context,
}

impl IndexField {
    pub fn text_of(self, conv: &Conversation) -> String {
        match self {
            IndexField::Situation => conv.situation.clone(),
            IndexField::Context => render_dialogue(&conv.utterances),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexHeader {
    backend_id: String,
    dim: usize,
    count: usize,
    field: IndexField,
}

const MAGIC: &[u8; 8] = b"EMPIDX1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub backend_id: String,
    pub dim: usize,
    pub field: IndexField,
    pub entries: Vec<(String, EmbeddingVector)>,
}

impl EmbeddingIndex {
    pub fn build(conversations: &[Conversation], service: &EmbeddingService, field: IndexField) -> Result<Self> {
        let texts: Vec<String> = conversations.iter().map(|c| field.text_of(c)).collect();
        let vectors = service.embed_many(&texts)?;
        Ok(Self {
            backend_id: service.backend().backend_id().to_string(),
            dim: service.backend().dim(),
            field,
            entries: conversations.iter().map(|c| c.id.clone()).zip(vectors).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&IndexHeader {
            backend_id: self.backend_id.clone(),
            dim: self.dim,
            count: self.entries.len(),
            field: self.field,
        })
        .expect("index header");
        let mut out = Vec::with_capacity(16 + header.len() + self.entries.len() * (16 + self.dim * 8));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (id, v) in &self.entries {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| corrupt("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
        let hlen = u32_at(take(4)?);
        let header: IndexHeader =
            serde_json::from_slice(take(hlen)?).map_err(|e| corrupt(&format!("header: {e}")))?;
        let mut entries = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let idlen = u32_at(take(4)?);
            let id = std::str::from_utf8(take(idlen)?)
                .map_err(|_| corrupt("id is not UTF-8"))?
                .to_string();
            let raw = take(header.dim * 8)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((id, EmbeddingVector::new(values)?));
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            backend_id: header.backend_id,
            dim: header.dim,
            field: header.field,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Embeds the query text with `service` and ranks the index against it.
    pub fn select(&self, query_id: &str, query_text: &str, service: &EmbeddingService, k: usize) -> Result<RankedCandidates> {
        if service.backend().backend_id() != self.backend_id {
            return Err(Error::Config(format!(
                "index built with {} but queried with {}",
                self.backend_id,
                service.backend().backend_id()
            )));
        }
        let q = service.embed(query_text)?;
        Ok(top_k(query_id, &q, &self.entries, k)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashing_is_deterministic_and_unit_norm() {
        let e = HashingEmbedder::new(64);
        let a = e.embed_raw("I was scared of a spider").unwrap();
        assert_eq!(a, e.embed_raw("I was scared of a spider").unwrap());
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn index_round_trip() {
        let idx = EmbeddingIndex {
            backend_id: "b".into(),
            dim: 2,
            field: IndexField::Situation,
            entries: vec![
                ("a".into(), EmbeddingVector::new(vec![1.0, 0.5]).unwrap()),
                ("é".into(), EmbeddingVector::new(vec![-0.25, 3.0]).unwrap()),
            ],
        };
        let bytes = idx.to_bytes();
        assert_eq!(EmbeddingIndex::from_bytes(&bytes, Path::new("x")).unwrap(), idx);
        assert!(EmbeddingIndex::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        struct Bad;
        impl Embedder for Bad {
            fn backend_id(&self) -> &str {
                "bad"
            }
            fn kind(&self) -> BackendKind {
                BackendKind::Fixture
            }
            fn dim(&self) -> usize {
                3
            }
            fn embed_raw(&self, _: &str) -> Result<Vec<f64>> {
                Ok(vec![1.0, 2.0])
            }
        }
        let svc = EmbeddingService::new(Arc::new(Bad), None);
        assert!(matches!(
            svc.embed("x"),
            Err(Error::Core(empathic_core::Error::DimensionMismatch { expected: 3, actual: 2 }))
        ));
        assert!(svc.embed(" ").is_err());
    }
}
