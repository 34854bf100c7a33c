//! Commonsense inference backends (fixture file or model server) behind a
//! durable content-addressed cache.
//!
//! Model-server wire format: `POST <endpoint>` with
//! `{"text": str, "relation": "xWant"|"xReact"|"xIntent", "max_phrases": int, "decode_params": {..}}`,
//! answered by `{"phrases": [str, ..]}`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use empathic_core::knowledge::{cache_key, normalize_source, DecodeParams, InferenceSet, Relation};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cache::DiskCache;
use crate::error::{Error, Result};
use crate::io;
use crate::par;
use crate::transport::{RetryPolicy, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    ModelServer,
    Fixture,
    /// Deterministic local computation; no network, no recorded file.
    Builtin,
}

pub trait KnowledgeBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn kind(&self) -> BackendKind;
    fn decode_params(&self) -> &DecodeParams;
    /// Raw phrases for one (text, relation) request.
    fn query(&self, text: &str, relation: Relation, max_phrases: usize) -> Result<Vec<String>>;
}

/// One line of a knowledge fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub key: String,
    pub source_text: String,
    pub relation: Relation,
    pub phrases: Vec<String>,
    pub backend_id: String,
    #[serde(default, skip_serializing_if = "DecodeParams::is_empty")]
    pub decode_params: DecodeParams,
}

impl FixtureRecord {
    pub fn new(source_text: &str, relation: Relation, phrases: Vec<String>, backend_id: &str) -> Self {
        let decode_params = DecodeParams::new();
        Self {
            key: cache_key(source_text, relation, backend_id, &decode_params),
            source_text: normalize_source(source_text),
            relation,
            phrases,
            backend_id: backend_id.to_string(),
            decode_params,
        }
    }
}

/// Replays recorded inferences; never touches the network.
pub struct FixtureKnowledge {
    backend_id: String,
    decode_params: DecodeParams,
    entries: HashMap<String, Vec<String>>,
}

impl FixtureKnowledge {
    pub fn from_records(records: Vec<FixtureRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Config("knowledge fixture is empty".into()))?;
        let backend_id = first.backend_id.clone();
        let decode_params = first.decode_params.clone();
        let mut entries = HashMap::with_capacity(records.len());
        for r in records {
            if r.backend_id != backend_id || r.decode_params != decode_params {
                return Err(Error::Config(format!(
                    "knowledge fixture mixes backends: {} and {}",
                    backend_id, r.backend_id
                )));
            }
            let expected = cache_key(&r.source_text, r.relation, &r.backend_id, &r.decode_params);
            if expected != r.key {
                return Err(Error::Config(format!(
                    "fixture key {} does not match its content (expected {expected})",
                    r.key
                )));
            }
            entries.insert(r.key, r.phrases);
        }
        Ok(Self {
            backend_id,
            decode_params,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(io::read_jsonl(path)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl KnowledgeBackend for FixtureKnowledge {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Fixture
    }

    fn decode_params(&self) -> &DecodeParams {
        &self.decode_params
    }

    fn query(&self, text: &str, relation: Relation, _max_phrases: usize) -> Result<Vec<String>> {
        let key = cache_key(text, relation, &self.backend_id, &self.decode_params);
        self.entries.get(&key).cloned().ok_or_else(|| Error::FixtureMiss {
            backend: self.backend_id.clone(),
            what: format!("{relation} of {:?}", normalize_source(text)),
        })
    }
}

/// A COMET-style inference server reached over HTTP.
pub struct ModelServerKnowledge {
    backend_id: String,
    endpoint: String,
    decode_params: DecodeParams,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
}

impl ModelServerKnowledge {
    pub fn new(
        backend_id: &str,
        endpoint: &str,
        decode_params: DecodeParams,
        transport: Arc<dyn Transport>,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            backend_id: backend_id.to_string(),
            endpoint: endpoint.to_string(),
            decode_params,
            transport,
            retry,
        }
    }
}

#[derive(Deserialize)]
struct PhrasesResponse {
    phrases: Vec<String>,
}

impl KnowledgeBackend for ModelServerKnowledge {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::ModelServer
    }

    fn decode_params(&self) -> &DecodeParams {
        &self.decode_params
    }

    fn query(&self, text: &str, relation: Relation, max_phrases: usize) -> Result<Vec<String>> {
        let body = json!({
            "text": text,
            "relation": relation.tag(),
            "max_phrases": max_phrases,
            "decode_params": self.decode_params,
        });
        let (value, _) = self
            .retry
            .run(|| self.transport.post_json(&self.endpoint, &[], &body))
            .map_err(|(e, attempts)| {
                Error::backend(&self.backend_id, format!("unreachable after {attempts} attempt(s): {e}"))
            })?;
        let resp: PhrasesResponse = serde_json::from_value(value)
            .map_err(|e| Error::backend(&self.backend_id, format!("bad response: {e}")))?;
        Ok(resp.phrases)
    }
}

/// `infer` plus caching and batching over one backend.
pub struct KnowledgeService {
    backend: Arc<dyn KnowledgeBackend>,
    cache: Option<DiskCache>,
    max_phrases: usize,
    max_parallel: usize,
}

impl KnowledgeService {
    pub fn new(backend: Arc<dyn KnowledgeBackend>, cache: Option<DiskCache>, max_phrases: usize) -> Self {
        Self {
            backend,
            cache,
            max_phrases,
            max_parallel: 4,
        }
    }

    pub fn with_max_parallel(mut self, n: usize) -> Self {
        self.max_parallel = n.max(1);
        self
    }

    pub fn backend(&self) -> &dyn KnowledgeBackend {
        self.backend.as_ref()
    }

    pub fn key(&self, text: &str, relation: Relation) -> String {
        cache_key(text, relation, self.backend.backend_id(), self.backend.decode_params())
    }

    pub fn cache_get(&self, key: &str) -> Result<Option<InferenceSet>> {
        match &self.cache {
            Some(c) => c.get(key),
            None => Ok(None),
        }
    }

    pub fn cache_put(&self, key: &str, set: &InferenceSet) -> Result<()> {
        match &self.cache {
            Some(c) => c.put(key, set),
            None => Ok(()),
        }
    }

    pub fn infer(&self, text: &str, relation: Relation) -> Result<InferenceSet> {
        if text.trim().is_empty() {
            return Err(empathic_core::Error::Precondition("inference text is empty".into()).into());
        }
        if self.max_phrases == 0 {
            return Err(empathic_core::Error::Precondition("max_phrases must be at least 1".into()).into());
        }
        let key = self.key(text, relation);
        if let Some(hit) = self.cache_get(&key)? {
            if hit.check(self.max_phrases).is_ok() {
                return Ok(hit);
            }
            log::warn!("cached inference {key} violates the phrase limit; recomputing");
        }
        let source = normalize_source(text);
        let raw = self.backend.query(&source, relation, self.max_phrases)?;
        let set = InferenceSet::from_raw(
            &source,
            relation,
            raw,
            self.max_phrases,
            self.backend.backend_id(),
            self.backend.decode_params().clone(),
        )?;
        self.cache_put(&key, &set)?;
        Ok(set)
    }

    fn infer_labeled(&self, text: &str, relation: Relation) -> Result<InferenceSet> {
        self.infer(text, relation).map_err(|e| Error::Relation {
            relation,
            source: Box::new(e),
        })
    }

    /// (xWant, xReact) for the final user utterance.
    pub fn user_bundle(&self, context_tail: &str) -> Result<(InferenceSet, InferenceSet)> {
        Ok((
            self.infer_labeled(context_tail, Relation::XWant)?,
            self.infer_labeled(context_tail, Relation::XReact)?,
        ))
    }

    /// (xIntent, xReact) for a ground-truth sys response.
    pub fn sys_bundle(&self, response_text: &str) -> Result<(InferenceSet, InferenceSet)> {
        Ok((
            self.infer_labeled(response_text, Relation::XIntent)?,
            self.infer_labeled(response_text, Relation::XReact)?,
        ))
    }

    /// Runs many requests with bounded parallelism; results keep input order.
    pub fn infer_many(&self, requests: &[(String, Relation)]) -> Vec<Result<InferenceSet>> {
        par::map_bounded(requests, self.max_parallel, |(text, rel)| self.infer_labeled(text, *rel))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> FixtureKnowledge {
        FixtureKnowledge::from_records(vec![
            FixtureRecord::new(
                "Did you suffer any injuries?",
                Relation::XIntent,
                vec!["to make sure they are ok".into(), "to know if you are ok".into()],
                "comet-fixture",
            ),
            FixtureRecord::new("Thanks.", Relation::XWant, vec!["none".into()], "comet-fixture"),
        ])
        .unwrap()
    }

    #[test]
    fn fixture_replay_and_cache() {
        let dir = tempfile::tempdir().unwrap();
        let svc = KnowledgeService::new(Arc::new(fixture()), Some(DiskCache::new(dir.path())), 5);
        let s = svc.infer("Did you suffer any injuries?  ", Relation::XIntent).unwrap();
        assert_eq!(s.phrases[0], "to make sure they are ok");
        let key = svc.key("Did you suffer any injuries?", Relation::XIntent);
        assert_eq!(svc.cache_get(&key).unwrap(), Some(s));
    }

    #[test]
    fn empty_text_and_empty_output_are_errors() {
        let svc = KnowledgeService::new(Arc::new(fixture()), None, 5);
        assert!(matches!(
            svc.infer("", Relation::XWant),
            Err(Error::Core(empathic_core::Error::Precondition(_)))
        ));
        let err = svc.user_bundle("Thanks.").unwrap_err();
        assert!(matches!(err, Error::Relation { relation: Relation::XWant, .. }));
    }

    #[test]
    fn tampered_fixture_key_rejected() {
        let mut r = FixtureRecord::new("a", Relation::XWant, vec!["b".into()], "f");
        r.source_text = "other".into();
        assert!(FixtureKnowledge::from_records(vec![r]).is_err());
    }
}
