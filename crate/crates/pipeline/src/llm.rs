//! Chat-completion client with record/replay, retries and usage accounting.
//!
//! Recordings are line-delimited JSON `Transcript`s keyed by `request_key`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use empathic_core::prompting::{render, PromptBundle};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::io;
use crate::par;
use crate::transport::{RetryPolicy, Transport, TransportError};

/// Environment variable holding the API credential.
pub const API_KEY_VAR: &str = "OPENAI_API_KEY";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Live,
    Record,
    Replay,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Live => "live",
            Mode::Record => "record",
            Mode::Replay => "replay",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "live" => Ok(Mode::Live),
            "record" => Ok(Mode::Record),
            "replay" => Ok(Mode::Replay),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into().replace("\r\n", "\n"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
    pub request_key: String,
}

/// Content hash of a request: SHA-256 over the JSON encoding of
/// `[model_id, temperature, messages]`, which is injective on these fields.
pub fn request_key(model_id: &str, temperature: f64, messages: &[ChatMessage]) -> String {
    let canonical = serde_json::to_vec(&(model_id, temperature, messages)).expect("request encodes");
    io::sha256_hex(&canonical)
}

impl ChatRequest {
    pub fn new(model_id: &str, temperature: f64, messages: Vec<ChatMessage>) -> Result<Self> {
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(Error::Config(format!("temperature must be >= 0, got {temperature}")));
        }
        if messages.is_empty() {
            return Err(Error::Config("chat request without messages".into()));
        }
        // -0.0 and 0.0 are the same request
        let temperature = if temperature == 0.0 { 0.0 } else { temperature };
        let messages: Vec<ChatMessage> = messages
            .into_iter()
            .map(|m| ChatMessage::new(m.role, m.content))
            .collect();
        Ok(Self {
            request_key: request_key(model_id, temperature, &messages),
            model_id: model_id.to_string(),
            temperature,
            messages,
        })
    }

    pub fn is_deterministic(&self) -> bool {
        self.temperature == 0.0
    }
}

/// How a prompt is laid out as chat messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageLayout {
    /// The whole rendered prompt as one user message.
    #[default]
    SingleUser,
    /// Introduction as a system message, the rest as a user message.
    SystemIntro,
}

pub fn messages_for(bundle: &PromptBundle, layout: MessageLayout) -> Vec<ChatMessage> {
    let full = render(bundle);
    match layout {
        MessageLayout::SingleUser => vec![ChatMessage::new(Role::User, full)],
        MessageLayout::SystemIntro => {
            let intro = bundle.introduction.replace("\r\n", "\n");
            let intro = intro.trim_end();
            let body = full
                .strip_prefix(intro)
                .map(|b| b.trim_start_matches('\n'))
                .unwrap_or(&full);
            vec![
                ChatMessage::new(Role::System, intro),
                ChatMessage::new(Role::User, body),
            ]
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub request_key: String,
    pub request: ChatRequest,
    pub reply: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
    pub recorded_at: String,
    #[serde(default)]
    pub usage: Option<Usage>,
    /// Provider-side parameters echoed back, kept for attribution.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provider_params: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderReply {
    pub text: String,
    pub usage: Option<Usage>,
    pub params: BTreeMap<String, Value>,
}

pub trait ChatProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> std::result::Result<ProviderReply, TransportError>;
}

/// OpenAI-compatible chat completions endpoint.
pub struct OpenAiProvider {
    endpoint: String,
    api_key: String,
    transport: Arc<dyn Transport>,
}

impl OpenAiProvider {
    pub fn new(endpoint: &str, api_key: String, transport: Arc<dyn Transport>) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            api_key,
            transport,
        }
    }

    /// Reads the credential from `var`.
    pub fn from_env(var: &str, endpoint: &str, transport: Arc<dyn Transport>) -> Result<Self> {
        let key = std::env::var(var)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| Error::MissingCredential { var: var.to_string() })?;
        Ok(Self::new(endpoint, key, transport))
    }
}

impl ChatProvider for OpenAiProvider {
    fn provider_id(&self) -> &str {
        "openai-chat-completions"
    }

    fn complete(&self, request: &ChatRequest) -> std::result::Result<ProviderReply, TransportError> {
        let body = json!({
            "model": request.model_id,
            "temperature": request.temperature,
            "messages": request.messages,
        });
        let headers = vec![("Authorization".to_string(), format!("Bearer {}", self.api_key))];
        let v = self.transport.post_json(&self.endpoint, &headers, &body)?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| TransportError::fatal("response has no choices[0].message.content"))?
            .to_string();
        let usage = v.get("usage").map(|u| Usage {
            prompt_tokens: u["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
        });
        let mut params = BTreeMap::new();
        for k in ["model", "system_fingerprint", "id", "created"] {
            if let Some(x) = v.get(k) {
                params.insert(k.to_string(), x.clone());
            }
        }
        if let Some(fr) = v["choices"][0].get("finish_reason") {
            params.insert("finish_reason".into(), fr.clone());
        }
        Ok(ProviderReply { text, usage, params })
    }
}

type ReplyFn = dyn Fn(&ChatRequest) -> String + Send + Sync;

/// Answers from a closure. Used to author recordings and in tests.
pub struct ScriptedProvider {
    id: String,
    reply: Box<ReplyFn>,
    calls: AtomicUsize,
}

impl ScriptedProvider {
    pub fn new(id: &str, reply: impl Fn(&ChatRequest) -> String + Send + Sync + 'static) -> Self {
        Self {
            id: id.to_string(),
            reply: Box::new(reply),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for ScriptedProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> std::result::Result<ProviderReply, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = (self.reply)(request);
        let prompt_tokens = request.messages.iter().map(|m| m.content.split_whitespace().count() as u64).sum();
        Ok(ProviderReply {
            usage: Some(Usage {
                prompt_tokens,
                completion_tokens: text.split_whitespace().count() as u64,
            }),
            text,
            params: BTreeMap::new(),
        })
    }
}

/// Transcripts loaded at open time are immutable; new ones are appended
/// under a single writer lock.
pub struct RecordingStore {
    path: Option<PathBuf>,
    loaded: HashMap<String, Transcript>,
    fresh: RwLock<HashMap<String, Transcript>>,
    writer: Mutex<Option<File>>,
}

impl RecordingStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            loaded: HashMap::new(),
            fresh: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens (or prepares to create) a recording file. Duplicate keys keep
    /// the first transcript.
    pub fn open(path: &Path) -> Result<Self> {
        let mut loaded = HashMap::new();
        if path.exists() {
            for t in io::read_jsonl::<Transcript>(path)? {
                loaded.entry(t.request_key.clone()).or_insert(t);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            loaded,
            fresh: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        })
    }

    pub fn len(&self) -> usize {
        self.loaded.len() + self.fresh.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<Transcript> {
        if let Some(t) = self.loaded.get(key) {
            return Some(t.clone());
        }
        self.fresh.read().expect("store lock").get(key).cloned()
    }

    pub fn append(&self, t: &Transcript) -> Result<()> {
        let mut writer = self.writer.lock().expect("store writer");
        if self.get(&t.request_key).is_some() {
            return Ok(());
        }
        if let Some(path) = &self.path {
            if writer.is_none() {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    io::ensure_dir(dir)?;
                }
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                *writer = Some(f);
            }
            let f = writer.as_mut().expect("writer opened");
            let mut line = serde_json::to_string(t).expect("transcript encodes");
            line.push('\n');
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        self.fresh
            .write()
            .expect("store lock")
            .insert(t.request_key.clone(), t.clone());
        Ok(())
    }
}

/// Request and token counts for one client.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub provider_calls: u64,
    pub served_from_recording: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Estimated spend given the configured per-1k-token prices.
    pub estimated_cost: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub prompt_per_1k: f64,
    pub completion_per_1k: f64,
}

pub struct LlmClient {
    mode: Mode,
    store: Arc<RecordingStore>,
    provider: Option<Arc<dyn ChatProvider>>,
    retry: RetryPolicy,
    pricing: Pricing,
    cost: Mutex<CostReport>,
}

impl LlmClient {
    /// `provider` may be `None` only in replay mode.
    pub fn new(
        mode: Mode,
        store: Arc<RecordingStore>,
        provider: Option<Arc<dyn ChatProvider>>,
        retry: RetryPolicy,
    ) -> Result<Self> {
        if mode != Mode::Replay && provider.is_none() {
            return Err(Error::Config(format!("{} mode needs a chat provider", mode.as_str())));
        }
        Ok(Self {
            mode,
            store,
            provider,
            retry,
            pricing: Pricing::default(),
            cost: Mutex::new(CostReport::default()),
        })
    }

    pub fn with_pricing(mut self, pricing: Pricing) -> Self {
        self.pricing = pricing;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn cost(&self) -> CostReport {
        *self.cost.lock().expect("cost lock")
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<Transcript> {
        if self.mode != Mode::Live {
            if let Some(t) = self.store.get(&request.request_key) {
                self.cost.lock().expect("cost lock").served_from_recording += 1;
                return Ok(t);
            }
            if self.mode == Mode::Replay {
                return Err(Error::ReplayMiss {
                    request_key: request.request_key.clone(),
                });
            }
        }
        let provider = self.provider.as_ref().expect("provider checked at construction");
        let started = Instant::now();
        let (reply, attempts) = self
            .retry
            .run(|| provider.complete(request))
            .map_err(|(e, n)| {
                Error::backend(provider.provider_id(), format!("failed after {n} attempt(s): {e}"))
            })?;
        if reply.text.trim().is_empty() {
            return Err(Error::backend(provider.provider_id(), "empty completion"));
        }
        let transcript = Transcript {
            request_key: request.request_key.clone(),
            request: request.clone(),
            reply: reply.text,
            latency_ms: started.elapsed().as_millis() as u64,
            attempt_count: attempts,
            recorded_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            usage: reply.usage,
            provider_params: reply.params,
        };
        {
            let mut c = self.cost.lock().expect("cost lock");
            c.provider_calls += 1;
            if let Some(u) = reply.usage {
                c.prompt_tokens += u.prompt_tokens;
                c.completion_tokens += u.completion_tokens;
                c.estimated_cost += u.prompt_tokens as f64 / 1000.0 * self.pricing.prompt_per_1k
                    + u.completion_tokens as f64 / 1000.0 * self.pricing.completion_per_1k;
            }
        }
        if self.mode == Mode::Record {
            self.store.append(&transcript)?;
        }
        Ok(transcript)
    }

    /// Completes requests with at most `max_parallel` in flight; results keep
    /// input order.
    pub fn complete_many(&self, requests: &[ChatRequest], max_parallel: usize) -> Vec<Result<Transcript>> {
        par::map_bounded(requests, max_parallel, |r| self.complete(r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new(DEFAULT_MODEL, 0.0, vec![ChatMessage::new(Role::User, text)]).unwrap()
    }

    #[test]
    fn key_depends_on_every_field() {
        let a = req("hi");
        assert_eq!(a.request_key, req("hi").request_key);
        assert_ne!(a.request_key, req("hi ").request_key);
        let t = ChatRequest::new(DEFAULT_MODEL, 0.2, a.messages.clone()).unwrap();
        assert_ne!(a.request_key, t.request_key);
        let m = ChatRequest::new("other", 0.0, a.messages.clone()).unwrap();
        assert_ne!(a.request_key, m.request_key);
        let neg = ChatRequest::new(DEFAULT_MODEL, -0.0, a.messages.clone()).unwrap();
        assert_eq!(a.request_key, neg.request_key);
        assert!(ChatRequest::new(DEFAULT_MODEL, -1.0, a.messages).is_err());
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.jsonl");
        let provider = Arc::new(ScriptedProvider::new("script", |_| "sys: hello".to_string()));
        let store = Arc::new(RecordingStore::open(&path).unwrap());
        let client = LlmClient::new(Mode::Record, store, Some(provider.clone()), RetryPolicy::default()).unwrap();
        let a = client.complete(&req("x")).unwrap();
        let b = client.complete(&req("x")).unwrap();
        assert_eq!(a, b);
        assert_eq!(provider.calls(), 1);

        let replay = LlmClient::new(
            Mode::Replay,
            Arc::new(RecordingStore::open(&path).unwrap()),
            None,
            RetryPolicy::default(),
        )
        .unwrap();
        assert_eq!(replay.complete(&req("x")).unwrap(), a);
        let miss = replay.complete(&req("y")).unwrap_err();
        match miss {
            Error::ReplayMiss { request_key } => assert_eq!(request_key, req("y").request_key),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_credential() {
        let err = OpenAiProvider::from_env(
            "EMPATHIC_TEST_SURELY_UNSET_VAR",
            DEFAULT_ENDPOINT,
            Arc::new(crate::transport::OfflineTransport),
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::MissingCredential { .. }));
    }
}
