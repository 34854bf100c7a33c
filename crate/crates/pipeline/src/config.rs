//! Declarative experiment configuration (TOML) and backend construction.
//!
//! Relative paths are resolved against the directory holding the config
//! file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use empathic_core::corpus::{self, SampleMode};
use empathic_core::knowledge::{DecodeParams, DEFAULT_MAX_PHRASES};
use empathic_core::model::{DecodeConfig, ModelConfig, ModelVariant};
use empathic_core::prompting::Variant;
use serde::{Deserialize, Serialize};

use crate::cache::DiskCache;
use crate::embedding::{Embedder, EmbeddingService, FixtureEmbedder, HashingEmbedder, IndexField, ModelServerEmbedder};
use crate::error::{Error, Result};
use crate::generator::PairPolicy;
use crate::io;
use crate::knowledge::{FixtureKnowledge, KnowledgeBackend, KnowledgeService, ModelServerKnowledge};
use crate::llm::{MessageLayout, Mode, DEFAULT_ENDPOINT, DEFAULT_MODEL};
use crate::scoring::{
    load_epitome_fixture, BertScorer, FixtureEmotionRater, HashingTokenEmbedder, MechanismRater, MetricFamily,
    ModelServerEmotionRater, ModelServerMechanismRater, ModelServerTokenEmbedder, Scorers,
};
use crate::transport::{RetryPolicy, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Few-shot causality prompt; the response is the reply's `sys:` field.
    ChatgptCausality,
    /// Few-shot raw examples, no knowledge.
    ChatgptBaseline,
    /// The trained three-encoder generator.
    T5,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::ChatgptCausality => "chatgpt_causality",
            Method::ChatgptBaseline => "chatgpt_baseline",
            Method::T5 => "t5",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prepare,
    Index,
    Select,
    Knowledge,
    Reason,
    Train,
    Generate,
    Evaluate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Index => "index",
            Stage::Select => "select",
            Stage::Knowledge => "knowledge",
            Stage::Reason => "reason",
            Stage::Train => "train",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: PathBuf,
    pub emotions: PathBuf,
    #[serde(default = "default_ratios")]
    pub ratios: String,
    #[serde(default = "default_sample_mode")]
    pub sample_mode: SampleMode,
    /// Subsample the test samples to this many (seeded).
    pub samples: Option<usize>,
}

fn default_ratios() -> String {
    "8:1:1".into()
}

fn default_sample_mode() -> SampleMode {
    SampleMode::SingleTurn
}

/// Where commonsense inferences come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KnowledgeBackendSpec {
    Fixture {
        path: PathBuf,
    },
    ModelServer {
        id: String,
        endpoint: String,
        #[serde(default)]
        decode_params: DecodeParams,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeConfig {
    pub backend: KnowledgeBackendSpec,
    #[serde(default = "default_max_phrases")]
    pub max_phrases: usize,
    pub cache: Option<PathBuf>,
}

fn default_max_phrases() -> usize {
    DEFAULT_MAX_PHRASES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderSpec {
    Hashing { dim: usize },
    Fixture { path: PathBuf },
    ModelServer { id: String, endpoint: String, dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub backend: EmbedderSpec,
    #[serde(default)]
    pub field: IndexField,
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub layout: MessageLayout,
    pub recordings: PathBuf,
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
}

fn default_model() -> String {
    DEFAULT_MODEL.into()
}

fn default_endpoint() -> String {
    DEFAULT_ENDPOINT.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct T5Config {
    #[serde(default)]
    pub model: ModelConfig,
    /// Use this checkpoint instead of the run's own training output.
    pub checkpoint: Option<PathBuf>,
    pub warm_start: Option<PathBuf>,
    #[serde(default)]
    pub pair_policy: PairPolicy,
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
    pub max_steps: Option<usize>,
    /// Decoding for the generate stage; defaults to the model config's.
    pub decode: Option<DecodeConfig>,
}

fn default_max_vocab() -> usize {
    32_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerSpec {
    Fixture { id: String, path: PathBuf },
    ModelServer { id: String, endpoint: String },
    /// Hashed token embeddings (BERTScore only).
    Hashing { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricFamily>,
    pub bertscore: Option<ScorerSpec>,
    pub emotion: Option<ScorerSpec>,
    /// One fixture for all three mechanisms, or a server per mechanism
    /// reached at `<endpoint>/<ip|ex|er>`.
    pub epitome: Option<ScorerSpec>,
}

fn default_metrics() -> Vec<MetricFamily> {
    vec![MetricFamily::F1, MetricFamily::Bleu, MetricFamily::Distinct]
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            metrics: default_metrics(),
            bertscore: None,
            emotion: None,
            epitome: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub method: Method,
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_run_root")]
    pub run_root: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    pub data: DataConfig,
    pub knowledge: KnowledgeConfig,
    pub embedding: EmbeddingConfig,
    pub llm: Option<LlmConfig>,
    pub t5: Option<T5Config>,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    /// Directory the config was loaded from; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_mode() -> Mode {
    Mode::Replay
}

fn default_parallel() -> usize {
    4
}

fn default_run_root() -> PathBuf {
    "runs".into()
}

fn default_k() -> usize {
    2
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.base_dir = base_dir.to_path_buf();
        if cfg.stages.is_empty() {
            cfg.stages = cfg.default_stages();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&io::read_string(path)?, &base)
    }

    pub fn default_stages(&self) -> Vec<Stage> {
        use Stage::*;
        match self.method {
            Method::ChatgptCausality | Method::ChatgptBaseline => {
                vec![Prepare, Index, Select, Knowledge, Reason, Generate, Evaluate]
            }
            Method::T5 => {
                let mut s = vec![Prepare, Knowledge];
                if self.t5.as_ref().is_some_and(|t| t.model.variant.uses_sys()) {
                    s = vec![Prepare, Index, Select, Knowledge, Reason];
                }
                if self.t5.as_ref().is_some_and(|t| t.checkpoint.is_none()) {
                    s.push(Train);
                }
                s.extend([Generate, Evaluate]);
                s
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::Config(format!(
                "experiment id {:?} must be non-empty ASCII letters, digits, '-' or '_'",
                self.id
            )));
        }
        corpus::parse_ratios(&self.data.ratios)?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.max_parallel == 0 {
            return Err(Error::Config("max_parallel must be at least 1".into()));
        }
        let mut sorted = self.stages.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.stages {
            return Err(Error::Config(
                "stages must be listed once each, in pipeline order (prepare, index, select, knowledge, reason, train, generate, evaluate)".into(),
            ));
        }
        let needs_llm = self.stages.contains(&Stage::Reason);
        if needs_llm && self.llm.is_none() {
            return Err(Error::Config("the reason stage needs an [llm] table".into()));
        }
        if let Some(llm) = &self.llm {
            if llm.temperature.is_nan() || llm.temperature < 0.0 {
                return Err(Error::Config("llm.temperature must be >= 0".into()));
            }
        }
        if self.method == Method::T5 && self.t5.is_none() {
            return Err(Error::Config("method t5 needs a [t5] table".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn ratios(&self) -> Result<[f64; 3]> {
        Ok(corpus::parse_ratios(&self.data.ratios)?)
    }

    /// Prompt variant used by the reason stage.
    pub fn prompt_variant(&self) -> Variant {
        match self.method {
            Method::ChatgptBaseline => Variant::Baseline,
            Method::ChatgptCausality | Method::T5 => Variant::Causality,
        }
    }

    pub fn t5_variant(&self) -> Option<ModelVariant> {
        self.t5.as_ref().map(|t| t.model.variant)
    }

    /// Canonical JSON of the config; stable across runs.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Files the run reads, keyed by their config-relative path.
    pub fn input_files(&self) -> Vec<(String, PathBuf)> {
        let mut out: Vec<(String, PathBuf)> = vec![
            ("data.corpus".into(), self.data.corpus.clone()),
            ("data.emotions".into(), self.data.emotions.clone()),
        ];
        if let KnowledgeBackendSpec::Fixture { path } = &self.knowledge.backend {
            out.push(("knowledge.fixture".into(), path.clone()));
        }
        if let EmbedderSpec::Fixture { path } = &self.embedding.backend {
            out.push(("embedding.fixture".into(), path.clone()));
        }
        if let Some(llm) = &self.llm {
            if self.mode == Mode::Replay {
                out.push(("llm.recordings".into(), llm.recordings.clone()));
            }
        }
        for (name, spec) in [
            ("evaluate.bertscore", &self.evaluate.bertscore),
            ("evaluate.emotion", &self.evaluate.emotion),
            ("evaluate.epitome", &self.evaluate.epitome),
        ] {
            if let Some(ScorerSpec::Fixture { path, .. }) = spec {
                out.push((name.into(), path.clone()));
            }
        }
        out.into_iter().map(|(k, p)| (k, self.resolve(&p))).collect()
    }
}

/// Network access handed to every backend.
#[derive(Clone)]
pub struct BackendContext {
    pub transport: Arc<dyn Transport>,
    pub retry: RetryPolicy,
}

pub fn knowledge_service(cfg: &ExperimentConfig, ctx: &BackendContext) -> Result<KnowledgeService> {
    let backend: Arc<dyn KnowledgeBackend> = match &cfg.knowledge.backend {
        KnowledgeBackendSpec::Fixture { path } => Arc::new(FixtureKnowledge::load(&cfg.resolve(path))?),
        KnowledgeBackendSpec::ModelServer {
            id,
            endpoint,
            decode_params,
        } => Arc::new(ModelServerKnowledge::new(
            id,
            endpoint,
            decode_params.clone(),
            ctx.transport.clone(),
            ctx.retry,
        )),
    };
    let cache = cfg.knowledge.cache.as_ref().map(|p| DiskCache::new(cfg.resolve(p)));
    Ok(KnowledgeService::new(backend, cache, cfg.knowledge.max_phrases).with_max_parallel(cfg.max_parallel))
}

pub fn embedding_service(cfg: &ExperimentConfig, ctx: &BackendContext) -> Result<EmbeddingService> {
    let backend: Arc<dyn Embedder> = match &cfg.embedding.backend {
        EmbedderSpec::Hashing { dim } => {
            if *dim < 2 {
                return Err(Error::Config("hashing embedder needs dim >= 2".into()));
            }
            Arc::new(HashingEmbedder::new(*dim))
        }
        EmbedderSpec::Fixture { path } => Arc::new(FixtureEmbedder::load(&cfg.resolve(path))?),
        EmbedderSpec::ModelServer { id, endpoint, dim } => Arc::new(ModelServerEmbedder::new(
            id,
            *dim,
            endpoint,
            ctx.transport.clone(),
            ctx.retry,
        )),
    };
    let cache = cfg.embedding.cache.as_ref().map(|p| DiskCache::new(cfg.resolve(p)));
    Ok(EmbeddingService::new(backend, cache).with_max_parallel(cfg.max_parallel))
}

pub fn scorers(cfg: &ExperimentConfig, ctx: &BackendContext) -> Result<Scorers> {
    let e = &cfg.evaluate;
    let bert = match &e.bertscore {
        None => None,
        Some(ScorerSpec::Fixture { id, path }) => Some(BertScorer::load_fixture(id, &cfg.resolve(path))?),
        Some(ScorerSpec::ModelServer { id, endpoint }) => Some(BertScorer::Embedding(Arc::new(
            ModelServerTokenEmbedder::new(id, endpoint, ctx.transport.clone(), ctx.retry),
        ))),
        Some(ScorerSpec::Hashing { dim }) => Some(BertScorer::Embedding(Arc::new(HashingTokenEmbedder::new(*dim)))),
    };
    let emotion: Option<Arc<dyn crate::scoring::EmotionRater>> = match &e.emotion {
        None => None,
        Some(ScorerSpec::Fixture { id, path }) => Some(Arc::new(FixtureEmotionRater::load(id, &cfg.resolve(path))?)),
        Some(ScorerSpec::ModelServer { id, endpoint }) => Some(Arc::new(ModelServerEmotionRater::new(
            id,
            endpoint,
            ctx.transport.clone(),
            ctx.retry,
        ))),
        Some(ScorerSpec::Hashing { .. }) => {
            return Err(Error::Config("the emotion rater has no hashing backend".into()));
        }
    };
    let epitome = match &e.epitome {
        None => None,
        Some(ScorerSpec::Fixture { id, path }) => Some(load_epitome_fixture(id, &cfg.resolve(path))?),
        Some(ScorerSpec::ModelServer { id, endpoint }) => {
            let base = endpoint.trim_end_matches('/');
            Some(["ip", "ex", "er"].map(|m| {
                Arc::new(ModelServerMechanismRater::new(
                    &format!("{id}-{m}"),
                    &format!("{base}/{m}"),
                    ctx.transport.clone(),
                    ctx.retry,
                )) as Arc<dyn MechanismRater>
            }))
        }
        Some(ScorerSpec::Hashing { .. }) => {
            return Err(Error::Config("EPITOME raters have no hashing backend".into()));
        }
    };
    Ok(Scorers {
        bert,
        emotion,
        epitome,
        max_parallel: cfg.max_parallel,
        ..Scorers::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
id = "demo"
method = "chatgpt_causality"
[data]
corpus = "c.jsonl"
emotions = "e.txt"
[knowledge]
backend = { kind = "fixture", path = "k.jsonl" }
[embedding]
backend = { kind = "hashing", dim = 64 }
[llm]
recordings = "r.jsonl"
"#;

    #[test]
    fn defaults_and_stage_order() {
        let cfg = ExperimentConfig::from_toml(MIN, Path::new("/x")).unwrap();
        assert_eq!(cfg.mode, Mode::Replay);
        assert_eq!(cfg.k, 2);
        assert_eq!(cfg.stages.first(), Some(&Stage::Prepare));
        assert_eq!(cfg.resolve(Path::new("c.jsonl")), PathBuf::from("/x/c.jsonl"));
        let bad = MIN.replace("method", "stages = [\"reason\", \"prepare\"]\nmethod");
        assert!(ExperimentConfig::from_toml(&bad, Path::new("/x")).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = MIN.replace("[llm]", "[llm]\ntemprature = 0.5");
        assert!(ExperimentConfig::from_toml(&bad, Path::new("/x")).is_err());
    }
}
