//! Experiment runner: executes the configured stages in order under a
//! content-addressed run directory.
//!
//! ```text
//! <run_root>/<id>-<digest>/
//!   manifest.json
//!   data/          train|valid|test.jsonl, samples_<mode>.jsonl, split.json
//!   selection/     index.bin, candidates.jsonl
//!   knowledge/     samples.jsonl, examples.jsonl, causality_train|valid.jsonl
//!   reasoning/     records.jsonl
//!   t5/            epoch-NNN/ checkpoints, latest, metrics.jsonl, steps.jsonl
//!   generation/    records.jsonl, skipped.jsonl
//!   metrics/       reports.json, table.txt, perplexity.json
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use empathic_core::corpus::{self, Conversation, SampleMode, TestSample, Utterance};
use empathic_core::knowledge::InferenceSet;
use empathic_core::model::perplexity;
use empathic_core::prompting::{
    build_fewshot, build_prompt, build_raw_example, parse_reasoned, render, render_dialogue, PromptOptions, UserKnowledge,
    Variant,
};
use empathic_core::selection::RankedCandidates;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{
    embedding_service, knowledge_service, scorers, BackendContext, EmbedderSpec, ExperimentConfig,
    KnowledgeBackendSpec, LlmConfig, Method, Stage,
};
use crate::dataset::{self, PrepareOptions, PreparedPaths};
use crate::embedding::{EmbeddingIndex, EmbeddingService, IndexField};
use crate::knowledge::KnowledgeService;
use crate::error::{Error, Result};
use crate::generator::{self, CausalityStore, GenerateInput, TrainOptions};
use crate::io;
use crate::llm::{messages_for, ChatProvider, ChatRequest, CostReport, LlmClient, Mode, OpenAiProvider, RecordingStore, API_KEY_VAR};
use crate::par;
use crate::records::{sample_id, GenerationRecord, ReasoningRecord};
use crate::scoring::{self, format_reports};
use crate::transport::{HttpTransport, OfflineTransport, RetryPolicy, Transport};

/// Network access and providers; tests inject instrumented ones.
#[derive(Clone)]
pub struct Services {
    pub transport: Arc<dyn Transport>,
    /// Chat provider for live and record modes; built from the environment
    /// when absent.
    pub provider: Option<Arc<dyn ChatProvider>>,
    pub retry: RetryPolicy,
}

impl Services {
    pub fn http() -> Self {
        Self {
            transport: Arc::new(HttpTransport::new(std::time::Duration::from_secs(60))),
            provider: None,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: Stage,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub run_id: String,
    pub method: Method,
    pub mode: Mode,
    pub seed: u64,
    pub deterministic: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nondeterminism: Vec<String>,
    pub config: serde_json::Value,
    pub backends: BTreeMap<String, String>,
    /// sha256 of every input file, keyed by config field.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every output file, keyed by run-relative path.
    pub outputs: BTreeMap<String, String>,
    pub stages: Vec<StageStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_init: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_cost: Option<CostReport>,
    /// Wall-clock stamps; omitted in replay mode so reruns are byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
}

/// User-side knowledge for one test sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleKnowledge {
    pub sample_id: String,
    pub wants: InferenceSet,
    pub reacts: InferenceSet,
}

/// The four inference sets behind one few-shot example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleKnowledge {
    pub conversation_id: String,
    pub user_wants: InferenceSet,
    pub user_reacts: InferenceSet,
    pub sys_intent: InferenceSet,
    pub sys_reacts: InferenceSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub checkpoint_epoch: usize,
    pub samples: usize,
    pub ppl: f64,
}

/// Paths of every artifact inside one run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn data(&self) -> PreparedPaths {
        PreparedPaths::new(self.root.join("data"))
    }
    pub fn index(&self) -> PathBuf {
        self.root.join("selection/index.bin")
    }
    pub fn candidates(&self) -> PathBuf {
        self.root.join("selection/candidates.jsonl")
    }
    pub fn sample_knowledge(&self) -> PathBuf {
        self.root.join("knowledge/samples.jsonl")
    }
    pub fn example_knowledge(&self) -> PathBuf {
        self.root.join("knowledge/examples.jsonl")
    }
    pub fn causality(&self, split: &str) -> PathBuf {
        self.root.join(format!("knowledge/causality_{split}.jsonl"))
    }
    pub fn reasoning(&self) -> PathBuf {
        self.root.join("reasoning/records.jsonl")
    }
    pub fn t5(&self) -> PathBuf {
        self.root.join("t5")
    }
    pub fn generations(&self) -> PathBuf {
        self.root.join("generation/records.jsonl")
    }
    pub fn skipped(&self) -> PathBuf {
        self.root.join("generation/skipped.jsonl")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("metrics/reports.json")
    }
    pub fn table(&self) -> PathBuf {
        self.root.join("metrics/table.txt")
    }
    pub fn perplexity(&self) -> PathBuf {
        self.root.join("metrics/perplexity.json")
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
}

/// Digest over the config snapshot and every input file.
pub fn run_digest(cfg: &ExperimentConfig) -> Result<(String, BTreeMap<String, String>)> {
    let mut inputs = BTreeMap::new();
    for (name, path) in cfg.input_files() {
        inputs.insert(name, io::file_digest(&path)?);
    }
    let blob = serde_json::to_vec(&(cfg.snapshot(), &inputs)).expect("digest input serializes");
    Ok((io::sha256_hex(&blob), inputs))
}

/// Which pair of a training conversation serves as a few-shot example.
pub fn example_pair(conv: &Conversation, mode: SampleMode) -> Option<(Vec<Utterance>, Utterance)> {
    corpus::cut(conv, mode).or_else(|| corpus::cut(conv, SampleMode::SingleTurn))
}

pub fn sorted_samples(path: &Path) -> Result<Vec<TestSample>> {
    let mut samples = dataset::load_samples(path)?;
    samples.sort_by_key(sample_id);
    Ok(samples)
}

fn need_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            what: what.into(),
            path: path.to_path_buf(),
        })
    }
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Ranks the index against each sample's situation (or rendered context,
/// matching the field the index was built on).
pub fn select_examples(
    index: &EmbeddingIndex,
    samples: &[TestSample],
    svc: &EmbeddingService,
    k: usize,
    max_parallel: usize,
) -> Result<Vec<RankedCandidates>> {
    let ranked = par::map_bounded(samples, max_parallel, |s| {
        let text = match index.field {
            IndexField::Situation => s.situation.clone(),
            IndexField::Context => render_dialogue(&s.context),
        };
        index.select(&sample_id(s), &text, svc, k)
    });
    first_error(ranked)
}

pub fn infer_sample_knowledge(
    samples: &[TestSample],
    svc: &KnowledgeService,
    max_parallel: usize,
) -> Result<Vec<SampleKnowledge>> {
    first_error(par::map_bounded(samples, max_parallel, |s| {
        let (wants, reacts) = svc.user_bundle(&s.tail().text)?;
        Ok(SampleKnowledge {
            sample_id: sample_id(s),
            wants,
            reacts,
        })
    }))
}

pub fn infer_example_knowledge(
    train: &[Conversation],
    svc: &KnowledgeService,
    mode: SampleMode,
    max_parallel: usize,
) -> Result<Vec<ExampleKnowledge>> {
    first_error(par::map_bounded(train, max_parallel, |conv| {
        let (ctx, reply) = example_pair(conv, mode).ok_or_else(|| {
            Error::from(empathic_core::Error::Missing {
                what: "(context, reference) pair".into(),
                id: conv.id.clone(),
            })
        })?;
        let (user_wants, user_reacts) = svc.user_bundle(&ctx.last().expect("non-empty").text)?;
        let (sys_intent, sys_reacts) = svc.sys_bundle(&reply.text)?;
        Ok(ExampleKnowledge {
            conversation_id: conv.id.clone(),
            user_wants,
            user_reacts,
            sys_intent,
            sys_reacts,
        })
    }))
}

/// Everything the reasoning prompts are assembled from.
pub struct ReasonInputs<'a> {
    pub samples: &'a [TestSample],
    pub candidates: &'a [RankedCandidates],
    pub train: &'a [Conversation],
    /// Only read for the causality variant.
    pub sample_knowledge: &'a [SampleKnowledge],
    pub example_knowledge: &'a [ExampleKnowledge],
    pub variant: Variant,
    pub sample_mode: SampleMode,
    pub llm: &'a LlmConfig,
}

pub struct PendingPrompt {
    pub sample_id: String,
    pub examples: Vec<String>,
    pub prompt: String,
    pub request: ChatRequest,
}

fn missing(what: &str, id: &str) -> Error {
    empathic_core::Error::Missing {
        what: what.into(),
        id: id.into(),
    }
    .into()
}

pub fn build_reasoning_prompts(inp: &ReasonInputs<'_>) -> Result<Vec<PendingPrompt>> {
    let candidates: HashMap<&str, &RankedCandidates> =
        inp.candidates.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let train: HashMap<&str, &Conversation> = inp.train.iter().map(|c| (c.id.as_str(), c)).collect();
    let sample_k: HashMap<&str, &SampleKnowledge> =
        inp.sample_knowledge.iter().map(|k| (k.sample_id.as_str(), k)).collect();
    let example_k: HashMap<&str, &ExampleKnowledge> = inp
        .example_knowledge
        .iter()
        .map(|k| (k.conversation_id.as_str(), k))
        .collect();
    let mut out = Vec::with_capacity(inp.samples.len());
    for s in inp.samples {
        let id = sample_id(s);
        let ranked = candidates
            .get(id.as_str())
            .ok_or_else(|| missing("selected examples", &id))?;
        let mut shots = Vec::with_capacity(ranked.entries.len());
        for c in &ranked.entries {
            let conv = train
                .get(c.conversation_id.as_str())
                .ok_or_else(|| missing("training conversation", &c.conversation_id))?;
            let pair = example_pair(conv, inp.sample_mode);
            let (ctx, reply) = match &pair {
                Some((c, r)) => (c.as_slice(), Some(r)),
                None => (conv.utterances.as_slice(), None),
            };
            shots.push(match inp.variant {
                Variant::Causality => {
                    let k = example_k
                        .get(conv.id.as_str())
                        .ok_or_else(|| missing("few-shot example knowledge", &conv.id))?;
                    build_fewshot(
                        &conv.id,
                        ctx,
                        reply,
                        [&k.user_wants, &k.user_reacts],
                        [&k.sys_intent, &k.sys_reacts],
                    )?
                }
                Variant::Baseline => build_raw_example(&conv.id, ctx, reply)?,
            });
        }
        let user_k = match inp.variant {
            Variant::Causality => {
                let k = sample_k
                    .get(id.as_str())
                    .ok_or_else(|| missing("test-sample knowledge", &id))?;
                Some(UserKnowledge::from_sets([&k.wants, &k.reacts])?)
            }
            Variant::Baseline => None,
        };
        let examples: Vec<String> = shots.iter().map(|e| e.conversation_id.clone()).collect();
        let bundle = build_prompt(
            inp.variant.default_intro(),
            shots,
            &s.context,
            user_k,
            inp.variant,
            PromptOptions::with_k(ranked.entries.len()),
        )?;
        let request = ChatRequest::new(&inp.llm.model, inp.llm.temperature, messages_for(&bundle, inp.llm.layout))?;
        out.push(PendingPrompt {
            sample_id: id,
            examples,
            prompt: render(&bundle),
            request,
        });
    }
    Ok(out)
}

/// Builds the chat client for `mode`. Replay needs the recordings file;
/// record appends to it; live keeps transcripts in memory only.
pub fn llm_client(mode: Mode, llm: &LlmConfig, recordings: &Path, services: &Services) -> Result<LlmClient> {
    let store = match mode {
        Mode::Replay => {
            need_file(recordings, "LLM recordings")?;
            RecordingStore::open(recordings)?
        }
        Mode::Record => RecordingStore::open(recordings)?,
        Mode::Live => RecordingStore::in_memory(),
    };
    let provider = match (&services.provider, mode) {
        (Some(p), _) => Some(p.clone()),
        (None, Mode::Replay) => None,
        (None, _) => Some(Arc::new(OpenAiProvider::from_env(
            API_KEY_VAR,
            &llm.endpoint,
            services.transport.clone(),
        )?) as Arc<dyn ChatProvider>),
    };
    LlmClient::new(mode, Arc::new(store), provider, services.retry)
}

/// Sends every prompt and parses the replies. Records for the successful
/// calls are returned even when some calls fail; the first failure is
/// returned alongside.
pub fn complete_reasoning(
    prompts: Vec<PendingPrompt>,
    client: &LlmClient,
    max_parallel: usize,
) -> (Vec<ReasoningRecord>, Option<Error>) {
    let requests: Vec<ChatRequest> = prompts.iter().map(|p| p.request.clone()).collect();
    let results = client.complete_many(&requests, max_parallel);
    let mut records = Vec::with_capacity(results.len());
    let mut failure = None;
    for (p, res) in prompts.into_iter().zip(results) {
        match res {
            Ok(t) => {
                let (parsed, parse_error) = match parse_reasoned(&t.reply) {
                    Ok(x) => (Some(x), None),
                    Err(e) => {
                        log::warn!("sample {}: reply did not parse: {e}", p.sample_id);
                        (None, Some(e.to_string()))
                    }
                };
                records.push(ReasoningRecord {
                    sample_id: p.sample_id,
                    examples: p.examples,
                    request_key: p.request.request_key,
                    prompt: p.prompt,
                    raw_reply: t.reply,
                    parsed,
                    parse_error,
                });
            }
            Err(e) => {
                log::error!("sample {}: {e}", p.sample_id);
                failure.get_or_insert(e);
            }
        }
    }
    (records, failure)
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    layout: RunLayout,
    backends: BackendContext,
    services: &'a Services,
    backend_ids: BTreeMap<String, String>,
    optimizer: Option<String>,
    model_init: Option<String>,
    llm_cost: Option<CostReport>,
}

impl Runner<'_> {
    fn samples_path(&self) -> PathBuf {
        self.layout.data().samples(self.cfg.data.sample_mode)
    }

    fn train_convs(&self) -> Result<Vec<Conversation>> {
        let p = self.layout.data().split("train");
        need_file(&p, "training split")?;
        io::read_jsonl(&p)
    }

    fn prepare(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let inventory = dataset::load_inventory(&cfg.resolve(&cfg.data.emotions))?;
        let opts = PrepareOptions {
            ratios: cfg.ratios()?,
            seed: cfg.seed,
            sample_count: cfg.data.samples,
        };
        dataset::prepare_data(&cfg.resolve(&cfg.data.corpus), &inventory, &opts, &self.layout.data().root)?;
        Ok(())
    }

    fn index(&mut self) -> Result<()> {
        let svc = embedding_service(self.cfg, &self.backends)?;
        self.backend_ids.insert("embedding".into(), svc.backend().backend_id().to_string());
        let index = EmbeddingIndex::build(&self.train_convs()?, &svc, self.cfg.embedding.field)?;
        index.save(&self.layout.index())
    }

    fn select(&mut self) -> Result<()> {
        let svc = embedding_service(self.cfg, &self.backends)?;
        self.backend_ids.insert("embedding".into(), svc.backend().backend_id().to_string());
        need_file(&self.layout.index(), "embedding index")?;
        let index = EmbeddingIndex::load(&self.layout.index())?;
        let samples = sorted_samples(&self.samples_path())?;
        let ranked = select_examples(&index, &samples, &svc, self.cfg.k, self.cfg.max_parallel)?;
        io::write_jsonl(&self.layout.candidates(), &ranked)
    }

    fn knowledge(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let svc = knowledge_service(cfg, &self.backends)?;
        self.backend_ids.insert("knowledge".into(), svc.backend().backend_id().to_string());
        let samples = sorted_samples(&self.samples_path())?;
        let uses_user = match cfg.method {
            Method::ChatgptCausality => true,
            Method::ChatgptBaseline => false,
            Method::T5 => cfg.t5_variant().is_some_and(|v| v.uses_user() || v.uses_sys()),
        };
        if uses_user {
            let out = infer_sample_knowledge(&samples, &svc, cfg.max_parallel)?;
            io::write_jsonl(&self.layout.sample_knowledge(), &out)?;
        }
        let cand_path = self.layout.candidates();
        if cfg.prompt_variant() == Variant::Causality && cand_path.is_file() && cfg.stages.contains(&Stage::Reason) {
            let candidates: Vec<RankedCandidates> = io::read_jsonl(&cand_path)?;
            let wanted: BTreeSet<&str> = candidates
                .iter()
                .flat_map(|r| r.entries.iter().map(|c| c.conversation_id.as_str()))
                .collect();
            let train: Vec<Conversation> = self
                .train_convs()?
                .into_iter()
                .filter(|c| wanted.contains(c.id.as_str()))
                .collect();
            let out = infer_example_knowledge(&train, &svc, cfg.data.sample_mode, cfg.max_parallel)?;
            io::write_jsonl(&self.layout.example_knowledge(), &out)?;
        }
        if cfg.method == Method::T5 && cfg.stages.contains(&Stage::Train) {
            let policy = cfg.t5.as_ref().expect("validated").pair_policy;
            for split in ["train", "valid"] {
                let p = self.layout.data().split(split);
                need_file(&p, "data split")?;
                let convs: Vec<Conversation> = io::read_jsonl(&p)?;
                let store = generator::build_causality_store(&convs, &svc, policy, cfg.max_parallel)?;
                store.save(&self.layout.causality(split))?;
            }
        }
        Ok(())
    }

    fn reason(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let llm = cfg.llm.as_ref().expect("validated");
        self.backend_ids.insert("llm".into(), llm.model.clone());
        let variant = cfg.prompt_variant();
        let samples = sorted_samples(&self.samples_path())?;
        need_file(&self.layout.candidates(), "selected examples")?;
        let candidates: Vec<RankedCandidates> = io::read_jsonl(&self.layout.candidates())?;
        let train = self.train_convs()?;
        let (sample_k, example_k) = if variant == Variant::Causality {
            need_file(&self.layout.sample_knowledge(), "test-sample knowledge")?;
            need_file(&self.layout.example_knowledge(), "few-shot example knowledge")?;
            (
                io::read_jsonl(&self.layout.sample_knowledge())?,
                io::read_jsonl(&self.layout.example_knowledge())?,
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let prompts = build_reasoning_prompts(&ReasonInputs {
            samples: &samples,
            candidates: &candidates,
            train: &train,
            sample_knowledge: &sample_k,
            example_knowledge: &example_k,
            variant,
            sample_mode: cfg.data.sample_mode,
            llm,
        })?;
        let client = llm_client(cfg.mode, llm, &cfg.resolve(&llm.recordings), self.services)?;
        let (records, failure) = complete_reasoning(prompts, &client, cfg.max_parallel);
        self.llm_cost = Some(client.cost());
        io::write_jsonl(&self.layout.reasoning(), &records)?;
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn train(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let t5 = cfg.t5.as_ref().expect("validated");
        let inventory = dataset::load_inventory(&cfg.resolve(&cfg.data.emotions))?;
        let train = self.train_convs()?;
        let valid: Vec<Conversation> = io::read_jsonl(&self.layout.data().split("valid"))?;
        let variant = t5.model.variant;
        let load_store = |split: &str| -> Result<CausalityStore> {
            let p = self.layout.causality(split);
            if variant.uses_user() || variant.uses_sys() {
                need_file(&p, "causality texts")?;
                CausalityStore::load(&p)
            } else {
                Ok(CausalityStore::default())
            }
        };
        let (train_store, valid_store) = (load_store("train")?, load_store("valid")?);
        let vocab = generator::build_vocab(&train, &train_store, t5.max_vocab);
        let train_ex = generator::build_examples(&train, &train_store, &vocab, &inventory, variant, t5.pair_policy)?;
        let valid_ex = generator::build_examples(&valid, &valid_store, &vocab, &inventory, variant, t5.pair_policy)?;
        let mut model = t5.model.clone();
        model.emotion_count = inventory.len();
        model.seed = cfg.seed;
        let opts = TrainOptions {
            config: model,
            max_steps: t5.max_steps,
            warm_start: t5.warm_start.as_ref().map(|p| cfg.resolve(p)),
            out_dir: self.layout.t5(),
        };
        generator::train_t5(&train_ex, &valid_ex, &vocab, &opts)?;
        Ok(())
    }

    fn checkpoint_dir(&self) -> PathBuf {
        match self.cfg.t5.as_ref().and_then(|t| t.checkpoint.as_ref()) {
            Some(p) => self.cfg.resolve(p),
            None => self.layout.t5(),
        }
    }

    fn generate(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let samples = sorted_samples(&self.samples_path())?;
        let method = cfg.method.as_str();
        let (records, skipped) = match cfg.method {
            Method::ChatgptCausality | Method::ChatgptBaseline => {
                need_file(&self.layout.reasoning(), "reasoning records")?;
                let reasoned: HashMap<String, ReasoningRecord> = io::read_jsonl::<ReasoningRecord>(&self.layout.reasoning())?
                    .into_iter()
                    .map(|r| (r.sample_id.clone(), r))
                    .collect();
                let mut out = Vec::new();
                let mut skipped = Vec::new();
                for s in &samples {
                    let id = sample_id(s);
                    match reasoned.get(&id).and_then(|r| r.parsed.clone()) {
                        Some(p) => out.push(GenerationRecord::new(s, method, p.response.clone(), Some(p))),
                        None => skipped.push(id),
                    }
                }
                (out, skipped)
            }
            Method::T5 => {
                let t5 = cfg.t5.as_ref().expect("validated");
                let ck = checkpoint::load(&self.checkpoint_dir())?;
                self.optimizer = Some(ck.meta.optimizer.clone());
                self.model_init = Some(ck.meta.init.clone());
                let variant = ck.model.config.variant;
                let sample_k: HashMap<String, SampleKnowledge> = if variant.uses_user() {
                    need_file(&self.layout.sample_knowledge(), "test-sample knowledge")?;
                    io::read_jsonl::<SampleKnowledge>(&self.layout.sample_knowledge())?
                        .into_iter()
                        .map(|r| (r.sample_id.clone(), r))
                        .collect()
                } else {
                    HashMap::new()
                };
                let reasoned: HashMap<String, ReasoningRecord> = if variant.uses_sys() {
                    need_file(&self.layout.reasoning(), "reasoning records")?;
                    io::read_jsonl::<ReasoningRecord>(&self.layout.reasoning())?
                        .into_iter()
                        .map(|r| (r.sample_id.clone(), r))
                        .collect()
                } else {
                    HashMap::new()
                };
                let mut inputs = Vec::new();
                let mut skipped = Vec::new();
                for s in &samples {
                    let id = sample_id(s);
                    let (user_text, sys_text) = generator::causality_texts(
                        sample_k.get(&id).map(|k| [&k.wants, &k.reacts]),
                        reasoned.get(&id).and_then(|r| r.parsed.as_ref()),
                    );
                    if variant.uses_sys() && sys_text.is_none() {
                        skipped.push(id);
                        continue;
                    }
                    inputs.push(GenerateInput {
                        sample: s,
                        user_text,
                        sys_text,
                    });
                }
                let decode = t5.decode.clone().unwrap_or_else(|| ck.model.config.decode.clone());
                let out = generator::generate_responses(
                    &ck.model,
                    &ck.vocab,
                    &inputs,
                    &decode,
                    cfg.seed,
                    method,
                    cfg.max_parallel,
                )?;
                (out, skipped)
            }
        };
        if !skipped.is_empty() {
            log::warn!("{} sample(s) had no usable reasoned output and were skipped", skipped.len());
        }
        io::write_jsonl(&self.layout.skipped(), &skipped)?;
        io::write_jsonl(&self.layout.generations(), &records)
    }

    fn evaluate(&mut self) -> Result<()> {
        let cfg = self.cfg;
        need_file(&self.layout.generations(), "generation records")?;
        let gens: Vec<GenerationRecord> = io::read_jsonl(&self.layout.generations())?;
        let pairs: Vec<_> = gens.iter().map(GenerationRecord::to_scored_pair).collect();
        let sc = scorers(cfg, &self.backends)?;
        if let Some(b) = &sc.bert {
            self.backend_ids.insert("bertscore".into(), b.backend_id().to_string());
        }
        if let Some(e) = &sc.emotion {
            self.backend_ids.insert("emotion_rater".into(), e.backend_id().to_string());
        }
        if let Some(e) = &sc.epitome {
            self.backend_ids.insert("epitome".into(), e[0].backend_id().to_string());
        }
        let reports = scoring::evaluate(&pairs, &cfg.evaluate.metrics, &sc)?;
        io::write_json(&self.layout.reports(), &reports)?;
        io::atomic_write(&self.layout.table(), format_reports(&reports).as_bytes())?;
        if cfg.method == Method::T5 {
            let ck = checkpoint::load(&self.checkpoint_dir())?;
            let inventory = dataset::load_inventory(&cfg.resolve(&cfg.data.emotions))?;
            let samples = sorted_samples(&self.samples_path())?;
            let examples: Vec<_> = samples
                .iter()
                .map(|s| {
                    Ok(empathic_core::model::TrainExample {
                        id: sample_id(s),
                        input: generator::encode_input(
                            &ck.vocab,
                            empathic_core::model::ModelVariant::Base,
                            &sample_id(s),
                            &s.context,
                            None,
                            None,
                        )?,
                        response: ck.vocab.encode(&s.reference.text),
                        emotion: inventory.index_of(&s.emotion_label).unwrap_or(0),
                    })
                })
                .collect::<Result<_>>()?;
            let gen_ids: BTreeSet<&str> = gens.iter().map(|g| g.sample_id.as_str()).collect();
            let examples = self.with_causality(examples, &gen_ids, &ck)?;
            let ppl = perplexity(&ck.model, &examples)?;
            io::write_json(
                &self.layout.perplexity(),
                &Perplexity {
                    checkpoint_epoch: ck.meta.epoch,
                    samples: examples.len(),
                    ppl,
                },
            )?;
        }
        Ok(())
    }

    /// Re-encodes perplexity inputs with the causality texts the generate
    /// stage used; samples it skipped are dropped.
    fn with_causality(
        &self,
        examples: Vec<empathic_core::model::TrainExample>,
        keep: &BTreeSet<&str>,
        ck: &checkpoint::Checkpoint,
    ) -> Result<Vec<empathic_core::model::TrainExample>> {
        let variant = ck.model.config.variant;
        if !variant.uses_user() && !variant.uses_sys() {
            return Ok(examples);
        }
        let samples: HashMap<String, TestSample> = sorted_samples(&self.samples_path())?
            .into_iter()
            .map(|s| (sample_id(&s), s))
            .collect();
        let sample_k: HashMap<String, SampleKnowledge> = io::read_jsonl::<SampleKnowledge>(&self.layout.sample_knowledge())?
            .into_iter()
            .map(|r| (r.sample_id.clone(), r))
            .collect();
        let reasoned: HashMap<String, ReasoningRecord> = if variant.uses_sys() {
            io::read_jsonl::<ReasoningRecord>(&self.layout.reasoning())?
                .into_iter()
                .map(|r| (r.sample_id.clone(), r))
                .collect()
        } else {
            HashMap::new()
        };
        let mut out = Vec::new();
        for mut ex in examples.into_iter().filter(|e| keep.contains(e.id.as_str())) {
            let s = &samples[&ex.id];
            let (user, sys) = generator::causality_texts(
                sample_k.get(&ex.id).map(|k| [&k.wants, &k.reacts]),
                reasoned.get(&ex.id).and_then(|r| r.parsed.as_ref()),
            );
            ex.input = generator::encode_input(&ck.vocab, variant, &ex.id, &s.context, user.as_deref(), sys.as_deref())?;
            out.push(ex);
        }
        Ok(out)
    }
}

fn walk_outputs(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            walk_outputs(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != "manifest.json") {
            let rel = p.strip_prefix(root).expect("under root");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.insert(key, io::file_digest(&p)?);
        }
    }
    Ok(())
}

/// Network access for the configured backends. Replay mode is offline:
/// model-server backends must be served from their cache.
pub fn backend_context(cfg: &ExperimentConfig, services: &Services) -> Result<BackendContext> {
    if cfg.mode != Mode::Replay {
        return Ok(BackendContext {
            transport: services.transport.clone(),
            retry: services.retry,
        });
    }
    let networked = matches!(cfg.knowledge.backend, KnowledgeBackendSpec::ModelServer { .. })
        && cfg.knowledge.cache.is_none()
        || matches!(cfg.embedding.backend, EmbedderSpec::ModelServer { .. }) && cfg.embedding.cache.is_none();
    if networked {
        return Err(Error::Config(
            "replay mode runs offline: model-server backends need a cache directory to serve from".into(),
        ));
    }
    Ok(BackendContext {
        transport: Arc::new(OfflineTransport),
        retry: services.retry,
    })
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Runs every configured stage. A failing stage stops the run with its name
/// in the error; outputs of earlier stages and the manifest stay on disk.
pub fn run_experiment(cfg: &ExperimentConfig, services: &Services, run_root: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let (digest, inputs) = run_digest(cfg)?;
    let run_id = format!("{}-{}", cfg.id, &digest[..12]);
    let root = run_root.map(Path::to_path_buf).unwrap_or_else(|| cfg.resolve(&cfg.run_root));
    let run_dir = root.join(&run_id);
    io::ensure_dir(&run_dir)?;
    let started_at = (cfg.mode != Mode::Replay).then(now);

    let backends = backend_context(cfg, services)?;
    let mut runner = Runner {
        cfg,
        layout: RunLayout::new(&run_dir),
        backends,
        services,
        backend_ids: BTreeMap::new(),
        optimizer: None,
        model_init: None,
        llm_cost: None,
    };

    let mut statuses = Vec::new();
    let mut failure = None;
    for &stage in &cfg.stages {
        if failure.is_some() {
            statuses.push(StageStatus {
                stage,
                status: "not_run".into(),
                error: None,
            });
            continue;
        }
        log::info!("stage {}", stage.as_str());
        let res = match stage {
            Stage::Prepare => runner.prepare(),
            Stage::Index => runner.index(),
            Stage::Select => runner.select(),
            Stage::Knowledge => runner.knowledge(),
            Stage::Reason => runner.reason(),
            Stage::Train => runner.train(),
            Stage::Generate => runner.generate(),
            Stage::Evaluate => runner.evaluate(),
        };
        match res {
            Ok(()) => statuses.push(StageStatus {
                stage,
                status: "ok".into(),
                error: None,
            }),
            Err(e) => {
                statuses.push(StageStatus {
                    stage,
                    status: "failed".into(),
                    error: Some(e.to_string()),
                });
                failure = Some(Error::stage(stage.as_str(), e));
            }
        }
    }

    if cfg.method == Method::T5 && runner.optimizer.is_none() {
        let meta_dir = runner.checkpoint_dir();
        if let Ok(ck) = checkpoint::load(&meta_dir) {
            runner.optimizer = Some(ck.meta.optimizer);
            runner.model_init = Some(ck.meta.init);
        }
    }
    let mut nondeterminism = Vec::new();
    if cfg.mode == Mode::Live {
        nondeterminism.push("live mode: LLM replies are not recorded".to_string());
    }
    if let Some(llm) = &cfg.llm {
        if llm.temperature > 0.0 && cfg.stages.contains(&Stage::Reason) {
            nondeterminism.push(format!("llm temperature {} > 0", llm.temperature));
        }
    }
    let mut outputs = BTreeMap::new();
    walk_outputs(&run_dir, &run_dir, &mut outputs)?;
    let manifest = RunManifest {
        experiment_id: cfg.id.clone(),
        run_id,
        method: cfg.method,
        mode: cfg.mode,
        seed: cfg.seed,
        deterministic: nondeterminism.is_empty(),
        nondeterminism,
        config: cfg.snapshot(),
        backends: runner.backend_ids,
        inputs,
        outputs,
        stages: statuses,
        optimizer: runner.optimizer,
        model_init: runner.model_init,
        llm_cost: runner.llm_cost,
        started_at,
        finished_at: (cfg.mode != Mode::Replay).then(now),
    };
    io::write_json(&runner.layout.manifest(), &manifest)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(RunOutcome { run_dir, manifest }),
    }
}
