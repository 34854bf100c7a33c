//! Training and inference glue for the three-encoder generator: causality
//! store, example construction, checkpointed training, and decoding.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use empathic_core::knowledge::InferenceSet;
use empathic_core::corpus::{Conversation, EmotionInventory, Speaker, TestSample, Utterance};
use empathic_core::model::{
    self, seeded, CausalityT5, DecodeConfig, ModelConfig, ModelInput, ModelVariant, TrainExample, TrainReport,
    Vocab,
};
use empathic_core::prompting::{render_dialogue, sys_causality_text, user_causality_text, ReasonedOutput};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::io;
use crate::knowledge::KnowledgeService;
use crate::par;
use crate::records::{sample_id, GenerationRecord};

pub const OPTIMIZER: &str = "adam";

/// Which (context, sys reply) pairs a conversation contributes to training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairPolicy {
    /// Every sys turn, with all preceding turns as context.
    #[default]
    AllTurns,
    /// Only the final sys turn.
    LastTurn,
}

/// Context prefixes and the sys turn that follows each.
pub fn training_pairs(conv: &Conversation, policy: PairPolicy) -> Vec<(&[Utterance], &Utterance)> {
    let u = &conv.utterances;
    let mut out: Vec<(&[Utterance], &Utterance)> = (1..u.len())
        .filter(|&j| u[j].speaker == Speaker::Sys && u[j - 1].speaker == Speaker::User)
        .map(|j| (&u[..j], &u[j]))
        .collect();
    if policy == PairPolicy::LastTurn && out.len() > 1 {
        out.drain(..out.len() - 1);
    }
    out
}

/// Serialized causality texts for one training pair, keyed by the index of
/// the sys turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalityRecord {
    pub conversation_id: String,
    pub turn: usize,
    pub user_text: String,
    pub sys_text: String,
}

#[derive(Debug, Clone, Default)]
pub struct CausalityStore {
    entries: HashMap<(String, usize), CausalityRecord>,
}

impl CausalityStore {
    pub fn from_records(records: Vec<CausalityRecord>) -> Self {
        Self {
            entries: records
                .into_iter()
                .map(|r| ((r.conversation_id.clone(), r.turn), r))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_records(io::read_jsonl(path)?))
    }

    pub fn get(&self, conversation_id: &str, turn: usize) -> Option<&CausalityRecord> {
        self.entries.get(&(conversation_id.to_string(), turn))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records sorted by (conversation id, turn).
    pub fn records(&self) -> Vec<&CausalityRecord> {
        let mut v: Vec<&CausalityRecord> = self.entries.values().collect();
        v.sort_by(|a, b| (&a.conversation_id, a.turn).cmp(&(&b.conversation_id, b.turn)));
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.records())
    }
}

/// Infers user-side knowledge for the last user turn of each context and
/// sys-side knowledge for the ground-truth reply.
pub fn build_causality_store(
    conversations: &[Conversation],
    svc: &KnowledgeService,
    policy: PairPolicy,
    max_parallel: usize,
) -> Result<CausalityStore> {
    let jobs: Vec<(&str, &Utterance, &Utterance)> = conversations
        .iter()
        .flat_map(|c| {
            training_pairs(c, policy)
                .into_iter()
                .map(move |(ctx, r)| (c.id.as_str(), ctx.last().expect("pair context is non-empty"), r))
        })
        .collect();
    let results = par::map_bounded(&jobs, max_parallel, |(id, user, reply)| -> Result<CausalityRecord> {
        let (w, ur) = svc.user_bundle(&user.text)?;
        let (i, sr) = svc.sys_bundle(&reply.text)?;
        Ok(CausalityRecord {
            conversation_id: id.to_string(),
            turn: reply.index,
            user_text: user_causality_text(&w.phrases, &ur.phrases),
            sys_text: sys_causality_text(&i.phrases, &sr.phrases),
        })
    });
    Ok(CausalityStore::from_records(results.into_iter().collect::<Result<_>>()?))
}

/// Vocabulary over every text the model reads or writes.
pub fn build_vocab(conversations: &[Conversation], store: &CausalityStore, max_size: usize) -> Vocab {
    let texts = conversations
        .iter()
        .flat_map(|c| c.utterances.iter().map(|u| u.text.as_str()))
        .chain(store.records().into_iter().flat_map(|r| [r.user_text.as_str(), r.sys_text.as_str()]));
    Vocab::build(texts, 1, max_size)
}

fn missing(what: &str, id: &str) -> Error {
    empathic_core::Error::Missing {
        what: what.to_string(),
        id: id.to_string(),
    }
    .into()
}

/// Tokenizes one input, keeping only the causality texts the variant uses.
pub fn encode_input(
    vocab: &Vocab,
    variant: ModelVariant,
    id: &str,
    context: &[Utterance],
    user_text: Option<&str>,
    sys_text: Option<&str>,
) -> Result<ModelInput> {
    let slot = |used: bool, text: Option<&str>, what: &str| -> Result<Option<Vec<u32>>> {
        if !used {
            return Ok(None);
        }
        match text {
            Some(t) if !t.trim().is_empty() => Ok(Some(vocab.encode(t))),
            _ => Err(missing(what, id)),
        }
    };
    Ok(ModelInput {
        context: vocab.encode(&render_dialogue(context)),
        user: slot(variant.uses_user(), user_text, "user causality text")?,
        sys: slot(variant.uses_sys(), sys_text, "sys causality text")?,
    })
}

pub fn build_examples(
    conversations: &[Conversation],
    store: &CausalityStore,
    vocab: &Vocab,
    inventory: &EmotionInventory,
    variant: ModelVariant,
    policy: PairPolicy,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for conv in conversations {
        let emotion = inventory
            .index_of(&conv.emotion_label)
            .ok_or_else(|| missing("emotion label in inventory", &conv.id))?;
        for (ctx, reply) in training_pairs(conv, policy) {
            let id = format!("{}#{}", conv.id, reply.index);
            let rec = store.get(&conv.id, reply.index);
            let input = encode_input(
                vocab,
                variant,
                &id,
                ctx,
                rec.map(|r| r.user_text.as_str()),
                rec.map(|r| r.sys_text.as_str()),
            )?;
            out.push(TrainExample {
                id,
                input,
                response: vocab.encode(&reply.text),
                emotion,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub config: ModelConfig,
    pub max_steps: Option<usize>,
    /// Initialize from one of our own checkpoints instead of random weights.
    pub warm_start: Option<PathBuf>,
    pub out_dir: PathBuf,
}

pub fn epoch_dir_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}")
}

/// Trains and writes `epoch-NNN/` checkpoints, `latest`, `metrics.jsonl`
/// (one line per epoch) and `steps.jsonl` (one line per optimizer step).
pub fn train_t5(
    train_set: &[TrainExample],
    valid_set: &[TrainExample],
    vocab: &Vocab,
    opts: &TrainOptions,
) -> Result<(CausalityT5, TrainReport)> {
    let mut config = opts.config.clone();
    config.vocab_id = vocab.id();
    config.vocab_size = vocab.len();
    let (mut model, init) = match &opts.warm_start {
        None => (CausalityT5::new(config.clone())?, "scratch".to_string()),
        Some(dir) => {
            let ck = checkpoint::load(dir)?;
            if ck.meta.vocab_id != config.vocab_id {
                return Err(Error::Config(format!(
                    "warm-start checkpoint uses vocab {} but the training vocab is {}",
                    ck.meta.vocab_id, config.vocab_id
                )));
            }
            let model = CausalityT5::from_params(config.clone(), ck.model.params)?;
            (model, format!("warm:{}", ck.dir.display()))
        }
    };
    io::ensure_dir(&opts.out_dir)?;
    let metrics_path = opts.out_dir.join("metrics.jsonl");
    let mut epoch_lines = Vec::new();
    let mut save_error = None;
    let trained = model::train(&mut model, train_set, valid_set, opts.max_steps, |log, m| {
        let name = epoch_dir_name(log.epoch);
        let meta = CheckpointMeta {
            vocab_id: config.vocab_id.clone(),
            seed: config.seed,
            epoch: log.epoch,
            optimizer: OPTIMIZER.into(),
            init: init.clone(),
            epoch_log: Some(*log),
        };
        epoch_lines.push(*log);
        let saved = checkpoint::save(&opts.out_dir.join(&name), m, vocab, &meta)
            .and_then(|_| io::atomic_write(&opts.out_dir.join("latest"), format!("{name}\n").as_bytes()))
            .and_then(|_| io::write_jsonl(&metrics_path, &epoch_lines));
        log::info!(
            "epoch {}: l_emotion {:.4} l_gen {:.4} total {:.4} valid {:?}",
            log.epoch,
            log.mean_l_emotion,
            log.mean_l_gen,
            log.mean_total,
            log.valid_total
        );
        saved.map_err(|e| {
            let msg = e.to_string();
            save_error = Some(e);
            empathic_core::Error::Precondition(format!("checkpoint write failed: {msg}"))
        })
    });
    let report = match (trained, save_error) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    io::write_jsonl(&opts.out_dir.join("steps.jsonl"), &report.steps)?;
    Ok((model, report))
}

/// Causality texts from user-side inference sets and a reasoned output.
pub fn causality_texts(
    user: Option<[&InferenceSet; 2]>,
    reasoned: Option<&ReasonedOutput>,
) -> (Option<String>, Option<String>) {
    (
        user.map(|[w, r]| user_causality_text(&w.phrases, &r.phrases)),
        reasoned.map(|p| sys_causality_text(&p.sys_intent, &p.sys_react)),
    )
}

/// Test-time causality texts for one sample. The sys side comes from the
/// reasoning stage, never from the reference.
pub fn inference_texts(
    sample: &TestSample,
    svc: Option<&KnowledgeService>,
    reasoned: Option<&ReasonedOutput>,
    variant: ModelVariant,
) -> Result<(Option<String>, Option<String>)> {
    let id = sample_id(sample);
    let user = if variant.uses_user() {
        let svc = svc.ok_or_else(|| missing("knowledge backend", &id))?;
        Some(svc.user_bundle(&sample.tail().text)?)
    } else {
        None
    };
    if variant.uses_sys() && reasoned.is_none() {
        return Err(missing("reasoned sys causality", &id));
    }
    let reasoned = if variant.uses_sys() { reasoned } else { None };
    Ok(causality_texts(user.as_ref().map(|(w, r)| [w, r]), reasoned))
}

/// Per-sample RNG seed so decoding does not depend on batch order.
pub fn sample_seed(seed: u64, sample_id: &str) -> u64 {
    let h = io::sha256_hex(sample_id.as_bytes());
    seed ^ u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

pub struct GenerateInput<'a> {
    pub sample: &'a TestSample,
    pub user_text: Option<String>,
    pub sys_text: Option<String>,
}

pub fn generate_responses(
    model: &CausalityT5,
    vocab: &Vocab,
    inputs: &[GenerateInput<'_>],
    decode: &DecodeConfig,
    seed: u64,
    method: &str,
    max_parallel: usize,
) -> Result<Vec<GenerationRecord>> {
    let variant = model.config.variant;
    par::map_bounded(inputs, max_parallel, |gi| -> Result<GenerationRecord> {
        let id = sample_id(gi.sample);
        let input = encode_input(
            vocab,
            variant,
            &id,
            &gi.sample.context,
            gi.user_text.as_deref(),
            gi.sys_text.as_deref(),
        )?;
        let mut rng = seeded(sample_seed(seed, &id));
        let tokens = model.generate(&input, decode, &mut rng)?;
        Ok(GenerationRecord::new(gi.sample, method, vocab.decode(&tokens), None))
    })
    .into_iter()
    .collect()
}
