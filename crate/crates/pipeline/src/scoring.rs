//! Metric backends and corpus evaluation producing `MetricReport`s.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use empathic_core::metrics::{
    bert_score, bleu_from_stats, config_digest, distinct_contributions, emotion_accuracy, epitome_means,
    overlap_f1, sentence_stats, Aggregation, BertScore, EpitomeRating, MetricReport, SampleScore,
    StopwordList,
};
use empathic_core::selection::EmbeddingVector;
use empathic_core::text::{self, tokenize, TOKENIZER_ID};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::embedding::{Embedder, HashingEmbedder};
use crate::error::{Error, Result};
use crate::io;
use crate::par;
use crate::transport::{RetryPolicy, Transport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub sample_id: String,
    pub generated: String,
    pub reference: String,
    #[serde(default)]
    pub context: String,
    /// Gold emotion label of the conversation, for EMOACC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFamily {
    F1,
    Bleu,
    Distinct,
    Bertscore,
    Emoacc,
    Epitome,
    Coherence,
}

impl MetricFamily {
    pub const ALL: [MetricFamily; 7] = [
        MetricFamily::F1,
        MetricFamily::Bleu,
        MetricFamily::Distinct,
        MetricFamily::Bertscore,
        MetricFamily::Emoacc,
        MetricFamily::Epitome,
        MetricFamily::Coherence,
    ];
}

impl FromStr for MetricFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "f1" => MetricFamily::F1,
            "bleu" => MetricFamily::Bleu,
            "distinct" => MetricFamily::Distinct,
            "bertscore" => MetricFamily::Bertscore,
            "emoacc" => MetricFamily::Emoacc,
            "epitome" => MetricFamily::Epitome,
            "coherence" => MetricFamily::Coherence,
            other => return Err(Error::Config(format!("unknown metric {other:?}"))),
        })
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<MetricFamily>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// Contextual token embeddings for BERTScore.
pub trait TokenEmbedder: Send + Sync {
    fn backend_id(&self) -> &str;
    fn embed_tokens(&self, text: &str) -> Result<Vec<EmbeddingVector>>;
}

/// Each token's vector mixes its own hashed features with its neighbours'
/// at weight 0.5, a cheap deterministic stand-in for a contextual encoder.
pub struct HashingTokenEmbedder {
    id: String,
    inner: HashingEmbedder,
}

impl HashingTokenEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            id: format!("hashing-token-ctx1-v1-{dim}"),
            inner: HashingEmbedder::new(dim),
        }
    }
}

impl TokenEmbedder for HashingTokenEmbedder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn embed_tokens(&self, input: &str) -> Result<Vec<EmbeddingVector>> {
        let words = text::words(input);
        let own: Vec<Vec<f64>> = words.iter().map(|w| self.inner.embed_raw(w)).collect::<Result<_>>()?;
        (0..own.len())
            .map(|i| {
                let mut v = own[i].clone();
                for j in [i.wrapping_sub(1), i + 1] {
                    if let Some(n) = own.get(j) {
                        v.iter_mut().zip(n).for_each(|(a, b)| *a += 0.5 * b);
                    }
                }
                Ok(EmbeddingVector::new(v)?)
            })
            .collect()
    }
}

/// Token-embedding server: `POST {"text": str}` answered by `{"vectors": [[f64]]}`.
pub struct ModelServerTokenEmbedder {
    id: String,
    endpoint: String,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
}

impl ModelServerTokenEmbedder {
    pub fn new(id: &str, endpoint: &str, transport: Arc<dyn Transport>, retry: RetryPolicy) -> Self {
        Self {
            id: id.into(),
            endpoint: endpoint.into(),
            transport,
            retry,
        }
    }
}

impl TokenEmbedder for ModelServerTokenEmbedder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn embed_tokens(&self, text: &str) -> Result<Vec<EmbeddingVector>> {
        let body = json!({ "text": text });
        let (v, _) = self
            .retry
            .run(|| self.transport.post_json(&self.endpoint, &[], &body))
            .map_err(|(e, n)| Error::backend(&self.id, format!("unreachable after {n} attempt(s): {e}")))?;
        let vectors: Vec<Vec<f64>> = serde_json::from_value(v["vectors"].clone())
            .map_err(|e| Error::backend(&self.id, format!("bad response: {e}")))?;
        vectors.into_iter().map(|x| Ok(EmbeddingVector::new(x)?)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BertTarget {
    Reference,
    Context,
}

/// One recorded BERTScore result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BertFixtureRecord {
    pub sample_id: String,
    pub target: BertTarget,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub enum BertScorer {
    Embedding(Arc<dyn TokenEmbedder>),
    Fixture {
        id: String,
        scores: HashMap<(String, BertTarget), BertScore>,
    },
}

impl BertScorer {
    pub fn load_fixture(id: &str, path: &Path) -> Result<Self> {
        let records: Vec<BertFixtureRecord> = io::read_jsonl(path)?;
        Ok(BertScorer::Fixture {
            id: id.into(),
            scores: records
                .into_iter()
                .map(|r| {
                    (
                        (r.sample_id, r.target),
                        BertScore {
                            precision: r.precision,
                            recall: r.recall,
                            f1: r.f1,
                        },
                    )
                })
                .collect(),
        })
    }

    pub fn backend_id(&self) -> &str {
        match self {
            BertScorer::Embedding(e) => e.backend_id(),
            BertScorer::Fixture { id, .. } => id,
        }
    }

    pub fn score(&self, sample_id: &str, generated: &str, target_text: &str, target: BertTarget) -> Result<BertScore> {
        match self {
            BertScorer::Embedding(e) => {
                let c = e.embed_tokens(generated)?;
                let r = e.embed_tokens(target_text)?;
                Ok(bert_score(&c, &r)?)
            }
            BertScorer::Fixture { id, scores } => scores
                .get(&(sample_id.to_string(), target))
                .copied()
                .ok_or_else(|| Error::FixtureMiss {
                    backend: id.clone(),
                    what: format!("{target:?} score for sample {sample_id}"),
                }),
        }
    }
}

pub trait EmotionRater: Send + Sync {
    fn backend_id(&self) -> &str;
    fn predict(&self, sample_id: &str, response: &str) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionFixtureRecord {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub predicted: String,
}

fn check_response(backend: &str, sample_id: &str, recorded: &Option<String>, actual: &str) -> Result<()> {
    match recorded {
        Some(r) if r.trim() != actual.trim() => Err(Error::FixtureMiss {
            backend: backend.to_string(),
            what: format!("sample {sample_id}: recorded response differs from the scored one"),
        }),
        _ => Ok(()),
    }
}

pub struct FixtureEmotionRater {
    id: String,
    records: HashMap<String, EmotionFixtureRecord>,
}

impl FixtureEmotionRater {
    pub fn load(id: &str, path: &Path) -> Result<Self> {
        let records: Vec<EmotionFixtureRecord> = io::read_jsonl(path)?;
        Ok(Self {
            id: id.into(),
            records: records.into_iter().map(|r| (r.sample_id.clone(), r)).collect(),
        })
    }
}

impl EmotionRater for FixtureEmotionRater {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn predict(&self, sample_id: &str, response: &str) -> Result<String> {
        let r = self.records.get(sample_id).ok_or_else(|| Error::FixtureMiss {
            backend: self.id.clone(),
            what: format!("emotion prediction for sample {sample_id}"),
        })?;
        check_response(&self.id, sample_id, &r.response, response)?;
        Ok(r.predicted.clone())
    }
}

/// Emotion classifier server: `POST {"text": str}` answered by `{"label": str}`.
pub struct ModelServerEmotionRater {
    id: String,
    endpoint: String,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
}

impl ModelServerEmotionRater {
    pub fn new(id: &str, endpoint: &str, transport: Arc<dyn Transport>, retry: RetryPolicy) -> Self {
        Self {
            id: id.into(),
            endpoint: endpoint.into(),
            transport,
            retry,
        }
    }
}

impl EmotionRater for ModelServerEmotionRater {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn predict(&self, _sample_id: &str, response: &str) -> Result<String> {
        let body = json!({ "text": response });
        let (v, _) = self
            .retry
            .run(|| self.transport.post_json(&self.endpoint, &[], &body))
            .map_err(|(e, n)| Error::backend(&self.id, format!("unreachable after {n} attempt(s): {e}")))?;
        v["label"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::backend(&self.id, "response has no label"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Ip,
    Ex,
    Er,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Ip, Mechanism::Ex, Mechanism::Er];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Ip => "ip",
            Mechanism::Ex => "ex",
            Mechanism::Er => "er",
        }
    }
}

/// One rater per empathy mechanism; returns the raw level, validated by the
/// caller.
pub trait MechanismRater: Send + Sync {
    fn backend_id(&self) -> &str;
    fn rate(&self, sample_id: &str, context: &str, response: &str) -> Result<i64>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpitomeFixtureRecord {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub ip: i64,
    pub ex: i64,
    pub er: i64,
}

pub struct FixtureMechanismRater {
    id: String,
    mechanism: Mechanism,
    records: Arc<HashMap<String, EpitomeFixtureRecord>>,
}

/// The three mechanism raters backed by one fixture file.
pub fn load_epitome_fixture(id: &str, path: &Path) -> Result<[Arc<dyn MechanismRater>; 3]> {
    let records: Vec<EpitomeFixtureRecord> = io::read_jsonl(path)?;
    let map = Arc::new(
        records
            .into_iter()
            .map(|r| (r.sample_id.clone(), r))
            .collect::<HashMap<_, _>>(),
    );
    Ok(Mechanism::ALL.map(|m| {
        Arc::new(FixtureMechanismRater {
            id: format!("{id}-{}", m.as_str()),
            mechanism: m,
            records: map.clone(),
        }) as Arc<dyn MechanismRater>
    }))
}

impl MechanismRater for FixtureMechanismRater {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn rate(&self, sample_id: &str, _context: &str, response: &str) -> Result<i64> {
        let r = self.records.get(sample_id).ok_or_else(|| Error::FixtureMiss {
            backend: self.id.clone(),
            what: format!("rating for sample {sample_id}"),
        })?;
        check_response(&self.id, sample_id, &r.response, response)?;
        Ok(match self.mechanism {
            Mechanism::Ip => r.ip,
            Mechanism::Ex => r.ex,
            Mechanism::Er => r.er,
        })
    }
}

/// EPITOME classifier server: `POST {"context": str, "response": str}`
/// answered by `{"level": int}`.
pub struct ModelServerMechanismRater {
    id: String,
    endpoint: String,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
}

impl ModelServerMechanismRater {
    pub fn new(id: &str, endpoint: &str, transport: Arc<dyn Transport>, retry: RetryPolicy) -> Self {
        Self {
            id: id.into(),
            endpoint: endpoint.into(),
            transport,
            retry,
        }
    }
}

impl MechanismRater for ModelServerMechanismRater {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn rate(&self, _sample_id: &str, context: &str, response: &str) -> Result<i64> {
        let body = json!({ "context": context, "response": response });
        let (v, _) = self
            .retry
            .run(|| self.transport.post_json(&self.endpoint, &[], &body))
            .map_err(|(e, n)| Error::backend(&self.id, format!("unreachable after {n} attempt(s): {e}")))?;
        v["level"]
            .as_i64()
            .ok_or_else(|| Error::backend(&self.id, "response has no integer level"))
    }
}

/// Backends for the model-based metrics; absent ones make the matching
/// metric families fail with a config error.
pub struct Scorers {
    pub stopwords: StopwordList,
    pub bert: Option<BertScorer>,
    pub emotion: Option<Arc<dyn EmotionRater>>,
    pub epitome: Option<[Arc<dyn MechanismRater>; 3]>,
    pub max_parallel: usize,
}

impl Default for Scorers {
    fn default() -> Self {
        Self {
            stopwords: StopwordList::english_v1(),
            bert: None,
            emotion: None,
            epitome: None,
            max_parallel: 4,
        }
    }
}

fn report(metric_id: &str, aggregation: Aggregation, per_sample: Vec<SampleScore>, knobs: &[(&str, &str)]) -> MetricReport {
    let mut r = MetricReport {
        metric_id: metric_id.to_string(),
        corpus_value: 0.0,
        aggregation,
        per_sample,
        config_digest: config_digest(knobs),
    };
    r.corpus_value = r.aggregate();
    r
}

fn mean_report(metric_id: &str, values: Vec<(String, f64)>, knobs: &[(&str, &str)]) -> MetricReport {
    let per_sample = values
        .into_iter()
        .map(|(sample_id, value)| SampleScore {
            sample_id,
            value,
            components: Vec::new(),
        })
        .collect();
    report(metric_id, Aggregation::Mean { scale: 1.0 }, per_sample, knobs)
}

fn need<'a, T: ?Sized>(x: Option<&'a T>, metric: &str) -> Result<&'a T> {
    x.ok_or_else(|| Error::Config(format!("metric {metric} needs a backend, none configured")))
}

/// Scores `pairs` for every requested family. Report order follows the
/// request; within a family, ids are fixed (`bleu2..bleu4`, `distinct1`,
/// `distinct2`, `bertscore_p/r/f`, `epitome_ip/ex/er`, `coherence`).
pub fn evaluate(pairs: &[ScoredPair], families: &[MetricFamily], scorers: &Scorers) -> Result<Vec<MetricReport>> {
    if pairs.is_empty() {
        return Err(empathic_core::Error::Empty("scored pairs".into()).into());
    }
    for p in pairs {
        if p.generated.trim().is_empty() || p.reference.trim().is_empty() {
            return Err(empathic_core::Error::Precondition(format!(
                "sample {} has an empty generated or reference text",
                p.sample_id
            ))
            .into());
        }
    }
    let mut out = Vec::new();
    for family in families {
        match family {
            MetricFamily::F1 => {
                let knobs = [("tokenizer", TOKENIZER_ID), ("stopwords", scorers.stopwords.id())];
                let mut degenerate = 0;
                let values = pairs
                    .iter()
                    .map(|p| {
                        let s = overlap_f1(&p.generated, &p.reference, &scorers.stopwords);
                        if s.degenerate {
                            degenerate += 1;
                        }
                        (p.sample_id.clone(), s.f1)
                    })
                    .collect();
                if degenerate > 0 {
                    log::warn!("{degenerate} pair(s) were empty after stopword removal; scored 0");
                }
                out.push(mean_report("f1", values, &knobs));
            }
            MetricFamily::Bleu => {
                let toks: Vec<(Vec<String>, Vec<String>)> =
                    pairs.iter().map(|p| (tokenize(&p.generated), tokenize(&p.reference))).collect();
                for n in 2..=4 {
                    let order = n.to_string();
                    let knobs = [("tokenizer", TOKENIZER_ID), ("order", order.as_str()), ("smoothing", "none")];
                    let per_sample = pairs
                        .iter()
                        .zip(&toks)
                        .map(|(p, (c, r))| {
                            let s = sentence_stats(c, r, n);
                            SampleScore {
                                sample_id: p.sample_id.clone(),
                                value: 100.0 * bleu_from_stats(&s),
                                components: s.to_components(),
                            }
                        })
                        .collect();
                    out.push(report(
                        &format!("bleu{n}"),
                        Aggregation::Bleu {
                            scale: 100.0,
                            max_order: n,
                        },
                        per_sample,
                        &knobs,
                    ));
                }
            }
            MetricFamily::Distinct => {
                let toks: Vec<Vec<String>> = pairs.iter().map(|p| tokenize(&p.generated)).collect();
                for n in 1..=2 {
                    let order = n.to_string();
                    let knobs = [("tokenizer", TOKENIZER_ID), ("n", order.as_str()), ("pooling", "corpus")];
                    let per_sample = distinct_contributions(&toks, n)?
                        .into_iter()
                        .zip(pairs)
                        .map(|((novel, total), p)| SampleScore {
                            sample_id: p.sample_id.clone(),
                            value: if total == 0 { 0.0 } else { 100.0 * novel as f64 / total as f64 },
                            components: vec![novel as f64, total as f64],
                        })
                        .collect();
                    out.push(report(&format!("distinct{n}"), Aggregation::Ratio { scale: 100.0 }, per_sample, &knobs));
                }
            }
            MetricFamily::Bertscore | MetricFamily::Coherence => {
                let bert = need(scorers.bert.as_ref(), "bertscore")?;
                let coherence = *family == MetricFamily::Coherence;
                let target = if coherence { BertTarget::Context } else { BertTarget::Reference };
                let scores: Vec<BertScore> = par::map_bounded(pairs, scorers.max_parallel, |p| {
                    let t = if coherence { &p.context } else { &p.reference };
                    bert.score(&p.sample_id, &p.generated, t, target)
                })
                .into_iter()
                .collect::<Result<_>>()?;
                let knobs = [("tokenizer", TOKENIZER_ID), ("backend", bert.backend_id()), ("idf", "false")];
                let pick = |f: fn(&BertScore) -> f64| {
                    pairs
                        .iter()
                        .zip(&scores)
                        .map(|(p, s)| (p.sample_id.clone(), f(s)))
                        .collect::<Vec<_>>()
                };
                if coherence {
                    out.push(mean_report("coherence", pick(|s| s.f1), &knobs));
                } else {
                    out.push(mean_report("bertscore_p", pick(|s| s.precision), &knobs));
                    out.push(mean_report("bertscore_r", pick(|s| s.recall), &knobs));
                    out.push(mean_report("bertscore_f", pick(|s| s.f1), &knobs));
                }
            }
            MetricFamily::Emoacc => {
                let rater = need(scorers.emotion.as_deref(), "emoacc")?;
                let predicted: Vec<String> =
                    par::map_bounded(pairs, scorers.max_parallel, |p| rater.predict(&p.sample_id, &p.generated))
                        .into_iter()
                        .collect::<Result<_>>()?;
                let gold: Vec<String> = pairs
                    .iter()
                    .map(|p| {
                        p.emotion.clone().ok_or_else(|| {
                            Error::Config(format!("sample {} has no gold emotion for emoacc", p.sample_id))
                        })
                    })
                    .collect::<Result<_>>()?;
                emotion_accuracy(&predicted, &gold)?;
                let values = pairs
                    .iter()
                    .zip(predicted.iter().zip(&gold))
                    .map(|(p, (a, b))| (p.sample_id.clone(), if a == b { 1.0 } else { 0.0 }))
                    .collect();
                out.push(mean_report("emoacc", values, &[("backend", rater.backend_id())]));
            }
            MetricFamily::Epitome => {
                let raters = need(scorers.epitome.as_ref(), "epitome")?;
                let ratings: Vec<EpitomeRating> = par::map_bounded(pairs, scorers.max_parallel, |p| {
                    let mut raw = [0i64; 3];
                    for (slot, r) in raw.iter_mut().zip(raters.iter()) {
                        *slot = r.rate(&p.sample_id, &p.context, &p.generated)?;
                    }
                    Ok(EpitomeRating::from_raw(&p.sample_id, raw[0], raw[1], raw[2])?)
                })
                .into_iter()
                .collect::<Result<_>>()?;
                epitome_means(&ratings)?;
                for (i, m) in Mechanism::ALL.iter().enumerate() {
                    let values = pairs
                        .iter()
                        .zip(&ratings)
                        .map(|(p, r)| (p.sample_id.clone(), f64::from([r.ip, r.ex, r.er][i])))
                        .collect();
                    out.push(mean_report(
                        &format!("epitome_{}", m.as_str()),
                        values,
                        &[("backend", raters[i].backend_id())],
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Plain two-column listing of corpus values.
pub fn format_reports(reports: &[MetricReport]) -> String {
    let width = reports.iter().map(|r| r.metric_id.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$}  value\n", "metric");
    for r in reports {
        let _ = writeln!(s, "{:<width$}  {:.4}", r.metric_id, r.corpus_value);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, g: &str, r: &str) -> ScoredPair {
        ScoredPair {
            sample_id: id.into(),
            generated: g.into(),
            reference: r.into(),
            context: "user: hello there".into(),
            emotion: Some("sad".into()),
        }
    }

    #[test]
    fn pure_metrics_are_consistent() {
        let pairs = vec![
            pair("a", "I am so sorry to hear that.", "I am sorry to hear that!"),
            pair("b", "That is great news.", "That is wonderful news."),
            pair("c", "a a a", "b b b"),
        ];
        let reports = evaluate(&pairs, &[MetricFamily::F1, MetricFamily::Bleu, MetricFamily::Distinct], &Scorers::default()).unwrap();
        let ids: Vec<&str> = reports.iter().map(|r| r.metric_id.as_str()).collect();
        assert_eq!(ids, ["f1", "bleu2", "bleu3", "bleu4", "distinct1", "distinct2"]);
        for r in &reports {
            assert!(r.is_consistent(1e-9), "{}", r.metric_id);
        }
    }

    #[test]
    fn builtin_bertscore_self_similarity() {
        let scorers = Scorers {
            bert: Some(BertScorer::Embedding(Arc::new(HashingTokenEmbedder::new(64)))),
            ..Scorers::default()
        };
        let pairs = vec![pair("a", "I am so sorry to hear that", "I am so sorry to hear that")];
        let r = evaluate(&pairs, &[MetricFamily::Bertscore], &scorers).unwrap();
        for x in &r {
            assert!((x.corpus_value - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_backend_is_config_error() {
        let pairs = vec![pair("a", "x", "y")];
        assert!(matches!(
            evaluate(&pairs, &[MetricFamily::Emoacc], &Scorers::default()),
            Err(Error::Config(_))
        ));
    }
}
