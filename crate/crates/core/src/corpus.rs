//! Conversations, dataset splits and test-sample slicing.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Sys,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Sys => "sys",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    /// Position within the parent conversation; reassigned on validation.
    #[serde(skip)]
    pub index: usize,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>, index: usize) -> Self {
        Self {
            speaker,
            text: text.into(),
            index,
        }
    }
}

/// The fixed emotion label inventory shipped with a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmotionInventory {
    labels: Vec<String>,
}

impl EmotionInventory {
    /// Builds an inventory from a plain-text manifest, one label per line.
    /// Blank lines and `#` comments are ignored.
    pub fn from_manifest(text: &str) -> Result<Self> {
        let labels: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(ToString::to_string)
            .collect();
        Self::new(labels)
    }

    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("emotion inventory".into()));
        }
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::Config("duplicate emotion label in manifest".into()));
        }
        Ok(Self { labels })
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    #[serde(rename = "emotion")]
    pub emotion_label: String,
    pub situation: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    /// Reassigns utterance indices and checks every record invariant.
    pub fn validate(&mut self, inventory: &EmotionInventory) -> Result<()> {
        let bad = |reason: String| Error::InvalidConversation {
            id: self.id.clone(),
            reason,
        };
        if self.id.trim().is_empty() {
            return Err(Error::InvalidConversation {
                id: self.id.clone(),
                reason: "empty id".into(),
            });
        }
        if inventory.index_of(&self.emotion_label).is_none() {
            return Err(bad(format!("unknown emotion label {:?}", self.emotion_label)));
        }
        if self.utterances.is_empty() {
            return Err(bad("no utterances".into()));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.text.trim().is_empty() {
                return Err(bad(format!("utterance {i} is empty")));
            }
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Sys };
            if u.speaker != expected {
                return Err(bad(format!(
                    "non-alternating speakers: turn {i} is {} but {} was expected",
                    u.speaker.as_str(),
                    expected.as_str()
                )));
            }
        }
        for (i, u) in self.utterances.iter_mut().enumerate() {
            u.index = i;
        }
        Ok(())
    }

    /// True when at least one user turn is followed by a sys turn.
    pub fn has_pair(&self) -> bool {
        self.utterances.len() >= 2
    }

    /// Text of the last user utterance in the conversation.
    pub fn last_user_text(&self) -> Option<&str> {
        self.utterances
            .iter()
            .rev()
            .find(|u| u.speaker == Speaker::User)
            .map(|u| u.text.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: Vec<Conversation>,
    pub valid: Vec<Conversation>,
    pub test: Vec<Conversation>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

/// Part sizes for `n` items: valid and test are floored, train takes the
/// remainder.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::pre("split ratios must be non-negative"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::pre(format!("split ratios sum to {sum}, not 1")));
    }
    // the epsilon absorbs products like 0.29 * 100 = 28.999999999999996
    let floor = |r: f64| libm::floor(r * n as f64 + 1e-9) as usize;
    let valid = floor(ratios[1]);
    let test = floor(ratios[2]);
    Ok([n - valid - test, valid, test])
}

/// Seeded shuffle-then-cut partition into train/valid/test.
pub fn split(conversations: &[Conversation], ratios: [f64; 3], seed: u64) -> Result<SplitSet> {
    if conversations.is_empty() {
        return Err(Error::Empty("conversations to split".into()));
    }
    let [n_train, n_valid, _] = split_sizes(conversations.len(), ratios)?;
    let mut order: Vec<usize> = (0..conversations.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| conversations[i].clone()).collect();
    Ok(SplitSet {
        train: pick(&order[..n_train]),
        valid: pick(&order[n_train..n_train + n_valid]),
        test: pick(&order[n_train + n_valid..]),
        seed,
        ratios,
    })
}

/// Parses ratios written like `8:1:1` (normalized by their sum).
pub fn parse_ratios(spec: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::pre(format!("expected three ratios, got {spec:?}")));
    }
    let mut raw = [0.0; 3];
    for (slot, p) in raw.iter_mut().zip(&parts) {
        *slot = p
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::pre(format!("bad ratio {p:?}")))?;
        if !slot.is_finite() || *slot < 0.0 {
            return Err(Error::pre("split ratios must be non-negative"));
        }
    }
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return Err(Error::pre("split ratios sum to zero"));
    }
    Ok(raw.map(|r| r / sum))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    SingleTurn,
    MultiTurn,
}

impl SampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleMode::SingleTurn => "single_turn",
            SampleMode::MultiTurn => "multi_turn",
        }
    }
}

impl core::str::FromStr for SampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_turn" => Ok(SampleMode::SingleTurn),
            "multi" | "multi_turn" => Ok(SampleMode::MultiTurn),
            other => Err(Error::pre(format!("unknown sample mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSample {
    pub conversation_id: String,
    pub mode: SampleMode,
    pub emotion_label: String,
    pub situation: String,
    pub context: Vec<Utterance>,
    pub reference: Utterance,
}

impl TestSample {
    /// The user turn that closes the context.
    pub fn tail(&self) -> &Utterance {
        self.context.last().expect("context is never empty")
    }
}

/// Cuts a conversation into (context, reference). Single-turn uses the first
/// user utterance; multi-turn uses the longest prefix ending in a user turn
/// that is followed by a sys turn, and needs at least two context turns.
pub fn cut(conv: &Conversation, mode: SampleMode) -> Option<(Vec<Utterance>, Utterance)> {
    let u = &conv.utterances;
    let end = match mode {
        SampleMode::SingleTurn => 0,
        SampleMode::MultiTurn => {
            let last_user = (0..u.len())
                .rev()
                .find(|&i| u[i].speaker == Speaker::User && i + 1 < u.len())?;
            if last_user == 0 {
                return None;
            }
            last_user
        }
    };
    let reference = u.get(end + 1)?;
    if u[end].speaker != Speaker::User || reference.speaker != Speaker::Sys {
        return None;
    }
    Some((u[..=end].to_vec(), reference.clone()))
}

/// Builds one sample per conversation that admits a cut; the rest are
/// skipped with a warning.
pub fn make_test_samples(conversations: &[Conversation], mode: SampleMode) -> Vec<TestSample> {
    let mut out = Vec::with_capacity(conversations.len());
    for conv in conversations {
        match cut(conv, mode) {
            Some((context, reference)) => out.push(TestSample {
                conversation_id: conv.id.clone(),
                mode,
                emotion_label: conv.emotion_label.clone(),
                situation: conv.situation.clone(),
                context,
                reference,
            }),
            None => log::warn!(
                "conversation {} has no {} (context, reference) pair; skipped",
                conv.id,
                mode.as_str()
            ),
        }
    }
    out
}

/// Uniform random subset of `n` samples under `seed`, kept in input order.
pub fn subsample<T: Clone>(items: &[T], n: usize, seed: u64) -> Vec<T> {
    if n >= items.len() {
        if n > items.len() {
            log::warn!("requested {n} samples but only {} are available", items.len());
        }
        return items.to_vec();
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = idx[..n].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| items[i].clone()).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn conv(id: &str, turns: &[&str]) -> Conversation {
        Conversation {
            id: id.into(),
            emotion_label: "joyful".into(),
            situation: format!("situation of {id}"),
            utterances: turns
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let sp = if i % 2 == 0 { Speaker::User } else { Speaker::Sys };
                    Utterance::new(sp, *t, i)
                })
                .collect(),
        }
    }

    fn inventory() -> EmotionInventory {
        EmotionInventory::from_manifest("joyful\nafraid\n# comment\n\nsad\n").unwrap()
    }

    #[test]
    fn validation_catches_consecutive_user_turns() {
        let mut c = conv("hit:1", &["a", "b"]);
        c.utterances[1].speaker = Speaker::User;
        let err = c.validate(&inventory()).unwrap_err();
        match err {
            Error::InvalidConversation { id, reason } => {
                assert_eq!(id, "hit:1");
                assert!(reason.contains("non-alternating"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_rejects_unknown_label_and_blank_text() {
        let mut c = conv("x", &["a", "b"]);
        c.emotion_label = "bored".into();
        assert!(c.validate(&inventory()).is_err());
        let mut c = conv("x", &["a", "  "]);
        assert!(c.validate(&inventory()).is_err());
    }

    #[test]
    fn validation_reassigns_indices() {
        let mut c = conv("x", &["a", "b", "c"]);
        c.utterances[2].index = 99;
        c.validate(&inventory()).unwrap();
        assert_eq!(c.utterances[2].index, 2);
    }

    #[test]
    fn split_sizes_follow_ratios() {
        assert_eq!(split_sizes(10, [0.8, 0.1, 0.1]).unwrap(), [8, 1, 1]);
        assert_eq!(split_sizes(25_000, [0.8, 0.1, 0.1]).unwrap(), [20_000, 2_500, 2_500]);
        assert_eq!(split_sizes(7, [0.8, 0.1, 0.1]).unwrap(), [7, 0, 0]);
        assert!(split_sizes(10, [1.2, -0.1, -0.1]).is_err());
        assert!(split_sizes(10, [0.5, 0.1, 0.1]).is_err());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let convs: Vec<_> = (0..10).map(|i| conv(&format!("c{i}"), &["a", "b"])).collect();
        let a = split(&convs, [0.8, 0.1, 0.1], 7).unwrap();
        let b = split(&convs, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (8, 1, 1));
        let mut ids: Vec<_> = a
            .train
            .iter()
            .chain(&a.valid)
            .chain(&a.test)
            .map(|c| c.id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert!(split(&[], [0.8, 0.1, 0.1], 7).is_err());
    }

    #[test]
    fn ratio_parsing() {
        let r = parse_ratios("8:1:1").unwrap();
        assert!((r[0] - 0.8).abs() < 1e-12 && (r[2] - 0.1).abs() < 1e-12);
        assert!(parse_ratios("8:1").is_err());
        assert!(parse_ratios("8:-1:1").is_err());
    }

    #[test]
    fn single_and_multi_turn_cuts() {
        let c = conv("c", &["u0", "s1", "u2", "s3"]);
        let s = make_test_samples(core::slice::from_ref(&c), SampleMode::SingleTurn);
        assert_eq!(s[0].context.len(), 1);
        assert_eq!(s[0].reference.text, "s1");
        let m = make_test_samples(&[c], SampleMode::MultiTurn);
        assert_eq!(m[0].context.iter().map(|u| u.text.as_str()).collect::<Vec<_>>(), vec!["u0", "s1", "u2"]);
        assert_eq!(m[0].reference.text, "s3");
        assert_eq!(m[0].tail().speaker, Speaker::User);
    }

    #[test]
    fn unusable_conversations_are_skipped() {
        let short = conv("short", &["u0", "s1"]);
        let lone = conv("lone", &["u0"]);
        assert!(make_test_samples(&[short.clone(), lone.clone()], SampleMode::MultiTurn).is_empty());
        assert_eq!(make_test_samples(&[short, lone], SampleMode::SingleTurn).len(), 1);
        // trailing user turn: multi-turn cut falls back to the previous user turn
        let c = conv("odd", &["u0", "s1", "u2", "s3", "u4"]);
        let m = make_test_samples(&[c], SampleMode::MultiTurn);
        assert_eq!(m[0].context.len(), 3);
    }

    #[test]
    fn subsample_exact_count() {
        let items: Vec<u32> = (0..2_500).collect();
        let a = subsample(&items, 250, 13);
        assert_eq!(a.len(), 250);
        assert_eq!(a, subsample(&items, 250, 13));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample(&items[..5], 250, 13).len(), 5);
    }
}
