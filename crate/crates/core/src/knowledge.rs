//! Commonsense relations, inference sets and their canonical formatting.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text;

pub const DEFAULT_MAX_PHRASES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "xWant")]
    XWant,
    #[serde(rename = "xReact")]
    XReact,
    #[serde(rename = "xIntent")]
    XIntent,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::XWant, Relation::XReact, Relation::XIntent];

    pub fn tag(self) -> &'static str {
        match self {
            Relation::XWant => "xWant",
            Relation::XReact => "xReact",
            Relation::XIntent => "xIntent",
        }
    }
}

impl core::fmt::Display for Relation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.tag())
    }
}

impl core::str::FromStr for Relation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Relation::ALL
            .into_iter()
            .find(|r| r.tag() == s)
            .ok_or_else(|| Error::pre(format!("unknown relation {s:?}")))
    }
}

/// Decoding settings reported by a backend, recorded verbatim.
pub type DecodeParams = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceSet {
    pub source_text: String,
    pub relation: Relation,
    pub phrases: Vec<String>,
    pub backend_id: String,
    #[serde(default)]
    pub decode_params: DecodeParams,
}

impl InferenceSet {
    /// Normalizes raw backend phrases (trim, strip terminal periods,
    /// case-insensitive dedupe) and truncates to `max_phrases`.
    pub fn from_raw<I, S>(
        source_text: &str,
        relation: Relation,
        raw: I,
        max_phrases: usize,
        backend_id: &str,
        decode_params: DecodeParams,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_phrases == 0 {
            return Err(Error::pre("max_phrases must be at least 1"));
        }
        let mut phrases = text::dedupe_phrases(raw);
        // "none" is the null inference of ATOMIC-style models
        phrases.retain(|p| !p.eq_ignore_ascii_case("none"));
        phrases.truncate(max_phrases);
        if phrases.is_empty() {
            return Err(Error::Empty(format!(
                "{relation} inference for {source_text:?} from {backend_id}"
            )));
        }
        Ok(Self {
            source_text: source_text.to_string(),
            relation,
            phrases,
            backend_id: backend_id.to_string(),
            decode_params,
        })
    }

    /// Checks the set-level invariants on a deserialized record.
    pub fn check(&self, max_phrases: usize) -> Result<()> {
        let normalized = text::dedupe_phrases(&self.phrases);
        if normalized != self.phrases {
            return Err(Error::pre("phrases are not normalized"));
        }
        if self.phrases.is_empty() || self.phrases.len() > max_phrases {
            return Err(Error::pre(format!(
                "phrase count {} outside 1..={max_phrases}",
                self.phrases.len()
            )));
        }
        Ok(())
    }
}

/// The two phrase-joining styles used in prompts and causality texts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinStyle {
    /// `a; b; c.`
    Semicolon,
    /// `a. b. c.`
    Sentence,
}

pub fn format_phrases(phrases: &[String], style: JoinStyle) -> String {
    let mut out = String::new();
    match style {
        JoinStyle::Semicolon => {
            out.push_str(&phrases.join("; "));
            if !out.is_empty() {
                out.push('.');
            }
        }
        JoinStyle::Sentence => {
            for (i, p) in phrases.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                out.push_str(p);
                out.push('.');
            }
        }
    }
    out
}

/// Text normalization applied before keying the cache.
pub fn normalize_source(text: &str) -> String {
    text::normalize_whitespace(text)
}

/// Content address of an inference request.
pub fn cache_key(
    text: &str,
    relation: Relation,
    backend_id: &str,
    decode_params: &DecodeParams,
) -> String {
    let mut h = Sha256::new();
    for field in [normalize_source(text).as_str(), relation.tag(), backend_id] {
        h.update((field.len() as u64).to_le_bytes());
        h.update(field.as_bytes());
    }
    for (k, v) in decode_params {
        h.update((k.len() as u64).to_le_bytes());
        h.update(k.as_bytes());
        h.update((v.len() as u64).to_le_bytes());
        h.update(v.as_bytes());
    }
    to_hex(&h.finalize())
}

pub fn to_hex(bytes: &[u8]) -> String {
    const DIGITS: &[u8; 16] = b"0123456789abcdef";
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push(DIGITS[(b >> 4) as usize] as char);
        s.push(DIGITS[(b & 0xf) as usize] as char);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn relation_tags_round_trip() {
        for r in Relation::ALL {
            assert_eq!(r.tag().parse::<Relation>().unwrap(), r);
        }
        assert!("oEffect".parse::<Relation>().is_err());
    }

    #[test]
    fn normalizes_and_truncates() {
        let set = InferenceSet::from_raw(
            "Did you suffer any injuries?",
            Relation::XIntent,
            ["to make sure they are ok.", " to know if you are ok", "To make sure they are OK", "none"],
            5,
            "fixture",
            DecodeParams::new(),
        )
        .unwrap();
        assert_eq!(set.phrases, vec!["to make sure they are ok", "to know if you are ok"]);
        let one = InferenceSet::from_raw("x", Relation::XWant, ["a", "b", "c"], 1, "f", DecodeParams::new()).unwrap();
        assert_eq!(one.phrases, vec!["a"]);
    }

    #[test]
    fn empty_output_is_an_error() {
        let err = InferenceSet::from_raw("x", Relation::XWant, ["", " . "], 5, "f", DecodeParams::new());
        assert!(matches!(err, Err(Error::Empty(_))));
    }

    #[test]
    fn join_styles() {
        let p = vec!["to have a good time".to_string(), "to talk to their mom".to_string()];
        assert_eq!(format_phrases(&p, JoinStyle::Sentence), "to have a good time. to talk to their mom.");
        assert_eq!(format_phrases(&p, JoinStyle::Semicolon), "to have a good time; to talk to their mom.");
    }

    #[test]
    fn cache_key_ignores_trailing_whitespace() {
        let p = DecodeParams::new();
        let a = cache_key("I lost my job", Relation::XWant, "comet", &p);
        assert_eq!(a, cache_key("I lost my job  \n", Relation::XWant, "comet", &p));
        assert_ne!(a, cache_key("I lost my job", Relation::XReact, "comet", &p));
        let mut q = DecodeParams::new();
        q.insert("beam".into(), "5".into());
        assert_ne!(a, cache_key("I lost my job", Relation::XWant, "comet", &q));
    }

    proptest! {
        #[test]
        fn sets_never_hold_empty_or_duplicate_phrases(raw in proptest::collection::vec("[a-zA-Z .]{0,12}", 0..12)) {
            if let Ok(set) = InferenceSet::from_raw("t", Relation::XReact, &raw, 5, "f", DecodeParams::new()) {
                prop_assert!(!set.phrases.is_empty() && set.phrases.len() <= 5);
                let mut folded: Vec<String> = set.phrases.iter().map(|p| p.to_lowercase()).collect();
                prop_assert!(set.phrases.iter().all(|p| !p.is_empty()));
                folded.sort();
                folded.dedup();
                prop_assert_eq!(folded.len(), set.phrases.len());
            }
        }
    }
}
