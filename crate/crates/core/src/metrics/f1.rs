use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

const ENGLISH_V1: &str = include_str!("../../assets/stopwords/english_v1.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopwordList {
    id: String,
    words: BTreeSet<String>,
}

impl StopwordList {
    pub fn new(id: &str, words: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        Self {
            id: id.to_string(),
            words: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
        }
    }

    /// The shipped English list.
    pub fn english_v1() -> Self {
        Self::new(
            "english-v1",
            ENGLISH_V1
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn by_id(id: &str) -> Result<Self> {
        match id {
            "english-v1" => Ok(Self::english_v1()),
            "none" => Ok(Self::new("none", [""; 0])),
            other => Err(Error::pre(alloc::format!("unknown stopword list {other:?}"))),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn contains(&self, w: &str) -> bool {
        self.words.contains(w)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when either side is empty after stopword removal.
    pub degenerate: bool,
}

/// Multiset word overlap after lowercasing, tokenizing and stopword removal.
pub fn overlap_f1(generated: &str, reference: &str, stopwords: &StopwordList) -> F1Score {
    let bag = |s: &str| {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for w in text::words(s).into_iter().filter(|w| !stopwords.contains(w)) {
            *m.entry(w).or_default() += 1;
        }
        m
    };
    let (g, r) = (bag(generated), bag(reference));
    let g_len: usize = g.values().sum();
    let r_len: usize = r.values().sum();
    if g_len == 0 || r_len == 0 {
        return F1Score {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            degenerate: true,
        };
    }
    let common: usize = g
        .iter()
        .map(|(w, c)| r.get(w).map_or(0, |rc| (*c).min(*rc)))
        .sum();
    let precision = common as f64 / g_len as f64;
    let recall = common as f64 / r_len as f64;
    let f1 = if common == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1Score {
        precision,
        recall,
        f1,
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_worked_examples() {
        let sw = StopwordList::new("t", ["my", "the"]);
        let s = overlap_f1("passed my exam happily", "passed the exam", &sw);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 1.0);
        assert!((s.f1 - 0.8).abs() < 1e-12);
        assert_eq!(overlap_f1("I love dogs", "I love dogs", &sw).f1, 1.0);
        assert_eq!(overlap_f1("cats purr", "dogs bark", &sw).f1, 0.0);
    }

    #[test]
    fn degenerate_after_stopwords() {
        let s = overlap_f1("the my", "passed", &StopwordList::new("t", ["my", "the"]));
        assert!(s.degenerate);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn shipped_list_loads() {
        let sw = StopwordList::english_v1();
        assert_eq!(sw.len(), 179);
        assert!(sw.contains("the") && !sw.contains("exam"));
    }

    proptest! {
        #[test]
        fn swapping_sides_swaps_p_and_r(a in "[a-e ]{0,30}", b in "[a-e ]{0,30}") {
            let sw = StopwordList::new("t", ["a"]);
            let x = overlap_f1(&a, &b, &sw);
            let y = overlap_f1(&b, &a, &sw);
            prop_assert_eq!(x.precision, y.recall);
            prop_assert_eq!(x.recall, y.precision);
            prop_assert!((x.f1 - y.f1).abs() < 1e-12);
        }
    }
}
