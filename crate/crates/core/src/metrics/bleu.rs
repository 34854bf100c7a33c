use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sufficient statistics for corpus BLEU: lengths plus clipped matches and
/// candidate n-gram totals per order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BleuStats {
    pub candidate_len: usize,
    pub reference_len: usize,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
}

impl BleuStats {
    pub fn zero(max_order: usize) -> Self {
        Self {
            candidate_len: 0,
            reference_len: 0,
            matches: vec![0; max_order],
            totals: vec![0; max_order],
        }
    }

    pub fn add(&mut self, other: &BleuStats) {
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
    }
}

fn counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

pub fn sentence_stats(candidate: &[String], reference: &[String], max_order: usize) -> BleuStats {
    let mut s = BleuStats::zero(max_order);
    s.candidate_len = candidate.len();
    s.reference_len = reference.len();
    for n in 1..=max_order {
        let c = counts(candidate, n);
        let r = counts(reference, n);
        s.totals[n - 1] = c.values().sum();
        s.matches[n - 1] = c
            .iter()
            .map(|(g, k)| r.get(g).map_or(0, |rk| (*k).min(*rk)))
            .sum();
    }
    s
}

/// BLEU in [0, 1] from accumulated statistics: uniform weights, brevity
/// penalty, no smoothing.
pub fn bleu_from_stats(s: &BleuStats) -> f64 {
    let orders = s.matches.len();
    if orders == 0 || s.candidate_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (m, t) in s.matches.iter().zip(&s.totals) {
        if *m == 0 || *t == 0 {
            return 0.0;
        }
        log_sum += libm::log(*m as f64 / *t as f64);
    }
    let bp = if s.candidate_len < s.reference_len {
        libm::exp(1.0 - s.reference_len as f64 / s.candidate_len as f64)
    } else {
        1.0
    };
    bp * libm::exp(log_sum / orders as f64)
}

/// Corpus BLEU over tokenized (candidate, reference) pairs.
pub fn bleu_n(pairs: &[(Vec<String>, Vec<String>)], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::pre("BLEU order must be at least 1"));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("BLEU corpus".into()));
    }
    let mut total = BleuStats::zero(n);
    for (c, r) in pairs {
        total.add(&sentence_stats(c, r, n));
    }
    Ok(bleu_from_stats(&total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn pair(c: &str, r: &str) -> (Vec<String>, Vec<String>) {
        (tokenize(c), tokenize(r))
    }

    #[test]
    fn identity_is_one() {
        let p = [pair("i am so glad you get to see her", "i am so glad you get to see her")];
        for n in 2..=4 {
            assert!((bleu_n(&p, n).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_four_gram_overlap_is_zero() {
        let p = [pair("that is so sad to hear", "so sad to lose a friend")];
        assert!(bleu_n(&p, 3).unwrap() > 0.0);
        assert_eq!(bleu_n(&p, 4).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_by_hand() {
        // 2-token candidate, 4-token reference, all unigrams/bigrams match
        let p = [pair("a b", "a b c d")];
        let expected = libm::exp(1.0 - 2.0);
        assert!((bleu_n(&p, 2).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        // "the the the" vs "the cat": unigram matches clipped to 1 of 3
        let s = sentence_stats(&tokenize("the the the"), &tokenize("the cat"), 1);
        assert_eq!((s.matches[0], s.totals[0]), (1, 3));
    }

    #[test]
    fn errors() {
        assert!(bleu_n(&[], 4).is_err());
        assert!(bleu_n(&[pair("a", "a")], 0).is_err());
    }
}
