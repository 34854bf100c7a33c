use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    let take = if n == 0 || tokens.len() < n { 0 } else { tokens.len() - n + 1 };
    tokens.windows(n.max(1)).take(take)
}

/// Per-response `(novel, total)` n-gram counts in corpus order, where
/// `novel` counts n-grams not seen in any earlier response (or earlier in the
/// same response). Summing `novel` gives the pooled unique count.
pub fn distinct_contributions(responses: &[Vec<String>], n: usize) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Err(Error::pre("distinct-n needs n >= 1"));
    }
    if responses.is_empty() {
        return Err(Error::Empty("response set".into()));
    }
    let mut seen: BTreeSet<&[String]> = BTreeSet::new();
    Ok(responses
        .iter()
        .map(|r| {
            let mut novel = 0;
            let mut total = 0;
            for g in ngrams(r, n) {
                total += 1;
                if seen.insert(g) {
                    novel += 1;
                }
            }
            (novel, total)
        })
        .collect())
}

/// Distinct-n over the pooled response set, as a percentage in [0, 100].
pub fn distinct_n(responses: &[Vec<String>], n: usize) -> Result<f64> {
    let parts = distinct_contributions(responses, n)?;
    let unique: usize = parts.iter().map(|p| p.0).sum();
    let total: usize = parts.iter().map(|p| p.1).sum();
    Ok(if total == 0 {
        0.0
    } else {
        100.0 * unique as f64 / total as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;
    use proptest::prelude::*;

    fn toks(xs: &[&str]) -> Vec<Vec<String>> {
        xs.iter().map(|s| tokenize(s)).collect()
    }

    #[test]
    fn hand_counts() {
        assert_eq!(distinct_n(&toks(&["a b c", "d e"]), 1).unwrap(), 100.0);
        let d = distinct_n(&toks(&["a a a"]), 1).unwrap();
        assert!((d - 100.0 / 3.0).abs() < 1e-12);
        // bigrams: (a a), (a a) -> 1 unique of 2
        assert_eq!(distinct_n(&toks(&["a a a"]), 2).unwrap(), 50.0);
        assert_eq!(distinct_n(&toks(&["a"]), 2).unwrap(), 0.0);
        assert!(distinct_n(&[], 1).is_err());
        assert!(distinct_n(&toks(&["a"]), 0).is_err());
    }

    proptest! {
        #[test]
        fn bounded_and_self_concat_never_increases(
            rs in proptest::collection::vec("[a-d ]{0,20}", 1..10), n in 1usize..3
        ) {
            let t: Vec<Vec<String>> = rs.iter().map(|s| tokenize(s)).collect();
            let d = distinct_n(&t, n).unwrap();
            prop_assert!((0.0..=100.0).contains(&d));
            let doubled: Vec<Vec<String>> = t.iter().chain(&t).cloned().collect();
            prop_assert!(distinct_n(&doubled, n).unwrap() <= d + 1e-12);
        }
    }
}
