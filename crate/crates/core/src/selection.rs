//! Exact top-k in-context example selection by cosine similarity.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::pre("embedding must have a positive dimension"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::pre("embedding contains a non-finite value"));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|v| v * v).sum())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0) + 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub conversation_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub query_id: String,
    pub k: usize,
    pub entries: Vec<Candidate>,
}

/// Descending similarity, ties broken by ascending conversation id.
pub fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.conversation_id.cmp(&b.conversation_id))
}

/// Exact top-k over the whole index. `k` larger than the index is clamped
/// with a warning.
pub fn top_k(
    query_id: &str,
    query: &EmbeddingVector,
    index: &[(String, EmbeddingVector)],
    k: usize,
) -> Result<RankedCandidates> {
    if k == 0 {
        return Err(Error::pre("k must be at least 1"));
    }
    if index.is_empty() {
        return Err(Error::Empty("selection index".into()));
    }
    let take = if k > index.len() {
        log::warn!("k = {k} exceeds index size {}; clamped", index.len());
        index.len()
    } else {
        k
    };
    let mut scored = Vec::with_capacity(index.len());
    for (id, v) in index {
        scored.push(Candidate {
            conversation_id: id.clone(),
            similarity: cosine(query, v)
                .map_err(|e| Error::pre(format!("candidate {id}: {e}")))?,
        });
    }
    if take < scored.len() {
        scored.select_nth_unstable_by(take - 1, rank_order);
        scored.truncate(take);
    }
    scored.sort_by(rank_order);
    Ok(RankedCandidates {
        query_id: query_id.into(),
        k,
        entries: scored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn orthogonal_candidates_tie_on_id() {
        let index = vec![("b".to_string(), v(&[0.0, -1.0, -1.0])), ("a".to_string(), v(&[0.0, 0.0, -1.0]))];
        let r = top_k("q", &v(&[-1.0, 0.0, 0.0]), &index, 2).unwrap();
        assert_eq!(r.entries[0].conversation_id, "a");
        assert!(r.entries.iter().all(|c| c.similarity.is_sign_positive()));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&v(&[0.6, 0.8]), &v(&[0.6, 0.8])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // 1 / sqrt(2) by hand
        assert!((cosine(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap() - 1.0 / libm::sqrt(2.0)).abs() < 1e-8);
        assert_eq!(cosine(&v(&[1.0]), &v(&[1.0, 0.0])), Err(Error::DimensionMismatch { expected: 1, actual: 2 }));
        assert_eq!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(Error::ZeroNorm));
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn identical_situation_ranks_first_and_k_clamps() {
        let index = vec![
            ("a".to_string(), v(&[1.0, 0.0, 0.0])),
            ("b".to_string(), v(&[0.0, 1.0, 0.0])),
            ("c".to_string(), v(&[0.5, 0.5, 0.0])),
            ("d".to_string(), v(&[0.0, 0.0, 1.0])),
        ];
        let r = top_k("q", &v(&[0.0, 1.0, 0.0]), &index, 10).unwrap();
        assert_eq!(r.entries.len(), 4);
        assert_eq!(r.entries[0].conversation_id, "b");
        assert!((r.entries[0].similarity - 1.0).abs() < 1e-12);
        // a and d tie at 0; id order decides
        assert_eq!(r.entries[2].conversation_id, "a");
        assert_eq!(r.entries[3].conversation_id, "d");
        assert!(top_k("q", &v(&[1.0, 0.0, 0.0]), &[], 1).is_err());
        assert!(top_k("q", &v(&[1.0, 0.0, 0.0]), &index, 0).is_err());
    }

    #[test]
    fn three_candidates_match_exhaustive_argsort() {
        // similarities to (1, 2): c1 = 1, c2 = 2/sqrt(5)/1 ... computed by hand
        let index = vec![
            ("c1".to_string(), v(&[2.0, 4.0])),
            ("c2".to_string(), v(&[0.0, 1.0])),
            ("c3".to_string(), v(&[1.0, 0.0])),
        ];
        let r = top_k("q", &v(&[1.0, 2.0]), &index, 2).unwrap();
        let ids: Vec<_> = r.entries.iter().map(|c| c.conversation_id.as_str()).collect();
        // cos(c2) = 2/sqrt(5) = 0.894 > cos(c3) = 1/sqrt(5) = 0.447
        assert_eq!(ids, ["c1", "c2"]);
    }

    proptest! {
        #[test]
        fn self_similarity_is_one(x in proptest::collection::vec(-100.0f64..100.0, 1..32)) {
            let a = v(&x);
            prop_assume!(a.norm() > 1e-6);
            prop_assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn ranking_ignores_positive_scaling(
            rows in proptest::collection::vec(proptest::collection::vec(-5i32..5, 4), 2..30),
            // powers of two scale exactly, so cosine values stay bit-identical
            scales in proptest::collection::vec(-4i32..7, 30),
            k in 1usize..8,
        ) {
            let index: Vec<(String, EmbeddingVector)> = rows.iter().enumerate()
                .filter(|(_, r)| r.iter().any(|&x| x != 0))
                .map(|(i, r)| (alloc::format!("id{i:03}"), v(&r.iter().map(|&x| x as f64).collect::<Vec<_>>())))
                .collect();
            prop_assume!(!index.is_empty());
            let scaled: Vec<_> = index.iter().zip(&scales).map(|((id, e), s)| (id.clone(), e.scaled(libm::pow(2.0, *s as f64)))).collect();
            let q = v(&[1.0, -2.0, 0.5, 3.0]);
            let a: Vec<_> = top_k("q", &q, &index, k).unwrap().entries.into_iter().map(|c| c.conversation_id).collect();
            let b: Vec<_> = top_k("q", &q.scaled(8.0), &scaled, k).unwrap().entries.into_iter().map(|c| c.conversation_id).collect();
            prop_assert_eq!(a, b);
        }
    }
}
