use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::{cosine, EmbeddingVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BertScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Greedy-matching BERTScore over contextual token embeddings: every
/// candidate token is matched to its most similar reference token for
/// precision, and vice versa for recall. No idf weighting or baseline
/// rescaling.
pub fn bert_score(candidate: &[EmbeddingVector], reference: &[EmbeddingVector]) -> Result<BertScore> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Empty("token embeddings".into()));
    }
    let sims: Vec<Vec<f64>> = candidate
        .iter()
        .map(|c| reference.iter().map(|r| cosine(c, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let precision = sims
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / candidate.len() as f64;
    let recall = (0..reference.len())
        .map(|j| sims.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / reference.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BertScore {
        precision,
        recall,
        f1,
    })
}
