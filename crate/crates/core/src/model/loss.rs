//! Reference implementations of the emotion and generation objectives on
//! plain values.

use alloc::vec::Vec;

use super::graph::softmax_in_place;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Mean over the batch of `-ln p(label)`.
pub fn emotion_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: probs.len(),
            actual: labels.len(),
        });
    }
    if probs.is_empty() {
        return Err(Error::Empty("emotion batch".into()));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let py = *p.get(y).ok_or(Error::LabelOutOfRange {
            label: y,
            count: p.len(),
        })?;
        total -= libm::log(py);
    }
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenLoss {
    pub value: f64,
    pub tokens: usize,
    /// No scored token: every reference position was padding.
    pub degenerate: bool,
}

/// Teacher-forced NLL summed over reference positions; `pad_id` positions
/// are masked.
pub fn gen_loss(logits: &Tensor, reference: &[u32], pad_id: u32) -> Result<GenLoss> {
    if logits.rows != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            actual: logits.rows,
        });
    }
    let mut value = 0.0;
    let mut tokens = 0;
    for (r, &y) in reference.iter().enumerate() {
        if y == pad_id {
            continue;
        }
        let y = y as usize;
        if y >= logits.cols {
            return Err(Error::LabelOutOfRange {
                label: y,
                count: logits.cols,
            });
        }
        let p = softmax(logits.row(r));
        value -= libm::log(p[y]);
        tokens += 1;
    }
    if tokens == 0 {
        log::warn!("degenerate batch: reference is all padding");
    }
    Ok(GenLoss {
        value,
        tokens,
        degenerate: tokens == 0,
    })
}
