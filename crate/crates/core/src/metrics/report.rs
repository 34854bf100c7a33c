use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bleu::{bleu_from_stats, BleuStats};
use crate::knowledge::to_hex;

/// How a report's corpus value is derived from its per-sample entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregation {
    /// `scale * mean(value)`
    Mean { scale: f64 },
    /// `scale * sum(components[0]) / sum(components[1])`
    Ratio { scale: f64 },
    /// `scale * BLEU(sum of components)` with components laid out as
    /// `[cand_len, ref_len, m_1, t_1, .., m_n, t_n]`.
    Bleu { scale: f64, max_order: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric_id: String,
    pub corpus_value: f64,
    pub aggregation: Aggregation,
    pub per_sample: Vec<SampleScore>,
    pub config_digest: String,
}

impl MetricReport {
    /// Recomputes the corpus value from `per_sample`.
    pub fn aggregate(&self) -> f64 {
        let items = &self.per_sample;
        match self.aggregation {
            Aggregation::Mean { scale } => {
                if items.is_empty() {
                    return 0.0;
                }
                scale * items.iter().map(|s| s.value).sum::<f64>() / items.len() as f64
            }
            Aggregation::Ratio { scale } => {
                let num: f64 = items.iter().map(|s| s.components[0]).sum();
                let den: f64 = items.iter().map(|s| s.components[1]).sum();
                if den == 0.0 {
                    0.0
                } else {
                    scale * num / den
                }
            }
            Aggregation::Bleu { scale, max_order } => {
                let mut total = BleuStats::zero(max_order);
                for s in items {
                    total.add(&stats_from_components(&s.components, max_order));
                }
                scale * bleu_from_stats(&total)
            }
        }
    }

    pub fn is_consistent(&self, tol: f64) -> bool {
        (self.aggregate() - self.corpus_value).abs() <= tol
    }
}

pub(crate) fn stats_from_components(c: &[f64], max_order: usize) -> BleuStats {
    let mut s = BleuStats::zero(max_order);
    s.candidate_len = c[0] as usize;
    s.reference_len = c[1] as usize;
    for n in 0..max_order {
        s.matches[n] = c[2 + 2 * n] as usize;
        s.totals[n] = c[3 + 2 * n] as usize;
    }
    s
}

impl BleuStats {
    pub fn to_components(&self) -> Vec<f64> {
        let mut c = Vec::with_capacity(2 + 2 * self.matches.len());
        c.push(self.candidate_len as f64);
        c.push(self.reference_len as f64);
        for (m, t) in self.matches.iter().zip(&self.totals) {
            c.push(*m as f64);
            c.push(*t as f64);
        }
        c
    }
}

/// Digest over every knob that affects a metric's number.
pub fn config_digest(knobs: &[(&str, &str)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in knobs {
        h.update(k.as_bytes());
        h.update([0x1f]);
        h.update(v.as_bytes());
        h.update([0x1e]);
    }
    to_hex(&h.finalize())[..16].into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{sentence_stats, bleu_n};
    use crate::text::tokenize;
    use alloc::vec;
    use alloc::string::ToString;

    #[test]
    fn bleu_report_recomputes() {
        let pairs = vec![
            (tokenize("i am so sorry to hear that"), tokenize("i am sorry to hear that")),
            (tokenize("that is great news"), tokenize("that is wonderful news !")),
        ];
        let per_sample = pairs
            .iter()
            .enumerate()
            .map(|(i, (c, r))| SampleScore {
                sample_id: i.to_string(),
                value: 0.0,
                components: sentence_stats(c, r, 2).to_components(),
            })
            .collect();
        let rep = MetricReport {
            metric_id: "bleu2".into(),
            corpus_value: 100.0 * bleu_n(&pairs, 2).unwrap(),
            aggregation: Aggregation::Bleu { scale: 100.0, max_order: 2 },
            per_sample,
            config_digest: config_digest(&[("n", "2")]),
        };
        assert!(rep.is_consistent(1e-9));
    }

    #[test]
    fn digest_depends_on_knobs() {
        assert_ne!(config_digest(&[("stop", "a")]), config_digest(&[("stop", "b")]));
        assert_eq!(config_digest(&[("x", "1")]).len(), 16);
    }
}
