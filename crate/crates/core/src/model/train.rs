use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::optim::Adam;
use super::params::seeded;
use super::t5::{CausalityT5, TrainExample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_emotion: f64,
    pub l_gen: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_l_emotion: f64,
    pub mean_l_gen: f64,
    pub mean_total: f64,
    pub valid_total: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// Seeded minibatch training with Adam. `on_epoch` runs after every epoch,
/// e.g. to write a checkpoint. Stops after `max_steps` optimizer steps when
/// given.
pub fn train(
    model: &mut CausalityT5,
    train_set: &[TrainExample],
    valid_set: &[TrainExample],
    max_steps: Option<usize>,
    mut on_epoch: impl FnMut(&EpochLog, &CausalityT5) -> Result<()>,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let cfg = model.config.clone();
    let mut opt = Adam::new(&model.params, cfg.learning_rate, cfg.grad_clip);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seeded(cfg.seed.wrapping_add(1 + epoch as u64)));
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (grads, b) = {
                let mut g = Graph::new(&model.params);
                let (total, b) = model.batch_loss(&mut g, &batch)?;
                if !b.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        l_emotion: b.l_emotion,
                        l_gen: b.l_gen,
                    });
                }
                (g.backward(total), b)
            };
            let grad_norm = opt.step(&mut model.params, &grads);
            report.steps.push(StepLog {
                epoch,
                step,
                l_emotion: b.l_emotion,
                l_gen: b.l_gen,
                total: b.total,
                grad_norm,
            });
            log::debug!("epoch {epoch} step {step}: total {:.4}", b.total);
            sums.0 += b.l_emotion;
            sums.1 += b.l_gen;
            sums.2 += b.total;
            batches += 1;
            step += 1;
        }
        let n = batches.max(1) as f64;
        let valid_total = if valid_set.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, valid_set)?)
        };
        let log = EpochLog {
            epoch,
            mean_l_emotion: sums.0 / n,
            mean_l_gen: sums.1 / n,
            mean_total: sums.2 / n,
            valid_total,
        };
        report.epochs.push(log);
        on_epoch(&log, model)?;
    }
    Ok(report)
}

/// Mean batch total loss without updating weights.
pub fn evaluate_loss(model: &CausalityT5, set: &[TrainExample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for chunk in set.chunks(model.config.batch_size) {
        let mut g = Graph::new(&model.params);
        let (_, b) = model.batch_loss(&mut g, chunk)?;
        sum += b.total;
        n += 1;
    }
    Ok(sum / n.max(1) as f64)
}

/// Anything that scores reference responses under teacher forcing.
pub trait TeacherForced {
    /// Summed NLL and scored-token count for one example.
    fn reference_nll(&self, ex: &TrainExample) -> Result<(f64, usize)>;
}

impl TeacherForced for CausalityT5 {
    fn reference_nll(&self, ex: &TrainExample) -> Result<(f64, usize)> {
        self.response_nll(&ex.input, &ex.response)
    }
}

/// Predicts every token with probability `1 / vocab_size`.
pub struct UniformModel {
    pub vocab_size: usize,
}

impl TeacherForced for UniformModel {
    fn reference_nll(&self, ex: &TrainExample) -> Result<(f64, usize)> {
        let n = ex.response.len() + 1;
        Ok((n as f64 * libm::log(self.vocab_size as f64), n))
    }
}

/// `exp` of the mean per-token NLL over all reference responses.
pub fn perplexity<M: TeacherForced + ?Sized>(model: &M, samples: &[TrainExample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("perplexity test set".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0;
    for ex in samples {
        let (l, n) = model.reference_nll(ex)?;
        nll += l;
        tokens += n;
    }
    Ok(libm::exp(nll / tokens.max(1) as f64))
}
