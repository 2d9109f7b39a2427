use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LmError, TinyLm, TokenStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Seeds the per-epoch document shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-5,
            schedule: Schedule::Cosine,
            weight_decay: 1e-6,
            batch_size: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_epsilon: 1e-5,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let err = |m: &str| Err(LmError::TrainConfig(m.to_string()));
        if self.epochs < 1 {
            return err("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return err("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be finite and non-negative");
        }
        if self.weight_decay < 0.0 {
            return err("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return err("adam betas must lie in [0, 1)");
        }
        if self.adam_epsilon <= 0.0 {
            return err("adam_epsilon must be positive");
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return err("grad_clip must be positive");
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` out of `total` optimizer steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let progress = step as f64 / total.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Summed loss, averaged over the documents of the batch.
    pub loss: f64,
    /// Loss per predicted token across the batch.
    pub per_token_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<LossRecord>,
    pub steps: usize,
    pub skipped_documents: usize,
}

/// AdamW over the documents, shuffled afresh each epoch. Documents shorter
/// than two tokens are skipped. The model is updated in place.
pub fn train(model: &mut TinyLm, docs: &[TokenStream], config: &TrainConfig) -> Result<TrainOutcome, LmError> {
    config.validate()?;
    let usable: Vec<&TokenStream> = docs.iter().filter(|d| d.len() >= 2).collect();
    if usable.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    let steps_per_epoch = usable.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let n = model.num_params();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut history = Vec::with_capacity(total);
    let mut step = 0;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let frozen: &TinyLm = model;
            let parts =
                batch.par_iter().map(|&i| frozen.loss_and_grad(usable[i].ids())).collect::<Result<Vec<_>, _>>()?;
            // summed in batch order so the result does not depend on threading
            let mut grad = vec![0.0; n];
            let (mut loss, mut predicted) = (0.0, 0usize);
            for (&i, (l, g)) in batch.iter().zip(parts) {
                loss += l;
                predicted += usable[i].len() - 1;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            if !loss.is_finite() {
                return Err(LmError::NonFinite { step });
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if let Some(clip) = config.grad_clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }

            let lr = config.lr_at(step, total);
            let t = (step + 1) as i32;
            let bc1 = 1.0 - config.adam_beta1.powi(t);
            let bc2 = 1.0 - config.adam_beta2.powi(t);
            for (((p, g), mi), vi) in model.params_mut().iter_mut().zip(&grad).zip(&mut m).zip(&mut v) {
                *mi = config.adam_beta1 * *mi + (1.0 - config.adam_beta1) * g;
                *vi = config.adam_beta2 * *vi + (1.0 - config.adam_beta2) * g * g;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + config.adam_epsilon);
                *p -= lr * (update + config.weight_decay * *p);
            }

            history.push(LossRecord { step, loss: loss * inv, per_token_loss: loss / predicted as f64, lr });
            if step % 100 == 0 {
                log::debug!("step {step}/{total} loss/token {:.4} lr {lr:.3e}", loss / predicted as f64);
            }
            step += 1;
        }
    }
    Ok(TrainOutcome { history, steps: step, skipped_documents: docs.len() - usable.len() })
}
