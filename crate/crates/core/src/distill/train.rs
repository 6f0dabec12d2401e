use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::taskgen::{accuracy, Sample, TrainBatch};
use crate::tensor_core::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    /// Validation accuracy after the epoch, where one was measured.
    pub val_accuracy: Option<f64>,
}

pub(crate) struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub cosine: bool,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub epochs: Vec<EpochRecord>,
    pub diverged: Option<String>,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// One gradient step's loss and parameter gradients.
fn step_gradients<F>(model: &ModelState, batch: &TrainBatch, indices: &[usize], loss_fn: &mut F) -> Result<(f64, BTreeMap<String, Vec<f32>>)>
where
    F: FnMut(&mut Graph, Var, &TrainBatch, &[usize]) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let logits = model.logits(&mut g, &p, &batch.tokens, Some(&batch.rows))?;
    let loss = loss_fn(&mut g, logits, batch, indices)?;
    let value = g.value(loss).item()? as f64;
    g.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, var) in p.iter() {
        let grad = g
            .take_grad(var)
            .unwrap_or_else(|| vec![0.0; g.value(var).numel()]);
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("gradient of {name}")));
        }
        grads.insert(name.to_string(), grad);
    }
    Ok((value, grads))
}

/// Mini-batch AdamW over `data` for `schedule.epochs` epochs.
///
/// A non-finite loss or gradient stops training; the returned model is the
/// state before the offending step.
pub(crate) fn run_epochs<F>(start: &ModelState, data: &[Sample], schedule: &Schedule, mut loss_fn: F) -> Result<TrainOutcome>
where
    F: FnMut(&mut Graph, Var, &TrainBatch, &[usize]) -> Result<Var>,
{
    let mut model = start.clone();
    let mut records = Vec::new();
    if schedule.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            epochs: records,
            diverged: None,
        });
    }
    if data.is_empty() {
        return Err(Error::contract("training on an empty dataset"));
    }
    let steps_per_epoch = data.len().div_ceil(schedule.batch_size);
    let total = steps_per_epoch * schedule.epochs;
    let mut opt = AdamW::new(schedule.optimizer);
    let mut step = 0;
    for epoch in 0..schedule.epochs {
        let order = epoch_order(data.len(), schedule.seed, epoch);
        let mut loss_sum = 0.0;
        for indices in order.chunks(schedule.batch_size) {
            let refs: Vec<&Sample> = indices.iter().map(|&i| &data[i]).collect();
            let batch = TrainBatch::build(&refs)?;
            let (loss, grads) = match step_gradients(&model, &batch, indices, &mut loss_fn) {
                Ok(v) if v.0.is_finite() => v,
                Ok(_) => {
                    return Ok(diverged(model, records, format!("non-finite loss at epoch {epoch} step {step}")));
                }
                Err(Error::Numeric(what)) => {
                    return Ok(diverged(model, records, format!("{what} at epoch {epoch} step {step}")));
                }
                Err(e) => return Err(e),
            };
            let lr = if schedule.cosine {
                cosine_lr(schedule.learning_rate, step, total)
            } else {
                schedule.learning_rate
            };
            let before = model.clone();
            opt.step(&mut model, &grads, lr);
            if model.params.values().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Ok(diverged(before, records, format!("non-finite weights at epoch {epoch} step {step}")));
            }
            loss_sum += loss;
            step += 1;
        }
        records.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            steps: steps_per_epoch,
            val_accuracy: None,
        });
    }
    Ok(TrainOutcome {
        model,
        epochs: records,
        diverged: None,
    })
}

fn diverged(model: ModelState, epochs: Vec<EpochRecord>, why: String) -> TrainOutcome {
    TrainOutcome {
        model,
        epochs,
        diverged: Some(why),
    }
}

/// Supervised teacher training on answer-token cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub max_epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Linear learning-rate ramp before the cosine decay.
    pub warmup_steps: usize,
    /// Stop after the first epoch whose validation accuracy reaches this.
    pub target_accuracy: Option<f64>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            max_epochs: 8,
            learning_rate: 1e-3,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            seed: 0,
            warmup_steps: 200,
            target_accuracy: Some(0.99),
        }
    }
}

/// Trains `model` with a warmed-up cosine schedule over `max_epochs`,
/// stopping early once `validation` accuracy reaches the target.
pub fn train_teacher(model: &ModelState, train: &[Sample], validation: &[Sample], cfg: &TeacherConfig) -> Result<TrainOutcome> {
    train_teacher_with(model, train, validation, cfg, |_| {})
}

/// [`train_teacher`] with a callback after every epoch.
pub fn train_teacher_with<F>(model: &ModelState, train: &[Sample], validation: &[Sample], cfg: &TeacherConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord),
{
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("teacher batch_size and learning_rate must be positive".into()));
    }
    if train.is_empty() {
        return Err(Error::contract("teacher training on an empty dataset"));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.max_epochs;
    let mut current = model.clone();
    let mut records = Vec::new();
    let mut opt = AdamW::new(cfg.optimizer);
    let mut step = 0usize;
    for epoch in 0..cfg.max_epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for indices in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = indices.iter().map(|&i| &train[i]).collect();
            let batch = TrainBatch::build(&refs)?;
            let mut ce = |g: &mut Graph, logits: Var, b: &TrainBatch, _: &[usize]| {
                let l = g.cross_entropy(logits, &b.targets)?;
                g.scale(l, 1.0 / b.samples as f32)
            };
            let (loss, grads) = match step_gradients(&current, &batch, indices, &mut ce) {
                Ok(v) if v.0.is_finite() => v,
                Ok(_) | Err(Error::Numeric(_)) => {
                    return Ok(diverged(current, records, format!("teacher diverged at epoch {epoch} step {step}")));
                }
                Err(e) => return Err(e),
            };
            let ramp = ((step + 1) as f32 / cfg.warmup_steps.max(1) as f32).min(1.0);
            opt.step(&mut current, &grads, ramp * cosine_lr(cfg.learning_rate, step, total));
            loss_sum += loss;
            step += 1;
        }
        let val_accuracy = if validation.is_empty() {
            None
        } else {
            Some(accuracy(&current, validation)?.overall)
        };
        records.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            steps: steps_per_epoch,
            val_accuracy,
        });
        on_epoch(records.last().expect("just pushed"));
        if let (Some(target), Some(acc)) = (cfg.target_accuracy, val_accuracy) {
            if acc >= target {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: current,
        epochs: records,
        diverged: None,
    })
}
