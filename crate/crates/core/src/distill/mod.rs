//! Teacher → student distillation.
//!
//! The default objective sums, over answer positions, the KL divergence
//! from the teacher's next-token distribution to the student's, plus a
//! γ-weighted hinge `max(0, s_top_wrong − s_correct)` on the student's own
//! log-probabilities. No ground-truth cross-entropy is used unless the
//! `hard_label` variant is selected, which adds label cross-entropy to the
//! KL term in place of the hinge.

mod optim;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use train::{train_teacher, train_teacher_with, EpochRecord, TeacherConfig, TrainOutcome};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::taskgen::{Sample, TrainBatch};
use crate::tensor_core::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    KlOnly,
    KlPairwise,
    HardLabel,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [LossVariant::KlOnly, LossVariant::HardLabel, LossVariant::KlPairwise];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::KlOnly => "kl_only",
            LossVariant::KlPairwise => "kl_pairwise",
            LossVariant::HardLabel => "hard_label",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss variant `{s}`")))
    }
}

/// Which token the pairwise hinge treats as correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectToken {
    /// Ground-truth answer token from the dataset.
    Label,
    /// The teacher's most likely token.
    TeacherArgmax,
}

impl FromStr for CorrectToken {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" => Ok(Self::Label),
            "teacher_argmax" => Ok(Self::TeacherArgmax),
            _ => Err(Error::Config(format!("unknown correct-token source `{s}`"))),
        }
    }
}

impl fmt::Display for CorrectToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Label => "label",
            Self::TeacherArgmax => "teacher_argmax",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub gamma: f32,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub cosine: bool,
    pub loss_variant: LossVariant,
    pub correct_token: CorrectToken,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            learning_rate: 5e-4,
            batch_size: 64,
            epochs: 1,
            cosine: true,
            loss_variant: LossVariant::KlPairwise,
            correct_token: CorrectToken::Label,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("gamma must be a finite value >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// KL sum over rows plus `gamma` times the pairwise hinge sum.
///
/// `gamma == 0` returns the KL node itself.
pub fn distill_loss(g: &mut Graph, student_logits: Var, teacher_logits: &Tensor, correct: &[u32], gamma: f32) -> Result<Var> {
    let kl = g.kl_div(student_logits, teacher_logits)?;
    if gamma == 0.0 {
        // still validate the correct-token ids
        let vocab = *g.value(student_logits).shape().last().unwrap_or(&0);
        if let Some(&bad) = correct.iter().find(|&&c| c as usize >= vocab) {
            return Err(Error::Input(format!("correct token {bad} exceeds vocabulary size {vocab}")));
        }
        return Ok(kl);
    }
    let hinge = g.pairwise_hinge(student_logits, correct)?;
    let hinge = g.scale(hinge, gamma)?;
    g.add(kl, hinge)
}

/// Summed cross-entropy against dataset labels.
pub fn hard_label_loss(g: &mut Graph, student_logits: Var, correct: &[u32]) -> Result<Var> {
    g.cross_entropy(student_logits, correct)
}

/// Graph-free evaluation of [`distill_loss`].
pub fn distill_loss_value(student_logits: &Tensor, teacher_logits: &Tensor, correct: &[u32], gamma: f32) -> Result<f32> {
    let mut g = Graph::inference();
    let s = g.constant(student_logits.clone());
    let l = distill_loss(&mut g, s, teacher_logits, correct, gamma)?;
    g.value(l).item()
}

/// Teacher logits at every answer position of a dataset, computed once.
/// The teacher is frozen, so these equal per-batch recomputation.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    vocab: usize,
    // per sample: [answer_len, vocab]
    logits: Vec<Vec<f32>>,
}

impl TeacherTargets {
    pub fn compute(teacher: &ModelState, data: &[Sample]) -> Result<Self> {
        let vocab = teacher.config.vocab_size;
        let mut logits = Vec::with_capacity(data.len());
        for chunk in data.chunks(256) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = TrainBatch::build(&refs)?;
            let mut g = Graph::inference();
            let p = teacher.bind(&mut g, false);
            let out = teacher.logits(&mut g, &p, &batch.tokens, Some(&batch.rows))?;
            let mut rows = g.value(out).data().chunks(vocab);
            for s in chunk {
                let mut v = Vec::with_capacity(s.answer.len() * vocab);
                for _ in 0..s.answer.len() {
                    v.extend_from_slice(rows.next().expect("one logit row per answer token"));
                }
                logits.push(v);
            }
        }
        Ok(Self { vocab, logits })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Stacked `[rows, vocab]` teacher logits for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::new();
        for &i in indices {
            data.extend_from_slice(&self.logits[i]);
        }
        let rows = data.len() / self.vocab.max(1);
        Tensor::new(vec![rows, self.vocab], data)
    }
}

fn argmax_rows(t: &Tensor) -> Vec<u32> {
    let vocab = t.shape()[1];
    t.data()
        .chunks(vocab)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// Result of a distillation call.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub model: ModelState,
    pub epochs: Vec<EpochRecord>,
    /// Set when a non-finite loss aborted training; `model` is then the last finite state.
    pub diverged: Option<String>,
}

/// `cfg.epochs` epochs of mini-batch AdamW on the selected loss variant.
pub fn distill_with_targets(student: &ModelState, targets: &TeacherTargets, data: &[Sample], cfg: &DistillConfig) -> Result<DistillOutcome> {
    cfg.validate()?;
    if targets.len() != data.len() {
        return Err(Error::contract(format!(
            "{} teacher targets for {} samples",
            targets.len(),
            data.len()
        )));
    }
    student.ensure_consistent()?;
    let variant = cfg.loss_variant;
    let gamma = match variant {
        LossVariant::KlOnly => 0.0,
        _ => cfg.gamma,
    };
    let schedule = train::Schedule {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        cosine: cfg.cosine,
        optimizer: cfg.optimizer,
        seed: cfg.seed,
    };
    let out = train::run_epochs(student, data, &schedule, |g, logits, batch, indices| {
        let teacher = targets.gather(indices)?;
        let loss = match variant {
            LossVariant::HardLabel => {
                let kl = g.kl_div(logits, &teacher)?;
                let ce = hard_label_loss(g, logits, &batch.targets)?;
                g.add(kl, ce)?
            }
            LossVariant::KlOnly | LossVariant::KlPairwise => {
                let correct = match cfg.correct_token {
                    CorrectToken::Label => batch.targets.clone(),
                    CorrectToken::TeacherArgmax => argmax_rows(&teacher),
                };
                distill_loss(g, logits, &teacher, &correct, gamma)?
            }
        };
        g.scale(loss, 1.0 / batch.samples as f32)
    })?;
    Ok(DistillOutcome {
        model: out.model,
        epochs: out.epochs,
        diverged: out.diverged,
    })
}

/// Distills `student` toward a frozen `teacher` on `data`.
pub fn distill_epochs(student: &ModelState, teacher: &ModelState, data: &[Sample], cfg: &DistillConfig) -> Result<DistillOutcome> {
    if cfg.epochs == 0 {
        return Ok(DistillOutcome {
            model: student.clone(),
            epochs: Vec::new(),
            diverged: None,
        });
    }
    let targets = TeacherTargets::compute(teacher, data)?;
    distill_with_targets(student, &targets, data, cfg)
}
