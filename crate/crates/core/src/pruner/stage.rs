use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::plan::{apply_plan, select_dims, shrink_report, PrunePlan, StageKind};
use crate::distill::{distill_with_targets, DistillConfig, TeacherTargets};
use crate::error::{Error, Result};
use crate::importance::ImportanceReport;
use crate::model::{ModelConfig, ModelState};
use crate::taskgen::{accuracy, Sample};

/// Tolerance, epoch count and per-stage step sizes and budgets.
///
/// Each stage removes `n_*` structures per iteration up to `max_*` in total.
/// Inter-module steps count dimensions per block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub n_b: usize,
    pub max_blocks: usize,
    pub n_ffn: usize,
    pub max_ffn: usize,
    pub n_att: usize,
    pub max_att: usize,
    pub n_d: usize,
    pub max_in_out: usize,
    /// Recompute importance before every iteration instead of once per stage.
    pub refresh_importance: bool,
    pub importance_batch: usize,
}

impl StageConfig {
    /// Settings sized for a 768-wide, 4096-hidden, 48-block model.
    pub fn large_model() -> Self {
        Self {
            alpha: 0.15,
            epochs: 4,
            n_b: 4,
            max_blocks: 40,
            n_ffn: 768,
            max_ffn: 6144,
            n_att: 96,
            max_att: 768,
            n_d: 96,
            max_in_out: 768,
            refresh_importance: true,
            importance_batch: 64,
        }
    }

    /// Budgets proportional to `cfg`: half the blocks in quarter steps,
    /// three quarters of the FFN width, half of each head's channels and a
    /// quarter of the model width in eighths.
    pub fn desk(cfg: &ModelConfig) -> Self {
        let step = |total: usize, div: usize| (total / div).max(1);
        Self {
            alpha: 0.05,
            epochs: 2,
            n_b: step(cfg.n_blocks, 4),
            max_blocks: cfg.n_blocks / 2,
            n_ffn: step(cfg.d_ffn, 4),
            max_ffn: 3 * cfg.d_ffn / 4,
            n_att: step(cfg.d_head, 4),
            max_att: cfg.d_head / 2,
            n_d: step(cfg.d_model, 8),
            max_in_out: cfg.d_model / 4,
            refresh_importance: true,
            importance_batch: 64,
        }
    }

    /// `(per-iteration step, total budget)` of a stage.
    pub fn budget(&self, kind: StageKind) -> (usize, usize) {
        match kind {
            StageKind::Blocks => (self.n_b, self.max_blocks),
            StageKind::FfnInter => (self.n_ffn, self.max_ffn),
            StageKind::AttInter => (self.n_att, self.max_att),
            StageKind::InOut => (self.n_d, self.max_in_out),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        for kind in StageKind::PIPELINE {
            let (step, max) = self.budget(kind);
            if max > 0 && step == 0 {
                return Err(Error::Config(format!("{kind} step must be at least 1")));
            }
        }
        if self.importance_batch == 0 {
            return Err(Error::Config("importance_batch must be at least 1".into()));
        }
        Ok(())
    }

    /// Iterations a stage needs to exhaust its budget.
    pub fn iterations_to_budget(&self, kind: StageKind) -> usize {
        let (step, max) = self.budget(kind);
        if max == 0 {
            0
        } else {
            max.div_ceil(step)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The stage budget was used up.
    Budget,
    /// The measured drop reached the tolerance.
    Gate,
    /// Only one structure of this kind remains.
    Exhausted,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub stage: StageKind,
    pub iteration: usize,
    pub plan: String,
    pub removed: usize,
    /// The step was cut short by the remaining budget or structure.
    pub clipped: bool,
    pub params_before: usize,
    pub params_after: usize,
    pub surgery: SurgeryCheck,
    pub accuracy_after_prune: f64,
    pub accuracy_after_distill: f64,
    /// Accuracy on a prefix of the distillation set, for comparison with the validation gate.
    pub distill_set_accuracy: f64,
    pub distill_loss: Vec<f64>,
}

/// Tensor-level measurements taken right after a plan is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryCheck {
    /// Closed-form count of the plan's resulting configuration.
    pub predicted_params_after: usize,
    /// Elements actually stored before and after surgery.
    pub stored_params_before: usize,
    pub stored_params_after: usize,
    pub audit_violations: usize,
}

impl SurgeryCheck {
    fn measure(before: &ModelState, plan: &PrunePlan, after: &ModelState) -> Result<Self> {
        Ok(Self {
            predicted_params_after: plan.resulting_config(&before.config)?.param_count(),
            stored_params_before: before.actual_param_count(),
            stored_params_after: after.actual_param_count(),
            audit_violations: after.shape_audit().len(),
        })
    }

    /// Stored counts agree with the closed form on both sides of the cut.
    pub fn exact(&self, params_before: usize) -> bool {
        self.audit_violations == 0
            && self.stored_params_before == params_before
            && self.stored_params_after == self.predicted_params_after
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    StageStart {
        stage: StageKind,
        baseline: f64,
        params: usize,
    },
    Iteration(IterationRecord),
    StageEnd {
        stage: StageKind,
        iterations: usize,
        removed: usize,
        reason: StopReason,
        accuracy: f64,
        params: usize,
    },
    Diverged {
        stage: Option<StageKind>,
        iteration: usize,
        detail: String,
    },
    OneShotPrune {
        stage: StageKind,
        plan: String,
        removed: usize,
        params_before: usize,
        params_after: usize,
        surgery: SurgeryCheck,
        accuracy_after_prune: f64,
    },
    OneShotDistill {
        epochs: usize,
        accuracy_after_distill: f64,
        distill_loss: Vec<f64>,
    },
}

/// Wall time of one logged step; kept apart so the log itself is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: Option<StageKind>,
    pub iteration: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    pub timings: Vec<Timing>,
}

impl RunLog {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iterations(&self) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Iteration(it) => Some(it),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn timings_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for t in &self.timings {
            s.push_str(&serde_json::to_string(t)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Data the pruner reads. `distill` must be the set the teacher targets were computed on.
#[derive(Debug, Clone, Copy)]
pub struct PruneData<'a> {
    pub prune: &'a [Sample],
    pub distill: &'a [Sample],
    pub validation: &'a [Sample],
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub kind: StageKind,
    pub model: ModelState,
    /// The model before the iteration that breached the tolerance.
    pub rollback: Option<ModelState>,
    pub stop: StopReason,
    pub iterations: usize,
    pub removed: usize,
    pub baseline: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub model: ModelState,
    pub stages: Vec<StageOutcome>,
    pub log: RunLog,
}

impl PipelineOutcome {
    /// Structures removed per stage, for matching a one-shot counterpart.
    pub fn removals(&self) -> Vec<(StageKind, usize)> {
        self.stages.iter().map(|s| (s.kind, s.removed)).collect()
    }

    pub fn iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Stage(StageKind),
    All,
}

impl Scope {
    pub fn kinds(self) -> Vec<StageKind> {
        match self {
            Scope::Stage(k) => vec![k],
            Scope::All => StageKind::PIPELINE.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OneShotOutcome {
    pub model: ModelState,
    pub epochs: usize,
    pub accuracy: f64,
    pub diverged: Option<String>,
    pub log: RunLog,
}

/// Prune-then-distill driver bound to one frozen teacher.
pub struct Pruner<'a> {
    pub stage: StageConfig,
    pub distill: DistillConfig,
    data: PruneData<'a>,
    targets: TeacherTargets,
}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

impl<'a> Pruner<'a> {
    /// Computes the teacher's answer-position logits on `data.distill` once.
    pub fn new(teacher: &ModelState, stage: StageConfig, distill: DistillConfig, data: PruneData<'a>) -> Result<Self> {
        stage.validate()?;
        distill.validate()?;
        if data.prune.is_empty() || data.distill.is_empty() || data.validation.is_empty() {
            return Err(Error::Config("pruning needs non-empty prune, distill and validation sets".into()));
        }
        let targets = TeacherTargets::compute(teacher, data.distill)?;
        Ok(Self {
            stage,
            distill,
            data,
            targets,
        })
    }

    pub fn performance(&self, model: &ModelState) -> Result<f64> {
        Ok(accuracy(model, self.data.validation)?.overall)
    }

    fn distill_set_performance(&self, model: &ModelState) -> Result<f64> {
        let n = self.data.validation.len().min(self.data.distill.len());
        Ok(accuracy(model, &self.data.distill[..n])?.overall)
    }

    fn importance(&self, model: &ModelState) -> Result<ImportanceReport> {
        ImportanceReport::compute(model, self.data.prune, self.stage.importance_batch)
    }

    fn distill_for(&self, model: &ModelState, epochs: usize, salt: u64) -> Result<crate::distill::DistillOutcome> {
        let cfg = DistillConfig {
            epochs,
            seed: self.distill.seed.wrapping_add(salt),
            ..self.distill
        };
        distill_with_targets(model, &self.targets, self.data.distill, &cfg)
    }

    /// One stage of the tolerance-gated loop.
    ///
    /// The gate is checked before each iteration against the accuracy at
    /// stage start, so the iteration that first breaches `alpha` is kept;
    /// the model before it is returned as `rollback`.
    pub fn run_stage(&self, model: &ModelState, kind: StageKind, log: &mut RunLog) -> Result<StageOutcome> {
        let (step, max) = self.stage.budget(kind);
        let baseline = self.performance(model)?;
        let mut outcome = StageOutcome {
            kind,
            model: model.clone(),
            rollback: None,
            stop: StopReason::Budget,
            iterations: 0,
            removed: 0,
            baseline,
            accuracy: baseline,
        };
        if max == 0 {
            return Ok(outcome);
        }
        log.records.push(LogRecord::StageStart {
            stage: kind,
            baseline,
            params: model.param_count(),
        });
        let mut report = None;
        loop {
            if baseline - outcome.accuracy >= self.stage.alpha {
                outcome.stop = StopReason::Gate;
                break;
            }
            if outcome.removed >= max {
                outcome.stop = StopReason::Budget;
                break;
            }
            let current = &outcome.model;
            let room = kind.extent(&current.config).saturating_sub(1);
            let n = step.min(max - outcome.removed).min(room);
            if n == 0 {
                outcome.stop = StopReason::Exhausted;
                break;
            }
            let started = Instant::now();
            let plan = match kind {
                StageKind::Blocks => PrunePlan::last_blocks(current.config.n_blocks, n),
                _ => {
                    if self.stage.refresh_importance || report.is_none() {
                        report = Some(self.importance(current)?);
                    }
                    let r = report.as_mut().expect("computed above");
                    let plan = select_dims(r, kind, n)?;
                    shrink_report(r, &plan);
                    plan
                }
            };
            let pruned = apply_plan(current, &plan)?;
            let surgery = SurgeryCheck::measure(current, &plan, &pruned)?;
            let after_prune = self.performance(&pruned)?;
            let salt = (kind as u64) * 1_000 + outcome.iterations as u64;
            let distilled = self.distill_for(&pruned, self.stage.epochs, salt)?;
            if let Some(detail) = distilled.diverged {
                log.records.push(LogRecord::Diverged {
                    stage: Some(kind),
                    iteration: outcome.iterations,
                    detail,
                });
                outcome.stop = StopReason::Diverged;
                break;
            }
            let after = self.performance(&distilled.model)?;
            log.records.push(LogRecord::Iteration(IterationRecord {
                stage: kind,
                iteration: outcome.iterations,
                plan: plan.summary(),
                removed: n,
                clipped: n < step,
                params_before: current.param_count(),
                params_after: distilled.model.param_count(),
                surgery,
                accuracy_after_prune: after_prune,
                accuracy_after_distill: after,
                distill_set_accuracy: self.distill_set_performance(&distilled.model)?,
                distill_loss: distilled.epochs.iter().map(|e| e.mean_loss).collect(),
            }));
            log.timings.push(Timing {
                stage: Some(kind),
                iteration: outcome.iterations,
                wall_ms: elapsed_ms(started),
            });
            outcome.rollback = Some(std::mem::replace(&mut outcome.model, distilled.model));
            outcome.accuracy = after;
            outcome.removed += n;
            outcome.iterations += 1;
        }
        if outcome.stop != StopReason::Gate {
            outcome.rollback = None;
        }
        log.records.push(LogRecord::StageEnd {
            stage: kind,
            iterations: outcome.iterations,
            removed: outcome.removed,
            reason: outcome.stop,
            accuracy: outcome.accuracy,
            params: outcome.model.param_count(),
        });
        Ok(outcome)
    }

    /// Blocks, then FFN, then attention, then input/output dimensions.
    pub fn run_pipeline(&self, teacher: &ModelState) -> Result<PipelineOutcome> {
        let mut log = RunLog::default();
        let mut model = teacher.clone();
        let mut stages = Vec::new();
        for kind in StageKind::PIPELINE {
            if self.stage.budget(kind).1 == 0 {
                continue;
            }
            let out = self.run_stage(&model, kind, &mut log)?;
            model = out.model.clone();
            stages.push(out);
        }
        Ok(PipelineOutcome { model, stages, log })
    }

    /// Distillation epochs a gradual run spends when every stage in `scope`
    /// uses its full budget.
    pub fn gradual_epoch_budget(&self, scope: Scope) -> usize {
        scope
            .kinds()
            .into_iter()
            .map(|k| self.stage.iterations_to_budget(k) * self.stage.epochs)
            .sum()
    }

    /// Prunes every stage in `scope` straight to its budget, then distills once
    /// for `epochs` (default: the gradual budget).
    pub fn run_oneshot(&self, model: &ModelState, scope: Scope, epochs: Option<usize>) -> Result<OneShotOutcome> {
        let removals: Vec<(StageKind, usize)> = scope.kinds().into_iter().map(|k| (k, self.stage.budget(k).1)).collect();
        let epochs = epochs.unwrap_or_else(|| self.gradual_epoch_budget(scope));
        self.run_oneshot_with(model, &removals, epochs)
    }

    /// Removes the given number of structures of each kind in one step per
    /// kind, then distills once for `epochs`. Counts are clipped so at least
    /// one structure of each kind survives.
    pub fn run_oneshot_with(&self, model: &ModelState, removals: &[(StageKind, usize)], epochs: usize) -> Result<OneShotOutcome> {
        let mut log = RunLog::default();
        let mut current = model.clone();
        for kind in StageKind::PIPELINE {
            let wanted: usize = removals.iter().filter(|(k, _)| *k == kind).map(|(_, n)| n).sum();
            let n = wanted.min(kind.extent(&current.config).saturating_sub(1));
            if n == 0 {
                continue;
            }
            let started = Instant::now();
            let plan = match kind {
                StageKind::Blocks => PrunePlan::last_blocks(current.config.n_blocks, n),
                _ => select_dims(&self.importance(&current)?, kind, n)?,
            };
            let pruned = apply_plan(&current, &plan)?;
            log.records.push(LogRecord::OneShotPrune {
                stage: kind,
                plan: plan.summary(),
                removed: n,
                params_before: current.param_count(),
                params_after: pruned.param_count(),
                surgery: SurgeryCheck::measure(&current, &plan, &pruned)?,
                accuracy_after_prune: self.performance(&pruned)?,
            });
            log.timings.push(Timing {
                stage: Some(kind),
                iteration: 0,
                wall_ms: elapsed_ms(started),
            });
            current = pruned;
        }
        if log.is_empty() {
            let accuracy = self.performance(&current)?;
            return Ok(OneShotOutcome {
                model: current,
                epochs: 0,
                accuracy,
                diverged: None,
                log,
            });
        }
        let started = Instant::now();
        let distilled = self.distill_for(&current, epochs, 99_999)?;
        if let Some(detail) = &distilled.diverged {
            log.records.push(LogRecord::Diverged {
                stage: None,
                iteration: 0,
                detail: detail.clone(),
            });
        }
        let accuracy = self.performance(&distilled.model)?;
        log.records.push(LogRecord::OneShotDistill {
            epochs,
            accuracy_after_distill: accuracy,
            distill_loss: distilled.epochs.iter().map(|e| e.mean_loss).collect(),
        });
        log.timings.push(Timing {
            stage: None,
            iteration: 0,
            wall_ms: elapsed_ms(started),
        });
        Ok(OneShotOutcome {
            model: distilled.model,
            epochs,
            accuracy,
            diverged: distilled.diverged,
            log,
        })
    }

    /// Gradual pruning of a single structure family, starting from `model`.
    pub fn run_single_stage(&self, model: &ModelState, kind: StageKind) -> Result<PipelineOutcome> {
        let mut log = RunLog::default();
        let out = self.run_stage(model, kind, &mut log)?;
        Ok(PipelineOutcome {
            model: out.model.clone(),
            stages: vec![out],
            log,
        })
    }
}
