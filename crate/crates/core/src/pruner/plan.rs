use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceReport;
use crate::model::names::{self, block};
use crate::model::{ModelConfig, ModelState};

/// The four structure families, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Blocks,
    FfnInter,
    AttInter,
    InOut,
}

impl StageKind {
    pub const PIPELINE: [StageKind; 4] = [StageKind::Blocks, StageKind::FfnInter, StageKind::AttInter, StageKind::InOut];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Blocks => "blocks",
            StageKind::FfnInter => "ffn_inter",
            StageKind::AttInter => "att_inter",
            StageKind::InOut => "in_out",
        }
    }

    /// Current size of the structure this kind removes from.
    pub fn extent(self, cfg: &ModelConfig) -> usize {
        match self {
            StageKind::Blocks => cfg.n_blocks,
            StageKind::FfnInter => cfg.d_ffn,
            StageKind::AttInter => cfg.d_head,
            StageKind::InOut => cfg.d_model,
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::PIPELINE
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanTargets {
    /// Block indices, or model-width coordinates.
    Global(Vec<usize>),
    /// One index list per block, all of equal length.
    PerBlock(Vec<Vec<usize>>),
}

/// Which structures to remove in one pruning step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub kind: StageKind,
    pub targets: PlanTargets,
}

impl PrunePlan {
    pub fn blocks(indices: Vec<usize>) -> Self {
        Self {
            kind: StageKind::Blocks,
            targets: PlanTargets::Global(indices),
        }
    }

    /// The last `count` blocks of an `n_blocks`-deep stack.
    pub fn last_blocks(n_blocks: usize, count: usize) -> Self {
        Self::blocks((n_blocks.saturating_sub(count)..n_blocks).collect())
    }

    pub fn ffn(per_block: Vec<Vec<usize>>) -> Self {
        Self {
            kind: StageKind::FfnInter,
            targets: PlanTargets::PerBlock(per_block),
        }
    }

    pub fn attention(per_block: Vec<Vec<usize>>) -> Self {
        Self {
            kind: StageKind::AttInter,
            targets: PlanTargets::PerBlock(per_block),
        }
    }

    pub fn in_out(indices: Vec<usize>) -> Self {
        Self {
            kind: StageKind::InOut,
            targets: PlanTargets::Global(indices),
        }
    }

    /// Structures removed, counted per block for per-block plans.
    pub fn count(&self) -> usize {
        match &self.targets {
            PlanTargets::Global(v) => v.len(),
            PlanTargets::PerBlock(v) => v.first().map_or(0, Vec::len),
        }
    }

    pub fn summary(&self) -> String {
        match &self.targets {
            PlanTargets::Global(v) => format!("{} {:?}", self.kind, v),
            PlanTargets::PerBlock(v) => format!("{} {} per block x {} blocks", self.kind, self.count(), v.len()),
        }
    }

    fn check_indices(&self, what: &str, idx: &[usize], extent: usize) -> Result<Vec<bool>> {
        let mut keep = vec![true; extent];
        for &i in idx {
            if i >= extent {
                return Err(Error::Plan(format!("{} index {i} out of range for {what} of size {extent}", self.kind)));
            }
            if !keep[i] {
                return Err(Error::Plan(format!("{} index {i} listed twice for {what}", self.kind)));
            }
            keep[i] = false;
        }
        if !keep.iter().any(|k| *k) {
            return Err(Error::contract(format!("{} plan would remove all of {what}", self.kind)));
        }
        Ok(keep)
    }

    /// Keep masks, validated against `cfg`: one mask for global plans, one per block otherwise.
    fn keep_masks(&self, cfg: &ModelConfig) -> Result<Vec<Vec<bool>>> {
        let extent = self.kind.extent(cfg);
        match (&self.targets, self.kind) {
            (PlanTargets::Global(idx), StageKind::Blocks | StageKind::InOut) => {
                Ok(vec![self.check_indices(self.kind.name(), idx, extent)?])
            }
            (PlanTargets::PerBlock(lists), StageKind::FfnInter | StageKind::AttInter) => {
                if lists.len() != cfg.n_blocks {
                    return Err(Error::Plan(format!(
                        "{} plan lists {} blocks, model has {}",
                        self.kind,
                        lists.len(),
                        cfg.n_blocks
                    )));
                }
                if lists.iter().any(|l| l.len() != self.count()) {
                    return Err(Error::Plan(format!("{} plan removes unequal counts across blocks", self.kind)));
                }
                lists
                    .iter()
                    .enumerate()
                    .map(|(b, l)| self.check_indices(&format!("block {b}"), l, extent))
                    .collect()
            }
            _ => Err(Error::Plan(format!("{} plan has the wrong target layout", self.kind))),
        }
    }

    /// Configuration after applying this plan.
    pub fn resulting_config(&self, cfg: &ModelConfig) -> Result<ModelConfig> {
        self.keep_masks(cfg)?;
        let n = self.count();
        let mut out = *cfg;
        match self.kind {
            StageKind::Blocks => out.n_blocks -= n,
            StageKind::FfnInter => out.d_ffn -= n,
            StageKind::AttInter => out.d_head -= n,
            StageKind::InOut => out.d_model -= n,
        }
        Ok(out)
    }
}

fn retain(model: &mut ModelState, name: &str, axis: usize, keep: &[bool]) -> Result<()> {
    let t = model.param(name)?.retain_along(axis, keep)?;
    model.params.insert(name.to_string(), t);
    Ok(())
}

/// Physically removes the structures named by `plan`; surviving weights are copied.
pub fn apply_plan(model: &ModelState, plan: &PrunePlan) -> Result<ModelState> {
    model.ensure_consistent()?;
    let masks = plan.keep_masks(&model.config)?;
    let config = plan.resulting_config(&model.config)?;
    let mut out = model.clone();
    out.config = config;
    match plan.kind {
        StageKind::Blocks => {
            let mut params = std::collections::BTreeMap::new();
            let mut next = 0;
            for (b, keep) in masks[0].iter().enumerate() {
                if !*keep {
                    continue;
                }
                let prefix = format!("blocks.{b}.");
                for (name, t) in &model.params {
                    if let Some(part) = name.strip_prefix(&prefix) {
                        params.insert(block(next, part), t.clone());
                    }
                }
                next += 1;
            }
            for (name, t) in &model.params {
                if !name.starts_with("blocks.") {
                    params.insert(name.clone(), t.clone());
                }
            }
            out.params = params;
        }
        StageKind::FfnInter => {
            for (b, keep) in masks.iter().enumerate() {
                retain(&mut out, &block(b, names::W_IN), 0, keep)?;
                retain(&mut out, &block(b, names::W_OUT), 1, keep)?;
            }
        }
        StageKind::AttInter => {
            for (b, keep) in masks.iter().enumerate() {
                for part in [names::W_Q, names::W_K, names::W_V] {
                    retain(&mut out, &block(b, part), 2, keep)?;
                }
                retain(&mut out, &block(b, names::W_O), 1, keep)?;
            }
        }
        StageKind::InOut => {
            let keep = &masks[0];
            for b in 0..config.n_blocks {
                for part in [names::LN1_SCALE, names::LN1_SHIFT, names::LN2_SCALE, names::LN2_SHIFT, names::W_OUT] {
                    retain(&mut out, &block(b, part), 0, keep)?;
                }
                for part in [names::W_Q, names::W_K, names::W_V] {
                    retain(&mut out, &block(b, part), 1, keep)?;
                }
                retain(&mut out, &block(b, names::W_O), 2, keep)?;
                retain(&mut out, &block(b, names::W_IN), 1, keep)?;
            }
            retain(&mut out, names::TOKEN_EMBEDDING, 1, keep)?;
            retain(&mut out, names::POSITION_EMBEDDING, 1, keep)?;
            retain(&mut out, names::FINAL_NORM_SCALE, 0, keep)?;
            retain(&mut out, names::FINAL_NORM_SHIFT, 0, keep)?;
            if !config.tie_embeddings {
                retain(&mut out, names::OUTPUT_HEAD, 1, keep)?;
            }
        }
    }
    if let Some(v) = out.shape_audit().first() {
        return Err(Error::contract(format!("pruned model fails shape audit: {v}")));
    }
    Ok(out)
}

/// Indices of the `count` lowest scores, lower index first on ties, returned ascending.
pub fn lowest(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut picked = order[..count.min(order.len())].to_vec();
    picked.sort_unstable();
    picked
}

/// The `count` least important dimensions: per block for the inter-module
/// kinds, globally for input/output.
pub fn select_dims(report: &ImportanceReport, kind: StageKind, count: usize) -> Result<PrunePlan> {
    let check = |len: usize| {
        if count >= len {
            Err(Error::contract(format!(
                "cannot remove {count} of {len} {kind} dims; at least one must remain"
            )))
        } else {
            Ok(())
        }
    };
    let per_block = |vs: &[Vec<f64>]| -> Result<Vec<Vec<usize>>> {
        vs.iter()
            .map(|v| {
                check(v.len())?;
                Ok(lowest(v, count))
            })
            .collect()
    };
    match kind {
        StageKind::FfnInter => Ok(PrunePlan::ffn(per_block(&report.ffn_inter)?)),
        StageKind::AttInter => Ok(PrunePlan::attention(per_block(&report.att_inter)?)),
        StageKind::InOut => {
            check(report.in_out.len())?;
            Ok(PrunePlan::in_out(lowest(&report.in_out, count)))
        }
        StageKind::Blocks => Err(Error::Plan("blocks are removed from the end, not selected by score".into())),
    }
}

/// Drops the entries a plan removed so the report lines up with the pruned model.
pub(crate) fn shrink_report(report: &mut ImportanceReport, plan: &PrunePlan) {
    fn drop_indices(v: &mut Vec<f64>, idx: &[usize]) {
        let mut i = 0;
        v.retain(|_| {
            let keep = !idx.contains(&i);
            i += 1;
            keep
        });
    }
    match (&plan.targets, plan.kind) {
        (PlanTargets::PerBlock(lists), StageKind::FfnInter) => {
            for (v, idx) in report.ffn_inter.iter_mut().zip(lists) {
                drop_indices(v, idx);
            }
        }
        (PlanTargets::PerBlock(lists), StageKind::AttInter) => {
            for (v, idx) in report.att_inter.iter_mut().zip(lists) {
                drop_indices(v, idx);
            }
        }
        (PlanTargets::Global(idx), StageKind::InOut) => drop_indices(&mut report.in_out, idx),
        _ => {}
    }
}

