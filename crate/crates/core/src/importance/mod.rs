//! First-order parameter importance and its structured aggregations.
//!
//! An element's score is `|Σ_batches ∂L/∂θ| · |θ|`, the linearised change in
//! loss from zeroing it. Gradients are summed over every batch before the
//! product is taken, so for a mean-reduced loss the score refers to the
//! whole scoring set rather than to any one batch.
//!
//! Group scores are plain sums over the weights that disappear together:
//! an FFN hidden unit owns a row of `w_in` and a column of `w_out`; an
//! attention channel owns the matching column of `w_q`/`w_k`/`w_v` and row
//! of `w_o` in every head; a model-width coordinate owns its slice of every
//! tensor in the network.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::names::{self, block};
use crate::model::{ModelConfig, ModelState};
use crate::taskgen::{Sample, TrainBatch};
use crate::tensor_core::{Graph, Tensor, Var};

/// Per-element scores, one tensor per parameter, same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementImportance {
    pub scores: BTreeMap<String, Tensor>,
}

impl ElementImportance {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.scores
            .get(name)
            .ok_or_else(|| Error::contract(format!("no importance for `{name}`")))
    }

    /// Scores from already-summed gradients.
    pub fn from_gradients(params: &BTreeMap<String, Tensor>, grads: &BTreeMap<String, Vec<f32>>) -> Result<Self> {
        let mut scores = BTreeMap::new();
        for (name, p) in params {
            let data = match grads.get(name) {
                Some(g) if g.len() == p.numel() => g.iter().zip(p.data()).map(|(g, w)| (g * w).abs()).collect(),
                Some(g) => {
                    return Err(Error::Dimension {
                        op: "element importance",
                        lhs: p.shape().to_vec(),
                        rhs: vec![g.len()],
                    })
                }
                None => vec![0.0; p.numel()],
            };
            scores.insert(name.clone(), Tensor::new(p.shape().to_vec(), data)?);
        }
        Ok(Self { scores })
    }
}

/// Accumulates gradients of `loss(graph, params, batch_index)` over
/// `n_batches` calls and scores every parameter.
///
/// The closure sees each parameter bound as a trainable leaf.
pub fn accumulate_with<F>(params: &BTreeMap<String, Tensor>, n_batches: usize, mut loss: F) -> Result<ElementImportance>
where
    F: FnMut(&mut Graph, &BTreeMap<String, Var>, usize) -> Result<Var>,
{
    if n_batches == 0 {
        return Err(Error::contract("importance needs at least one batch"));
    }
    let mut sums: BTreeMap<String, Vec<f32>> = params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
    for b in 0..n_batches {
        let mut g = Graph::new();
        let vars: BTreeMap<String, Var> = params.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
        let l = loss(&mut g, &vars, b).map_err(|e| match e {
            Error::Numeric(what) => Error::Numeric(format!("{what} in importance batch {b}")),
            other => other,
        })?;
        g.backward(l)?;
        for (name, &v) in &vars {
            let Some(grad) = g.take_grad(v) else { continue };
            if let Some(bad) = grad.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient of {name} (element {bad}) in importance batch {b}"
                )));
            }
            for (s, x) in sums.get_mut(name).expect("bound from params").iter_mut().zip(grad) {
                *s += x;
            }
        }
    }
    ElementImportance::from_gradients(params, &sums)
}

/// Scores under the answer-token cross-entropy averaged over all of `data`.
pub fn accumulate_element_importance(model: &ModelState, data: &[Sample], batch_size: usize) -> Result<ElementImportance> {
    if data.is_empty() {
        return Err(Error::contract("importance on an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::Config("importance batch size must be at least 1".into()));
    }
    model.ensure_consistent()?;
    let chunks: Vec<&[Sample]> = data.chunks(batch_size).collect();
    let inv_n = 1.0 / data.len() as f32;
    accumulate_with(&model.params, chunks.len(), |g, vars, b| {
        let refs: Vec<&Sample> = chunks[b].iter().collect();
        let batch = TrainBatch::build(&refs)?;
        let p = crate::model::BoundParams::from_vars(vars.clone());
        let logits = model.logits(g, &p, &batch.tokens, Some(&batch.rows))?;
        let ce = g.cross_entropy(logits, &batch.targets)?;
        g.scale(ce, inv_n)
    })
}

fn check_block(cfg: &ModelConfig, b: usize) -> Result<()> {
    if b >= cfg.n_blocks {
        return Err(Error::Input(format!("block {b} out of range for {} blocks", cfg.n_blocks)));
    }
    Ok(())
}

/// Entry `n`: `Σ_i elem(w_in[n,i]) + Σ_j elem(w_out[j,n])`.
pub fn aggregate_ffn(elem: &ElementImportance, cfg: &ModelConfig, b: usize) -> Result<Vec<f64>> {
    check_block(cfg, b)?;
    let (d, f) = (cfg.d_model, cfg.d_ffn);
    let w_in = elem.get(&block(b, names::W_IN))?.data();
    let w_out = elem.get(&block(b, names::W_OUT))?.data();
    let mut out = vec![0.0f64; f];
    for (n, acc) in out.iter_mut().enumerate() {
        for i in 0..d {
            *acc += w_in[n * d + i] as f64;
        }
        for j in 0..d {
            *acc += w_out[j * f + n] as f64;
        }
    }
    Ok(out)
}

/// Entry `n`: over heads, column `n` of `w_q`, `w_k`, `w_v` and row `n` of `w_o`.
pub fn aggregate_attention(elem: &ElementImportance, cfg: &ModelConfig, b: usize) -> Result<Vec<f64>> {
    check_block(cfg, b)?;
    let (h, d, dh) = (cfg.n_heads, cfg.d_model, cfg.d_head);
    let q = elem.get(&block(b, names::W_Q))?.data();
    let k = elem.get(&block(b, names::W_K))?.data();
    let v = elem.get(&block(b, names::W_V))?.data();
    let o = elem.get(&block(b, names::W_O))?.data();
    let mut out = vec![0.0f64; dh];
    for (n, acc) in out.iter_mut().enumerate() {
        for head in 0..h {
            for w in [q, k, v] {
                for i in 0..d {
                    *acc += w[(head * d + i) * dh + n] as f64;
                }
            }
            for l in 0..d {
                *acc += o[(head * dh + n) * d + l] as f64;
            }
        }
    }
    Ok(out)
}

/// Entry `n`: every weight that reads or writes model-width coordinate `n`.
///
/// Summation order per block: layer norm 1, `w_q`/`w_k`/`w_v` rows, `w_o`
/// columns, layer norm 2, `w_in` column, `w_out` row. Then the token and
/// position embeddings, the final norm and the untied output head.
pub fn aggregate_in_out(elem: &ElementImportance, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let (h, d, dh, f) = (cfg.n_heads, cfg.d_model, cfg.d_head, cfg.d_ffn);
    let mut out = vec![0.0f64; d];
    let column = |t: &Tensor, out: &mut [f64]| {
        for row in t.data().chunks(d) {
            for (acc, &x) in out.iter_mut().zip(row) {
                *acc += x as f64;
            }
        }
    };
    let vector = |t: &Tensor, out: &mut [f64]| {
        for (acc, &x) in out.iter_mut().zip(t.data()) {
            *acc += x as f64;
        }
    };
    for b in 0..cfg.n_blocks {
        vector(elem.get(&block(b, names::LN1_SCALE))?, &mut out);
        vector(elem.get(&block(b, names::LN1_SHIFT))?, &mut out);
        for part in [names::W_Q, names::W_K, names::W_V] {
            let w = elem.get(&block(b, part))?.data();
            for head in 0..h {
                for (n, acc) in out.iter_mut().enumerate() {
                    let row = &w[(head * d + n) * dh..(head * d + n + 1) * dh];
                    for &x in row {
                        *acc += x as f64;
                    }
                }
            }
        }
        column(elem.get(&block(b, names::W_O))?, &mut out);
        vector(elem.get(&block(b, names::LN2_SCALE))?, &mut out);
        vector(elem.get(&block(b, names::LN2_SHIFT))?, &mut out);
        column(elem.get(&block(b, names::W_IN))?, &mut out);
        let w_out = elem.get(&block(b, names::W_OUT))?.data();
        for (n, acc) in out.iter_mut().enumerate() {
            for &x in &w_out[n * f..(n + 1) * f] {
                *acc += x as f64;
            }
        }
    }
    column(elem.get(names::TOKEN_EMBEDDING)?, &mut out);
    column(elem.get(names::POSITION_EMBEDDING)?, &mut out);
    vector(elem.get(names::FINAL_NORM_SCALE)?, &mut out);
    vector(elem.get(names::FINAL_NORM_SHIFT)?, &mut out);
    if !cfg.tie_embeddings {
        column(elem.get(names::OUTPUT_HEAD)?, &mut out);
    }
    Ok(out)
}

/// Group scores at every granularity the pruner selects from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub ffn_inter: Vec<Vec<f64>>,
    pub att_inter: Vec<Vec<f64>>,
    pub in_out: Vec<f64>,
    /// Total element importance inside each block. Diagnostic only: blocks
    /// are always removed from the end of the stack.
    pub block_scores: Vec<f64>,
}

impl ImportanceReport {
    pub fn from_elements(elem: &ElementImportance, cfg: &ModelConfig) -> Result<Self> {
        let blocks = 0..cfg.n_blocks;
        let block_scores = blocks
            .clone()
            .map(|b| {
                let prefix = format!("blocks.{b}.");
                elem.scores
                    .iter()
                    .filter(|(k, _)| k.starts_with(&prefix))
                    .flat_map(|(_, t)| t.data())
                    .map(|&x| x as f64)
                    .sum()
            })
            .collect();
        Ok(Self {
            ffn_inter: blocks.clone().map(|b| aggregate_ffn(elem, cfg, b)).collect::<Result<_>>()?,
            att_inter: blocks.map(|b| aggregate_attention(elem, cfg, b)).collect::<Result<_>>()?,
            in_out: aggregate_in_out(elem, cfg)?,
            block_scores,
        })
    }

    pub fn compute(model: &ModelState, data: &[Sample], batch_size: usize) -> Result<Self> {
        let elem = accumulate_element_importance(model, data, batch_size)?;
        Self::from_elements(&elem, &model.config)
    }

    /// One tab-separated line per vector: `name \t block \t values`, with
    /// `-` as the block of global vectors.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |name: &str, b: Option<usize>, v: &[f64]| {
            let b = b.map_or("-".to_string(), |b| b.to_string());
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{name}\t{b}\t{}", vals.join(" "));
        };
        for (b, v) in self.ffn_inter.iter().enumerate() {
            line("ffn_inter", Some(b), v);
        }
        for (b, v) in self.att_inter.iter().enumerate() {
            line("att_inter", Some(b), v);
        }
        line("in_out", None, &self.in_out);
        line("block_scores", None, &self.block_scores);
        s
    }
}
