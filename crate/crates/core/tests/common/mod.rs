//! Shared helpers for the integration tests: a straight-line f64 forward
//! pass written independently of the tape, plus small loss oracles.
#![allow(dead_code)]

use std::collections::BTreeMap;

use prunekit::model::names;
use prunekit::{ModelConfig, ModelState, Tensor, TokenBatch};
use rand::Rng;

const LN_EPS: f64 = 1e-5;

pub struct Reference {
    pub cfg: ModelConfig,
    pub p: BTreeMap<String, Vec<f64>>,
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Layer norm restricted to `active` dims; inactive outputs are zero.
fn masked_norm(x: &[f64], scale: &[f64], shift: &[f64], active: &[bool]) -> Vec<f64> {
    let n = active.iter().filter(|a| **a).count() as f64;
    let mean = x.iter().zip(active).filter(|(_, a)| **a).map(|(v, _)| v).sum::<f64>() / n;
    let var = x
        .iter()
        .zip(active)
        .filter(|(_, a)| **a)
        .map(|(v, _)| (v - mean).powi(2))
        .sum::<f64>()
        / n;
    let rs = 1.0 / (var + LN_EPS).sqrt();
    (0..x.len())
        .map(|i| if active[i] { (x[i] - mean) * rs * scale[i] + shift[i] } else { 0.0 })
        .collect()
}

impl Reference {
    pub fn new(model: &ModelState) -> Self {
        let p = model
            .params
            .iter()
            .map(|(k, t)| (k.clone(), t.data().iter().map(|&v| v as f64).collect()))
            .collect();
        Self { cfg: model.config, p }
    }

    fn w(&self, name: &str) -> &[f64] {
        &self.p[name]
    }

    fn bw(&self, b: usize, part: &str) -> &[f64] {
        &self.p[&names::block(b, part)]
    }

    /// Logits `[seq][vocab]` for one sequence.
    pub fn logits(&self, ids: &[u32]) -> Vec<Vec<f64>> {
        self.logits_masked(ids, &vec![true; self.cfg.d_model])
    }

    /// Forward pass of the model with residual dims outside `active` held at
    /// zero and every layer norm computed over the active dims only.
    pub fn logits_masked(&self, ids: &[u32], active: &[bool]) -> Vec<Vec<f64>> {
        self.hidden_masked(ids, active).iter().map(|h| self.head(h)).collect()
    }

    fn head(&self, hn: &[f64]) -> Vec<f64> {
        let c = &self.cfg;
        let head = if c.tie_embeddings {
            self.w(names::TOKEN_EMBEDDING)
        } else {
            self.w(names::OUTPUT_HEAD)
        };
        (0..c.vocab_size)
            .map(|t| hn.iter().zip(&head[t * c.d_model..(t + 1) * c.d_model]).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Final normalized hidden states, one per position.
    pub fn hidden_masked(&self, ids: &[u32], active: &[bool]) -> Vec<Vec<f64>> {
        let c = &self.cfg;
        let (d, h, dh, f) = (c.d_model, c.n_heads, c.d_head, c.d_ffn);
        let scale = 1.0 / (c.attn_scale_dim as f64).sqrt();
        let tok = self.w(names::TOKEN_EMBEDDING);
        let pos = self.w(names::POSITION_EMBEDDING);
        let mask = |x: &mut Vec<f64>| x.iter_mut().zip(active).for_each(|(x, a)| *x = if *a { *x } else { 0.0 });
        let mut xs: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                let mut x: Vec<f64> = (0..d).map(|i| tok[id as usize * d + i] + pos[t * d + i]).collect();
                mask(&mut x);
                x
            })
            .collect();
        let n = ids.len();
        for b in 0..c.n_blocks {
            let hs: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| masked_norm(x, self.bw(b, names::LN1_SCALE), self.bw(b, names::LN1_SHIFT), active))
                .collect();
            let proj = |w: &[f64], x: &[f64], head: usize| -> Vec<f64> {
                (0..dh)
                    .map(|j| (0..d).map(|i| x[i] * w[(head * d + i) * dh + j]).sum())
                    .collect()
            };
            let wo = self.bw(b, names::W_O);
            let mut outs = vec![vec![0.0; d]; n];
            for head in 0..h {
                let q: Vec<Vec<f64>> = hs.iter().map(|x| proj(self.bw(b, names::W_Q), x, head)).collect();
                let k: Vec<Vec<f64>> = hs.iter().map(|x| proj(self.bw(b, names::W_K), x, head)).collect();
                let vv: Vec<Vec<f64>> = hs.iter().map(|x| proj(self.bw(b, names::W_V), x, head)).collect();
                for i in 0..n {
                    let s: Vec<f64> = (0..=i)
                        .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let mut ctx = vec![0.0; dh];
                    for j in 0..=i {
                        for (c, val) in ctx.iter_mut().zip(&vv[j]) {
                            *c += e[j] / z * val;
                        }
                    }
                    for kk in 0..d {
                        outs[i][kk] += (0..dh).map(|j| ctx[j] * wo[(head * dh + j) * d + kk]).sum::<f64>();
                    }
                }
            }
            for (x, mut o) in xs.iter_mut().zip(outs) {
                mask(&mut o);
                x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);
            }
            let (w_in, w_out) = (self.bw(b, names::W_IN), self.bw(b, names::W_OUT));
            for x in xs.iter_mut() {
                let hn = masked_norm(x, self.bw(b, names::LN2_SCALE), self.bw(b, names::LN2_SHIFT), active);
                let u: Vec<f64> = (0..f)
                    .map(|r| gelu((0..d).map(|i| w_in[r * d + i] * hn[i]).sum()))
                    .collect();
                let mut o: Vec<f64> = (0..d).map(|k| (0..f).map(|r| w_out[k * f + r] * u[r]).sum()).collect();
                mask(&mut o);
                x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);
            }
        }
        xs.iter()
            .map(|x| masked_norm(x, self.w(names::FINAL_NORM_SCALE), self.w(names::FINAL_NORM_SHIFT), active))
            .collect()
    }

    /// Logits for the flattened `rows` of a batch, matching the tape's row layout.
    pub fn batch_rows(&self, tokens: &TokenBatch, rows: &[usize]) -> Vec<Vec<f64>> {
        let all = vec![true; self.cfg.d_model];
        let last = rows.iter().max().map_or(0, |r| r / tokens.seq + 1);
        let per_seq: Vec<Vec<Vec<f64>>> = tokens
            .ids
            .chunks(tokens.seq)
            .take(last)
            .map(|s| self.hidden_masked(s, &all))
            .collect();
        rows.iter().map(|&r| self.head(&per_seq[r / tokens.seq][r % tokens.seq])).collect()
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn ce(row: &[f64], target: u32) -> f64 {
    -log_softmax(row)[target as usize]
}

/// KL(teacher ‖ student) for one row of logits.
pub fn kl(student: &[f64], teacher: &[f64]) -> f64 {
    let (ls, lt) = (log_softmax(student), log_softmax(teacher));
    lt.iter().zip(&ls).map(|(t, s)| t.exp() * (t - s)).sum()
}

pub fn hinge(row: &[f64], correct: u32) -> f64 {
    let c = correct as usize;
    let best = row
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != c)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    (best - row[c]).max(0.0)
}

/// Random model with weights large enough that every nonlinearity matters.
pub fn lively_model<R: Rng>(cfg: ModelConfig, rng: &mut R) -> ModelState {
    let mut m = ModelState::init(cfg, rng.gen()).unwrap();
    for (name, t) in m.params.iter_mut() {
        let norm_scale = name.ends_with(".scale");
        let norm_shift = name.ends_with(".shift");
        for v in t.data_mut() {
            *v = if norm_scale {
                1.0 + rng.gen_range(-0.3..0.3)
            } else if norm_shift {
                rng.gen_range(-0.2..0.2)
            } else {
                *v * 15.0
            };
        }
    }
    m
}

/// Maximum absolute difference between a tensor and nested f64 rows.
pub fn max_diff(t: &Tensor, rows: &[Vec<f64>]) -> f64 {
    t.data()
        .iter()
        .zip(rows.iter().flatten())
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max)
}

pub fn within_fd_tolerance(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= 1e-5 || err <= 1e-3 * numeric.abs()
}

pub struct FdReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_abs: f64,
}

/// Compares every tape gradient of `tape_loss` against central differences
/// of `ref_loss` evaluated on the f64 reference, step `h`.
pub fn finite_difference_check<T, R>(model: &ModelState, tokens: &TokenBatch, rows: &[usize], h: f64, mut tape_loss: T, ref_loss: R) -> FdReport
where
    T: FnMut(&mut prunekit::Graph, prunekit::Var) -> prunekit::Result<prunekit::Var>,
    R: Fn(&[Vec<f64>]) -> f64,
{
    let mut g = prunekit::Graph::new();
    let p = model.bind(&mut g, true);
    let logits = model.logits(&mut g, &p, tokens, Some(rows)).unwrap();
    let loss = tape_loss(&mut g, logits).unwrap();
    g.backward(loss).unwrap();
    let mut reference = Reference::new(model);
    let mut report = FdReport {
        checked: 0,
        failures: Vec::new(),
        worst_abs: 0.0,
    };
    for (name, var) in p.iter() {
        let analytic: Vec<f32> = g
            .grad(var)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; g.value(var).numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = reference.p[name][i];
            reference.p.get_mut(name).unwrap()[i] = orig + h;
            let up = ref_loss(&reference.batch_rows(tokens, rows));
            reference.p.get_mut(name).unwrap()[i] = orig - h;
            let down = ref_loss(&reference.batch_rows(tokens, rows));
            reference.p.get_mut(name).unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (a as f64 - numeric).abs();
            report.worst_abs = report.worst_abs.max(err);
            report.checked += 1;
            if !within_fd_tolerance(a as f64, numeric) {
                report.failures.push(format!("{name}[{i}]: tape {a} vs numeric {numeric}"));
            }
        }
    }
    report
}

/// Appends `extra` all-zero FFN hidden units to every block.
pub fn widen_ffn(m: &ModelState, extra: usize) -> ModelState {
    let mut cfg = m.config;
    cfg.d_ffn += extra;
    let mut out = m.clone();
    out.config = cfg;
    let d = cfg.d_model;
    for b in 0..cfg.n_blocks {
        let mut data = m.params[&names::block(b, names::W_IN)].data().to_vec();
        data.extend(std::iter::repeat(0.0).take(extra * d));
        out.params
            .insert(names::block(b, names::W_IN), Tensor::new(vec![cfg.d_ffn, d], data).unwrap());
        let mut data = Vec::new();
        for row in m.params[&names::block(b, names::W_OUT)].data().chunks(m.config.d_ffn) {
            data.extend_from_slice(row);
            data.extend(std::iter::repeat(0.0).take(extra));
        }
        out.params
            .insert(names::block(b, names::W_OUT), Tensor::new(vec![d, cfg.d_ffn], data).unwrap());
    }
    out
}

/// Appends `extra` all-zero channels to every attention head.
pub fn widen_heads(m: &ModelState, extra: usize) -> ModelState {
    let mut cfg = m.config;
    let old = cfg.d_head;
    cfg.d_head += extra;
    let mut out = m.clone();
    out.config = cfg;
    for b in 0..cfg.n_blocks {
        for part in [names::W_Q, names::W_K, names::W_V] {
            let mut data = Vec::new();
            for row in m.params[&names::block(b, part)].data().chunks(old) {
                data.extend_from_slice(row);
                data.extend(std::iter::repeat(0.0).take(extra));
            }
            let shape = vec![cfg.n_heads, cfg.d_model, cfg.d_head];
            out.params.insert(names::block(b, part), Tensor::new(shape, data).unwrap());
        }
        let mut data = Vec::new();
        for head in m.params[&names::block(b, names::W_O)].data().chunks(old * cfg.d_model) {
            data.extend_from_slice(head);
            data.extend(std::iter::repeat(0.0).take(extra * cfg.d_model));
        }
        let shape = vec![cfg.n_heads, cfg.d_head, cfg.d_model];
        out.params.insert(names::block(b, names::W_O), Tensor::new(shape, data).unwrap());
    }
    out
}

/// Zeroes the listed FFN hidden units of block `b`.
pub fn kill_ffn_dims(m: &mut ModelState, b: usize, dims: &[usize]) {
    let (d, f) = (m.config.d_model, m.config.d_ffn);
    let w_in = m.params.get_mut(&names::block(b, names::W_IN)).unwrap().data_mut();
    for &r in dims {
        w_in[r * d..(r + 1) * d].fill(0.0);
    }
    let w_out = m.params.get_mut(&names::block(b, names::W_OUT)).unwrap().data_mut();
    for k in 0..d {
        for &r in dims {
            w_out[k * f + r] = 0.0;
        }
    }
}

/// Zeroes the listed per-head channels of block `b`.
pub fn kill_attention_dims(m: &mut ModelState, b: usize, dims: &[usize]) {
    let (d, h, dh) = (m.config.d_model, m.config.n_heads, m.config.d_head);
    for part in [names::W_Q, names::W_K, names::W_V] {
        let w = m.params.get_mut(&names::block(b, part)).unwrap().data_mut();
        for head in 0..h {
            for i in 0..d {
                for &j in dims {
                    w[(head * d + i) * dh + j] = 0.0;
                }
            }
        }
    }
    let w = m.params.get_mut(&names::block(b, names::W_O)).unwrap().data_mut();
    for head in 0..h {
        for &j in dims {
            w[(head * dh + j) * d..(head * dh + j + 1) * d].fill(0.0);
        }
    }
}

/// Zeroes every parameter of block `b`.
pub fn kill_block(m: &mut ModelState, b: usize) {
    let prefix = names::block(b, "");
    for (name, t) in m.params.iter_mut() {
        if name.starts_with(&prefix) {
            t.data_mut().fill(0.0);
        }
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

pub fn probe_batch(vocab: u32, batch: usize, seq: usize, seed: u64) -> TokenBatch {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let ids = (0..batch * seq).map(|_| rng.gen_range(0..vocab)).collect();
    TokenBatch::new(batch, seq, ids).unwrap()
}
