//! Decoder-only transformer with runtime-configurable structure.
//!
//! Pre-norm residual blocks, learned absolute position embeddings and no
//! projection biases. Attention weights are stored per head:
//! `w_q`, `w_k`, `w_v` are `[n_heads, d_model, d_head]` and `w_o` is
//! `[n_heads, d_head, d_model]`. The FFN uses `w_in: [d_ffn, d_model]` and
//! `w_out: [d_model, d_ffn]`.

mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;

use crate::error::{Error, Result};
use crate::tensor_core::{Graph, Tensor, Var};

pub const INIT_STD: f32 = 0.02;

pub mod names {
    pub const TOKEN_EMBEDDING: &str = "token_embedding";
    pub const POSITION_EMBEDDING: &str = "position_embedding";
    pub const FINAL_NORM_SCALE: &str = "final_norm.scale";
    pub const FINAL_NORM_SHIFT: &str = "final_norm.shift";
    pub const OUTPUT_HEAD: &str = "output_head";

    pub const LN1_SCALE: &str = "ln1.scale";
    pub const LN1_SHIFT: &str = "ln1.shift";
    pub const W_Q: &str = "w_q";
    pub const W_K: &str = "w_k";
    pub const W_V: &str = "w_v";
    pub const W_O: &str = "w_o";
    pub const LN2_SCALE: &str = "ln2.scale";
    pub const LN2_SHIFT: &str = "ln2.shift";
    pub const W_IN: &str = "w_in";
    pub const W_OUT: &str = "w_out";

    pub fn block(b: usize, part: &str) -> String {
        format!("blocks.{b}.{part}")
    }
}

/// Expected `(name, shape)` of every parameter, in canonical order.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    use names::*;
    let (v, t, d, h, dh, f) = (
        cfg.vocab_size,
        cfg.max_seq_len,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_head,
        cfg.d_ffn,
    );
    let mut out = vec![
        (TOKEN_EMBEDDING.to_string(), vec![v, d]),
        (POSITION_EMBEDDING.to_string(), vec![t, d]),
    ];
    for b in 0..cfg.n_blocks {
        out.extend([
            (block(b, LN1_SCALE), vec![d]),
            (block(b, LN1_SHIFT), vec![d]),
            (block(b, W_Q), vec![h, d, dh]),
            (block(b, W_K), vec![h, d, dh]),
            (block(b, W_V), vec![h, d, dh]),
            (block(b, W_O), vec![h, dh, d]),
            (block(b, LN2_SCALE), vec![d]),
            (block(b, LN2_SHIFT), vec![d]),
            (block(b, W_IN), vec![f, d]),
            (block(b, W_OUT), vec![d, f]),
        ]);
    }
    out.push((FINAL_NORM_SCALE.to_string(), vec![d]));
    out.push((FINAL_NORM_SHIFT.to_string(), vec![d]));
    if !cfg.tie_embeddings {
        out.push((OUTPUT_HEAD.to_string(), vec![v, d]));
    }
    out
}

/// Closed-form parameter count of a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    cfg.param_count()
}

/// One inconsistency between a tensor and the shape its config implies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShapeViolation {
    Missing { tensor: String, expected: Vec<usize> },
    Unexpected { tensor: String },
    WrongShape { tensor: String, expected: Vec<usize>, actual: Vec<usize> },
}

impl ShapeViolation {
    pub fn tensor(&self) -> &str {
        match self {
            Self::Missing { tensor, .. } | Self::Unexpected { tensor } | Self::WrongShape { tensor, .. } => tensor,
        }
    }
}

impl fmt::Display for ShapeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Missing { tensor, expected } => write!(f, "{tensor}: missing (expected {expected:?})"),
            Self::Unexpected { tensor } => write!(f, "{tensor}: not implied by config"),
            Self::WrongShape {
                tensor,
                expected,
                actual,
            } => write!(f, "{tensor}: shape {actual:?}, config implies {expected:?}"),
        }
    }
}

/// Token ids laid out as `[batch, seq]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Result<Self> {
        if batch * seq != ids.len() || seq == 0 {
            return Err(Error::Input(format!(
                "{} ids cannot form a [{batch}, {seq}] batch",
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    /// Batch of equal-length sequences.
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Input("rows of unequal length".into()));
        }
        Self::new(rows.len(), seq, rows.concat())
    }
}

/// Graph handles for every parameter of a model bound into one [`Graph`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// A configuration together with its named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl ModelState {
    /// Normal(0, 0.02) projections and embeddings, unit layer-norm scale, zero shift.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = expected_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".scale") {
                    Tensor::full(&shape, 1.0)
                } else if name.ends_with(".shift") {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::randn(&shape, INIT_STD, &mut rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = expected_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = Tensor::zeros(&shape);
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("model has no parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("model has no parameter `{name}`")))
    }

    /// Sum of actual tensor sizes.
    pub fn actual_param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Compares every tensor against the closed-form shapes of `config`.
    pub fn shape_audit(&self) -> Vec<ShapeViolation> {
        let expected = expected_shapes(&self.config);
        let mut violations = Vec::new();
        for (name, shape) in &expected {
            match self.params.get(name) {
                None => violations.push(ShapeViolation::Missing {
                    tensor: name.clone(),
                    expected: shape.clone(),
                }),
                Some(t) if t.shape() != shape.as_slice() => violations.push(ShapeViolation::WrongShape {
                    tensor: name.clone(),
                    expected: shape.clone(),
                    actual: t.shape().to_vec(),
                }),
                Some(_) => {}
            }
        }
        for name in self.params.keys() {
            if !expected.iter().any(|(n, _)| n == name) {
                violations.push(ShapeViolation::Unexpected { tensor: name.clone() });
            }
        }
        violations
    }

    pub fn ensure_consistent(&self) -> Result<()> {
        match self.shape_audit().first() {
            None => Ok(()),
            Some(v) => Err(Error::contract(format!("shape audit failed: {v}"))),
        }
    }

    /// Inserts every parameter as a leaf; trainable leaves collect gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Final hidden states `[batch*seq, d_model]` after the last layer norm.
    pub fn hidden_states(&self, g: &mut Graph, p: &BoundParams, tokens: &TokenBatch) -> Result<Var> {
        use names::*;
        let cfg = &self.config;
        if tokens.seq > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.seq, cfg.max_seq_len
            )));
        }
        let mut x = g.embed(p.get(TOKEN_EMBEDDING), p.get(POSITION_EMBEDDING), &tokens.ids, tokens.seq)?;
        for b in 0..cfg.n_blocks {
            let h = g.layer_norm(x, p.get(&block(b, LN1_SCALE)), p.get(&block(b, LN1_SHIFT)))?;
            let q = g.head_project(h, p.get(&block(b, W_Q)))?;
            let k = g.head_project(h, p.get(&block(b, W_K)))?;
            let v = g.head_project(h, p.get(&block(b, W_V)))?;
            let a = g.causal_attention(q, k, v, tokens.batch, tokens.seq, cfg.n_heads, cfg.attention_scale())?;
            let o = g.head_merge(a, p.get(&block(b, W_O)))?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, p.get(&block(b, LN2_SCALE)), p.get(&block(b, LN2_SHIFT)))?;
            let u = g.linear(h, p.get(&block(b, W_IN)))?;
            let u = g.gelu(u)?;
            let o = g.linear(u, p.get(&block(b, W_OUT)))?;
            x = g.add(x, o)?;
        }
        g.layer_norm(x, p.get(FINAL_NORM_SCALE), p.get(FINAL_NORM_SHIFT))
    }

    /// Logits `[rows, vocab]` for the flattened positions in `rows`, or for
    /// every position when `rows` is `None`.
    pub fn logits(&self, g: &mut Graph, p: &BoundParams, tokens: &TokenBatch, rows: Option<&[usize]>) -> Result<Var> {
        let x = self.hidden_states(g, p, tokens)?;
        let x = match rows {
            Some(r) => g.select_rows(x, r)?,
            None => x,
        };
        let head = if self.config.tie_embeddings {
            names::TOKEN_EMBEDDING
        } else {
            names::OUTPUT_HEAD
        };
        g.linear(x, p.get(head))
    }

    /// Next-token logits `[batch, seq, vocab]` for every position.
    pub fn forward(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let out = self.logits(&mut g, &p, tokens, None)?;
        g.value(out)
            .clone()
            .reshape(vec![tokens.batch, tokens.seq, self.config.vocab_size])
    }
}
