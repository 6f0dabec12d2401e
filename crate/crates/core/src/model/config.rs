use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural hyper-parameters of the transformer. Every dimension is free so
/// pruning can shrink each one independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Per-head width; `n_heads * d_head` need not equal `d_model`.
    pub d_head: usize,
    pub d_ffn: usize,
    pub tie_embeddings: bool,
    /// Attention scores are scaled by `1/sqrt(attn_scale_dim)`. Fixed when the
    /// model is built so shrinking `d_head` leaves the softmax temperature alone.
    pub attn_scale_dim: usize,
}

impl ModelConfig {
    /// Config with `d_head = d_model / n_heads` and `d_ffn = 4 * d_model`.
    pub fn standard(vocab_size: usize, max_seq_len: usize, d_model: usize, n_blocks: usize, n_heads: usize) -> Self {
        let d_head = (d_model / n_heads.max(1)).max(1);
        Self {
            vocab_size,
            max_seq_len,
            d_model,
            n_blocks,
            n_heads,
            d_head,
            d_ffn: 4 * d_model,
            tie_embeddings: false,
            attn_scale_dim: d_head,
        }
    }

    /// Checks every count is positive. `n_blocks == 0` is allowed as a
    /// transient pruning state; see [`ModelConfig::validate_usable`].
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ffn", self.d_ffn),
            ("attn_scale_dim", self.attn_scale_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn validate_usable(&self) -> Result<()> {
        self.validate()?;
        if self.n_blocks == 0 {
            return Err(Error::Config("a usable model needs at least one block".into()));
        }
        Ok(())
    }

    /// Parameters in one transformer block.
    pub fn block_param_count(&self) -> usize {
        let (d, h, dh) = (self.d_model, self.n_heads, self.d_head);
        4 * d + 3 * h * d * dh + h * dh * d + 2 * d * self.d_ffn
    }

    /// Closed-form total parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let embeddings = self.vocab_size * d + self.max_seq_len * d;
        let head = if self.tie_embeddings { 0 } else { self.vocab_size * d };
        embeddings + self.n_blocks * self.block_param_count() + 2 * d + head
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn attention_scale(&self) -> f32 {
        1.0 / (self.attn_scale_dim as f32).sqrt()
    }

    fn entries(&self) -> [(&'static str, String); 9] {
        [
            ("vocab_size", self.vocab_size.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_head", self.d_head.to_string()),
            ("d_ffn", self.d_ffn.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("attn_scale_dim", self.attn_scale_dim.to_string()),
        ]
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", format!("line `{line}` is not key=value")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let count = |key: &str| -> Result<usize> {
            let raw = map
                .get(key)
                .ok_or_else(|| Error::format(format!("config.{key}"), "missing"))?;
            raw.parse()
                .map_err(|_| Error::format(format!("config.{key}"), format!("`{raw}` is not a count")))
        };
        let tie = match map.get("tie_embeddings").map(String::as_str) {
            Some("true") => true,
            Some("false") => false,
            Some(other) => {
                return Err(Error::format(
                    "config.tie_embeddings",
                    format!("`{other}` is not a boolean"),
                ))
            }
            None => return Err(Error::format("config.tie_embeddings", "missing")),
        };
        let cfg = Self {
            vocab_size: count("vocab_size")?,
            max_seq_len: count("max_seq_len")?,
            d_model: count("d_model")?,
            n_blocks: count("n_blocks")?,
            n_heads: count("n_heads")?,
            d_head: count("d_head")?,
            d_ffn: count("d_ffn")?,
            tie_embeddings: tie,
            attn_scale_dim: count("attn_scale_dim")?,
        };
        cfg.validate()
            .map_err(|e| Error::format("config", e.to_string()))?;
        Ok(cfg)
    }
}
