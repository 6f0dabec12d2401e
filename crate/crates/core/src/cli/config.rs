use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::distill::{DistillConfig, TeacherConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pruner::{Scope, StageConfig, StageKind};
use crate::taskgen::{DataConfig, VOCAB_SIZE};

/// Named starting points for a [`RunConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 2 blocks, width 32, 2k samples: seconds to minutes.
    Tiny,
    /// 8 blocks, width 128, 12k samples.
    Desk,
    /// The desk model with large-model step sizes scaled by width / 768.
    Scaled,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "desk" => Ok(Preset::Desk),
            "scaled" => Ok(Preset::Scaled),
            _ => Err(Error::Config(format!("unknown preset `{s}` (tiny, desk, scaled)"))),
        }
    }
}

/// Everything one command needs. Serialized as flat `section.key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub stage: StageConfig,
    pub seed: u64,
    pub out: PathBuf,
    /// Scope of `oneshot`.
    pub scope: Scope,
    /// Stage of `single-stage`.
    pub single_stage: StageKind,
    /// Test samples timed for the throughput column.
    pub throughput_samples: usize,
}

fn scaled_stage(cfg: &ModelConfig) -> StageConfig {
    let p = StageConfig::large_model();
    let scale = |v: usize| ((v * cfg.d_model) / 768).max(1);
    StageConfig {
        n_ffn: scale(p.n_ffn),
        max_ffn: scale(p.max_ffn),
        n_att: scale(p.n_att),
        max_att: scale(p.max_att),
        n_d: scale(p.n_d),
        max_in_out: scale(p.max_in_out),
        ..p
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, data, teacher) = match preset {
            Preset::Tiny => (
                ModelConfig::standard(VOCAB_SIZE, 16, 32, 2, 2),
                DataConfig {
                    train: 2_000,
                    test: 500,
                    ..DataConfig::default()
                },
                TeacherConfig {
                    max_epochs: 4,
                    learning_rate: 3e-3,
                    target_accuracy: None,
                    ..TeacherConfig::default()
                },
            ),
            Preset::Desk | Preset::Scaled => (
                ModelConfig::standard(VOCAB_SIZE, 16, 128, 8, 4),
                DataConfig::default(),
                TeacherConfig {
                    max_epochs: 16,
                    learning_rate: 2e-3,
                    target_accuracy: Some(0.995),
                    ..TeacherConfig::default()
                },
            ),
        };
        let stage = match preset {
            Preset::Scaled => scaled_stage(&model),
            _ => StageConfig::desk(&model),
        };
        Self {
            model,
            data,
            teacher,
            distill: DistillConfig {
                learning_rate: 1e-3,
                ..DistillConfig::default()
            },
            stage,
            seed: 0,
            out: PathBuf::from("runs/default"),
            scope: Scope::All,
            single_stage: StageKind::Blocks,
            throughput_samples: 200,
        }
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let d = &self.data;
        let t = &self.teacher;
        let k = &self.distill;
        let s = &self.stage;
        vec![
            ("model.vocab_size", m.vocab_size.to_string()),
            ("model.max_seq_len", m.max_seq_len.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.n_blocks", m.n_blocks.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.d_head", m.d_head.to_string()),
            ("model.d_ffn", m.d_ffn.to_string()),
            ("model.tie_embeddings", m.tie_embeddings.to_string()),
            ("model.attn_scale_dim", m.attn_scale_dim.to_string()),
            ("data.train", d.train.to_string()),
            ("data.test", d.test.to_string()),
            ("data.validation_fraction", d.validation_fraction.to_string()),
            ("data.prune_subset", d.prune_subset.unwrap_or(0).to_string()),
            ("data.rule_seed", d.rule_seed.to_string()),
            ("data.data_seed", d.data_seed.to_string()),
            ("data.feature_values", d.feature_values.to_string()),
            ("teacher.max_epochs", t.max_epochs.to_string()),
            ("teacher.learning_rate", t.learning_rate.to_string()),
            ("teacher.batch_size", t.batch_size.to_string()),
            ("teacher.weight_decay", t.optimizer.weight_decay.to_string()),
            ("teacher.warmup_steps", t.warmup_steps.to_string()),
            ("teacher.target_accuracy", t.target_accuracy.unwrap_or(0.0).to_string()),
            ("distill.gamma", k.gamma.to_string()),
            ("distill.learning_rate", k.learning_rate.to_string()),
            ("distill.batch_size", k.batch_size.to_string()),
            ("distill.cosine", k.cosine.to_string()),
            ("distill.loss_variant", k.loss_variant.to_string()),
            ("distill.correct_token", k.correct_token.to_string()),
            ("distill.weight_decay", k.optimizer.weight_decay.to_string()),
            ("stage.alpha", s.alpha.to_string()),
            ("stage.epochs", s.epochs.to_string()),
            ("stage.n_b", s.n_b.to_string()),
            ("stage.max_blocks", s.max_blocks.to_string()),
            ("stage.n_ffn", s.n_ffn.to_string()),
            ("stage.max_ffn", s.max_ffn.to_string()),
            ("stage.n_att", s.n_att.to_string()),
            ("stage.max_att", s.max_att.to_string()),
            ("stage.n_d", s.n_d.to_string()),
            ("stage.max_in_out", s.max_in_out.to_string()),
            ("stage.refresh_importance", s.refresh_importance.to_string()),
            ("stage.importance_batch", s.importance_batch.to_string()),
            ("run.seed", self.seed.to_string()),
            ("run.out", self.out.display().to_string()),
            ("run.scope", scope_name(self.scope).to_string()),
            ("run.stage", self.single_stage.to_string()),
            ("run.throughput_samples", self.throughput_samples.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::preset(Preset::Tiny).entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        let v = value.trim();
        let m = &mut self.model;
        let d = &mut self.data;
        let t = &mut self.teacher;
        let k = &mut self.distill;
        let s = &mut self.stage;
        match key {
            "model.vocab_size" => m.vocab_size = num(key, v)?,
            "model.max_seq_len" => m.max_seq_len = num(key, v)?,
            "model.d_model" => m.d_model = num(key, v)?,
            "model.n_blocks" => m.n_blocks = num(key, v)?,
            "model.n_heads" => m.n_heads = num(key, v)?,
            "model.d_head" => m.d_head = num(key, v)?,
            "model.d_ffn" => m.d_ffn = num(key, v)?,
            "model.tie_embeddings" => m.tie_embeddings = num(key, v)?,
            "model.attn_scale_dim" => m.attn_scale_dim = num(key, v)?,
            "data.train" => d.train = num(key, v)?,
            "data.test" => d.test = num(key, v)?,
            "data.validation_fraction" => d.validation_fraction = num(key, v)?,
            "data.prune_subset" => d.prune_subset = Some(num::<usize>(key, v)?).filter(|n| *n > 0),
            "data.rule_seed" => d.rule_seed = num(key, v)?,
            "data.data_seed" => d.data_seed = num(key, v)?,
            "data.feature_values" => d.feature_values = num(key, v)?,
            "teacher.max_epochs" => t.max_epochs = num(key, v)?,
            "teacher.learning_rate" => t.learning_rate = num(key, v)?,
            "teacher.batch_size" => t.batch_size = num(key, v)?,
            "teacher.weight_decay" => t.optimizer.weight_decay = num(key, v)?,
            "teacher.warmup_steps" => t.warmup_steps = num(key, v)?,
            "teacher.target_accuracy" => t.target_accuracy = Some(num::<f64>(key, v)?).filter(|a| *a > 0.0),
            "distill.gamma" => k.gamma = num(key, v)?,
            "distill.learning_rate" => k.learning_rate = num(key, v)?,
            "distill.batch_size" => k.batch_size = num(key, v)?,
            "distill.cosine" => k.cosine = num(key, v)?,
            "distill.loss_variant" => k.loss_variant = v.parse()?,
            "distill.correct_token" => k.correct_token = v.parse()?,
            "distill.weight_decay" => k.optimizer.weight_decay = num(key, v)?,
            "stage.alpha" => s.alpha = num(key, v)?,
            "stage.epochs" => s.epochs = num(key, v)?,
            "stage.n_b" => s.n_b = num(key, v)?,
            "stage.max_blocks" => s.max_blocks = num(key, v)?,
            "stage.n_ffn" => s.n_ffn = num(key, v)?,
            "stage.max_ffn" => s.max_ffn = num(key, v)?,
            "stage.n_att" => s.n_att = num(key, v)?,
            "stage.max_att" => s.max_att = num(key, v)?,
            "stage.n_d" => s.n_d = num(key, v)?,
            "stage.max_in_out" => s.max_in_out = num(key, v)?,
            "stage.refresh_importance" => s.refresh_importance = num(key, v)?,
            "stage.importance_batch" => s.importance_batch = num(key, v)?,
            "run.seed" => self.seed = num(key, v)?,
            "run.out" => self.out = PathBuf::from(v),
            "run.scope" => self.scope = parse_scope(v)?,
            "run.stage" => self.single_stage = v.parse()?,
            "run.throughput_samples" => self.throughput_samples = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Seeds derived from `run.seed` for the model, teacher and distillation.
    pub(crate) fn seeded(&self) -> (u64, TeacherConfig, DistillConfig) {
        let teacher = TeacherConfig {
            seed: self.seed,
            ..self.teacher
        };
        let distill = DistillConfig {
            seed: self.seed,
            ..self.distill
        };
        (self.seed, teacher, distill)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate_usable()?;
        self.distill.validate()?;
        self.stage.validate()?;
        if self.model.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!("model.vocab_size must be {VOCAB_SIZE} for the task suite")));
        }
        if self.data.test == 0 || self.data.train == 0 {
            return Err(Error::Config("data.train and data.test must be at least 1".into()));
        }
        Ok(())
    }
}

pub(crate) fn scope_name(scope: Scope) -> &'static str {
    match scope {
        Scope::All => "all",
        Scope::Stage(k) => k.name(),
    }
}

pub(crate) fn parse_scope(s: &str) -> Result<Scope> {
    if s == "all" {
        Ok(Scope::All)
    } else {
        Ok(Scope::Stage(s.parse()?))
    }
}
