//! Synthetic attribute-classification tasks posed as prompt → answer token
//! sequences.
//!
//! Every prompt is `[BOS, f_0 .. f_{slots-1}, TASK]`. Each task reads one
//! hidden key slot and maps the feature value found there through a hidden
//! table to a class; the class is spelled as a 2 or 3 token answer. The tables
//! and key slots derive from `rule_seed`; sample contents derive from
//! `(rule_seed, data_seed, sample index)`.

mod eval;

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use eval::{accuracy, decode_throughput, greedy_decode, mean_answer_loss, AccuracyReport, TrainBatch};

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 512;
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
const TASK_BASE: u32 = 4;
const FEATURE_BASE: u32 = 16;
const ANSWER_BASE: u32 = 256;
const ANSWER_STRIDE_TASK: u32 = 32;
const ANSWER_STRIDE_POS: u32 = 8;
const MAX_FEATURE_VALUES: usize = (ANSWER_BASE - FEATURE_BASE) as usize;

/// The five attribute families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    BackgroundColor,
    Manifestation,
    ContentClass,
    Logo,
    Style,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::BackgroundColor,
        TaskId::Manifestation,
        TaskId::ContentClass,
        TaskId::Logo,
        TaskId::Style,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::BackgroundColor => "background_color",
            TaskId::Manifestation => "manifestation",
            TaskId::ContentClass => "content_class",
            TaskId::Logo => "logo",
            TaskId::Style => "style",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    /// (class count, answer length in tokens)
    fn shape(self) -> (usize, usize) {
        match self {
            TaskId::BackgroundColor => (8, 2),
            TaskId::Manifestation => (4, 2),
            TaskId::ContentClass => (12, 3),
            TaskId::Logo => (6, 2),
            TaskId::Style => (8, 3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub n_classes: usize,
    pub answer_len: usize,
    pub rule_seed: u64,
}

impl TaskSpec {
    /// Radix of the answer code: smallest `r` with `r^answer_len >= n_classes`.
    fn radix(&self) -> usize {
        (2..).find(|r: &usize| r.pow(self.answer_len as u32) >= self.n_classes).unwrap()
    }

    /// Answer tokens naming `class`, most significant digit first.
    pub fn answer_tokens(&self, class: usize) -> Vec<u32> {
        let r = self.radix();
        let t = self.task_id.index() as u32;
        (0..self.answer_len)
            .map(|p| {
                let digit = (class / r.pow((self.answer_len - 1 - p) as u32)) % r;
                ANSWER_BASE + t * ANSWER_STRIDE_TASK + p as u32 * ANSWER_STRIDE_POS + digit as u32
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub task: TaskId,
}

/// Hidden rules for all five tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSuite {
    specs: Vec<TaskSpec>,
    feature_values: usize,
    slots: usize,
    key_slot: Vec<usize>,
    // per task: feature value -> class
    tables: Vec<Vec<usize>>,
}

impl TaskSuite {
    pub const DEFAULT_FEATURE_VALUES: usize = 48;
    pub const DEFAULT_SLOTS: usize = 6;

    pub fn new(rule_seed: u64) -> Result<Self> {
        Self::with_shape(rule_seed, Self::DEFAULT_FEATURE_VALUES, Self::DEFAULT_SLOTS)
    }

    /// `feature_values` must be a multiple of every task's class count so
    /// the hidden tables are exactly balanced.
    pub fn with_shape(rule_seed: u64, feature_values: usize, slots: usize) -> Result<Self> {
        let specs: Vec<TaskSpec> = TaskId::ALL
            .iter()
            .map(|&task_id| {
                let (n_classes, answer_len) = task_id.shape();
                TaskSpec {
                    task_id,
                    n_classes,
                    answer_len,
                    rule_seed,
                }
            })
            .collect();
        if slots < TaskId::ALL.len() {
            return Err(Error::Config(format!("need at least {} feature slots", TaskId::ALL.len())));
        }
        if feature_values == 0 || feature_values > MAX_FEATURE_VALUES {
            return Err(Error::Config(format!(
                "feature_values must be in 1..={MAX_FEATURE_VALUES}"
            )));
        }
        if let Some(s) = specs.iter().find(|s| feature_values % s.n_classes != 0) {
            return Err(Error::Config(format!(
                "feature_values {feature_values} is not a multiple of {} classes of {}",
                s.n_classes,
                s.task_id.name()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rule_seed);
        let mut slot_order: Vec<usize> = (0..slots).collect();
        slot_order.shuffle(&mut rng);
        let key_slot = slot_order[..specs.len()].to_vec();
        let tables = specs
            .iter()
            .map(|s| {
                let mut perm: Vec<usize> = (0..feature_values).collect();
                perm.shuffle(&mut rng);
                perm.into_iter().map(|p| p % s.n_classes).collect()
            })
            .collect();
        Ok(Self {
            specs,
            feature_values,
            slots,
            key_slot,
            tables,
        })
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.specs
    }

    pub fn spec(&self, task: TaskId) -> &TaskSpec {
        &self.specs[task.index()]
    }

    pub fn prompt_len(&self) -> usize {
        self.slots + 2
    }

    pub fn max_answer_len(&self) -> usize {
        self.specs.iter().map(|s| s.answer_len).max().unwrap_or(0)
    }

    /// Longest teacher-forced input: prompt plus all but the last answer token.
    pub fn max_input_len(&self) -> usize {
        self.prompt_len() + self.max_answer_len() - 1
    }

    /// Applies the hidden rule to a prompt.
    pub fn classify(&self, prompt: &[u32]) -> Option<(TaskId, usize)> {
        if prompt.len() != self.prompt_len() {
            return None;
        }
        let task = TaskId::ALL
            .into_iter()
            .find(|t| prompt[self.slots + 1] == TASK_BASE + t.index() as u32)?;
        let value = prompt[1 + self.key_slot[task.index()]].checked_sub(FEATURE_BASE)? as usize;
        let class = *self.tables[task.index()].get(value)?;
        Some((task, class))
    }

    /// The sample at `index` of the draw identified by `data_seed`.
    pub fn sample(&self, data_seed: u64, index: u64) -> Sample {
        let task = TaskId::ALL[(index % TaskId::ALL.len() as u64) as usize];
        let spec = self.spec(task);
        let class = ((index / TaskId::ALL.len() as u64) % spec.n_classes as u64) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.rule_seed, data_seed, index));
        let mut features: Vec<usize> = (0..self.slots)
            .map(|_| rng.gen_range(0..self.feature_values))
            .collect();
        let candidates: Vec<usize> = self.tables[task.index()]
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(v, _)| v)
            .collect();
        features[self.key_slot[task.index()]] = candidates[rng.gen_range(0..candidates.len())];

        let mut prompt = Vec::with_capacity(self.prompt_len());
        prompt.push(BOS);
        prompt.extend(features.iter().map(|&f| FEATURE_BASE + f as u32));
        prompt.push(TASK_BASE + task.index() as u32);
        Sample {
            prompt,
            answer: spec.answer_tokens(class),
            task,
        }
    }
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.rotate_left(21))
        .wrapping_add(c.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sizes and seeds of one dataset draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
    /// Fraction of the training draw held out for gating decisions.
    pub validation_fraction: f64,
    /// Optional cap on the pruning set (first `n` training samples).
    pub prune_subset: Option<usize>,
    pub rule_seed: u64,
    pub data_seed: u64,
    pub feature_values: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 12_000,
            test: 3_000,
            validation_fraction: 0.1,
            prune_subset: None,
            rule_seed: 17,
            data_seed: 1,
            feature_values: TaskSuite::DEFAULT_FEATURE_VALUES,
        }
    }
}

/// Train and test draws; disjoint by sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

const CAPACITY: u64 = 1 << 40;

/// Deterministic train/test split: train takes indices `[0, train)` and test
/// takes `[train, train + test)`.
pub fn generate_split(suite: &TaskSuite, train: usize, test: usize, data_seed: u64) -> Result<Split> {
    if train == 0 || test == 0 {
        return Err(Error::Config("train and test sizes must be at least 1".into()));
    }
    let total = train as u64 + test as u64;
    if total > CAPACITY {
        return Err(Error::Config(format!(
            "{total} samples exceed generator capacity {CAPACITY}"
        )));
    }
    let draw = |range: std::ops::Range<u64>| range.map(|i| suite.sample(data_seed, i)).collect();
    Ok(Split {
        train: draw(0..train as u64),
        test: draw(train as u64..total),
    })
}

/// The four datasets the compression pipeline consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    /// Importance scoring set.
    pub prune: Vec<Sample>,
    /// Distillation set.
    pub distill: Vec<Sample>,
    /// Held-out part of the training draw used for the tolerance gate.
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Datasets {
    pub fn generate(suite: &TaskSuite, cfg: &DataConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        let split = generate_split(suite, cfg.train, cfg.test, cfg.data_seed)?;
        let n_val = ((cfg.train as f64) * cfg.validation_fraction).round() as usize;
        let n_val = n_val.clamp(1, cfg.train.saturating_sub(1).max(1));
        if n_val >= cfg.train {
            return Err(Error::Config("training draw too small to carve a validation split".into()));
        }
        let mut train = split.train;
        let validation = train.split_off(cfg.train - n_val);
        let prune = match cfg.prune_subset {
            Some(n) => train[..n.min(train.len())].to_vec(),
            None => train.clone(),
        };
        Ok(Self {
            prune,
            distill: train,
            validation,
            test: split.test,
        })
    }
}

fn join_ids(ids: &[u32]) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{id}");
    }
    s
}

/// One line per sample: `prompt ids \t answer ids \t task name`.
pub fn export_samples<W: Write>(w: &mut W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        writeln!(w, "{}\t{}\t{}", join_ids(&s.prompt), join_ids(&s.answer), s.task.name())?;
    }
    Ok(())
}

pub fn parse_samples(text: &str) -> Result<Vec<Sample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |what: &str| Error::Input(format!("line {}: {what}", n + 1));
            let mut fields = line.split('\t');
            let mut ids = |what: &str| -> Result<Vec<u32>> {
                fields
                    .next()
                    .ok_or_else(|| bad(what))?
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| bad(what)))
                    .collect()
            };
            let prompt = ids("prompt")?;
            let answer = ids("answer")?;
            let task = fields
                .next()
                .and_then(|t| TaskId::from_name(t.trim()))
                .ok_or_else(|| bad("task"))?;
            Ok(Sample { prompt, answer, task })
        })
        .collect()
}
