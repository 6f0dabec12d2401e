use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Sample, TaskId, PAD};
use crate::error::{Error, Result};
use crate::model::{ModelState, TokenBatch};
use crate::tensor_core::Graph;

const EVAL_BATCH: usize = 256;

/// Teacher-forced batch: inputs are `prompt ++ answer[..len-1]`, right-padded,
/// and `rows`/`targets` select the positions that predict answer tokens.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub tokens: TokenBatch,
    pub rows: Vec<usize>,
    pub targets: Vec<u32>,
    /// Index (within the batch) of the sample each row belongs to.
    pub row_sample: Vec<usize>,
    pub samples: usize,
}

impl TrainBatch {
    pub fn build(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let len = |s: &Sample| s.prompt.len() + s.answer.len() - 1;
        if let Some(s) = samples.iter().find(|s| s.prompt.is_empty() || s.answer.is_empty()) {
            return Err(Error::Input(format!("sample of task {} has an empty prompt or answer", s.task.name())));
        }
        let seq = samples.iter().map(|s| len(s)).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(samples.len() * seq);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut row_sample = Vec::new();
        for (b, s) in samples.iter().enumerate() {
            ids.extend_from_slice(&s.prompt);
            ids.extend_from_slice(&s.answer[..s.answer.len() - 1]);
            ids.extend(std::iter::repeat_n(PAD, seq - len(s)));
            for (j, &t) in s.answer.iter().enumerate() {
                rows.push(b * seq + s.prompt.len() - 1 + j);
                targets.push(t);
                row_sample.push(b);
            }
        }
        Ok(Self {
            tokens: TokenBatch::new(samples.len(), seq, ids)?,
            rows,
            targets,
            row_sample,
            samples: samples.len(),
        })
    }
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best as u32
}

/// Greedy continuation of equal-length prompts for `steps` tokens.
pub fn greedy_decode(model: &ModelState, prompts: &[&[u32]], steps: usize) -> Result<Vec<Vec<u32>>> {
    let mut seqs: Vec<Vec<u32>> = prompts.iter().map(|p| p.to_vec()).collect();
    let Some(first) = seqs.first() else {
        return Ok(Vec::new());
    };
    let plen = first.len();
    if seqs.iter().any(|s| s.len() != plen) {
        return Err(Error::Input("greedy_decode needs equal-length prompts".into()));
    }
    let vocab = model.config.vocab_size;
    for step in 0..steps {
        let seq = plen + step;
        let tokens = TokenBatch::new(seqs.len(), seq, seqs.concat())?;
        let rows: Vec<usize> = (0..seqs.len()).map(|b| b * seq + seq - 1).collect();
        let mut g = Graph::inference();
        let p = model.bind(&mut g, false);
        let logits = model.logits(&mut g, &p, &tokens, Some(&rows))?;
        for (s, row) in seqs.iter_mut().zip(g.value(logits).data().chunks(vocab)) {
            s.push(argmax(row));
        }
    }
    Ok(seqs.into_iter().map(|s| s[plen..].to_vec()).collect())
}

/// Exact-match answer accuracy, overall and per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: f64,
    pub per_task: BTreeMap<TaskId, f64>,
    pub correct: usize,
    pub total: usize,
}

/// Greedy-decodes each sample's answer length and counts exact matches.
pub fn accuracy(model: &ModelState, samples: &[Sample]) -> Result<AccuracyReport> {
    if samples.is_empty() {
        return Err(Error::contract("accuracy on an empty dataset"));
    }
    // group by prompt length so every decode batch is rectangular
    let mut groups: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.prompt.len()).or_default().push(s);
    }
    let mut hits: BTreeMap<TaskId, (usize, usize)> = BTreeMap::new();
    for group in groups.values() {
        for chunk in group.chunks(EVAL_BATCH) {
            let steps = chunk.iter().map(|s| s.answer.len()).max().unwrap_or(0);
            let prompts: Vec<&[u32]> = chunk.iter().map(|s| s.prompt.as_slice()).collect();
            let outs = greedy_decode(model, &prompts, steps)?;
            for (s, out) in chunk.iter().zip(outs) {
                let e = hits.entry(s.task).or_default();
                e.1 += 1;
                if out[..s.answer.len()] == s.answer[..] {
                    e.0 += 1;
                }
            }
        }
    }
    let correct = hits.values().map(|h| h.0).sum();
    Ok(AccuracyReport {
        overall: correct as f64 / samples.len() as f64,
        per_task: hits
            .into_iter()
            .map(|(t, (c, n))| (t, c as f64 / n as f64))
            .collect(),
        correct,
        total: samples.len(),
    })
}

/// Mean over samples of the summed answer-token cross-entropy.
pub fn mean_answer_loss(model: &ModelState, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("loss on an empty dataset"));
    }
    let mut total = 0.0f64;
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = TrainBatch::build(&refs)?;
        let mut g = Graph::inference();
        let p = model.bind(&mut g, false);
        let logits = model.logits(&mut g, &p, &batch.tokens, Some(&batch.rows))?;
        let ce = g.cross_entropy(logits, &batch.targets)?;
        total += g.value(ce).item()? as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Greedy-decode samples per second at batch size 1.
pub fn decode_throughput(model: &ModelState, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("throughput on an empty dataset"));
    }
    let start = Instant::now();
    for s in samples {
        greedy_decode(model, &[s.prompt.as_slice()], s.answer.len())?;
    }
    Ok(samples.len() as f64 / start.elapsed().as_secs_f64().max(1e-9))
}
