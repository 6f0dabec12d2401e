//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every tensor produced during a forward pass. Operations
//! append nodes in evaluation order, so the recording order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Leaves created with [`Graph::param`] receive accumulated gradients;
//! leaves created with [`Graph::constant`] do not. A graph built with
//! [`Graph::inference`] records values only and refuses `backward`.

use super::linalg::{gemm, View};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    HeadProject(Var, Var),
    HeadMerge(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Embed {
        tok: Var,
        pos: Var,
        ids: Vec<u32>,
        seq: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        scale: f32,
        probs: Vec<f32>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<f32>,
    },
    KlDiv {
        student: Var,
        teacher_probs: Vec<f32>,
        student_probs: Vec<f32>,
    },
    Hinge {
        student: Var,
        // (row, top competitor, correct) for every active row
        active: Vec<(usize, usize, usize)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Row-wise log-sum-exp shifted by the row maximum; returns (max, lse) accumulated in f64.
fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&v| ((v as f64) - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_rows(data: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for (row, o) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let lse = log_sum_exp(row);
        for (o, &v) in o.iter_mut().zip(row) {
            *o = ((v as f64) - lse).exp() as f32;
        }
    }
    out
}

/// KL(softmax(teacher) || softmax(student)) for one row, in f64.
pub(crate) fn kl_row(student: &[f32], teacher: &[f32]) -> f64 {
    let ls = log_sum_exp(student);
    let lt = log_sum_exp(teacher);
    let kl: f64 = student
        .iter()
        .zip(teacher)
        .map(|(&s, &t)| {
            let lpt = t as f64 - lt;
            let lps = s as f64 - ls;
            lpt.exp() * (lpt - lps)
        })
        .sum();
    kl.max(0.0)
}

/// Largest score among entries other than `correct`, lowest index on ties.
pub(crate) fn top_competitor(row: &[f32], correct: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in row.iter().enumerate() {
        if j != correct && (best == usize::MAX || v > row[best]) {
            best = j;
        }
    }
    best
}

// (1 + tanh z) / 2 == sigmoid(2z); the exp form is several times faster than tanh.
fn gelu_gate(x: f32) -> f32 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_K * x * x * x)).exp())
}

fn gelu(x: f32) -> f32 {
    x * gelu_gate(x)
}

fn gelu_grad(x: f32) -> f32 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Graph {
    /// Graph that records everything needed for `backward`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Graph that only evaluates; no gradient state is kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, t: Tensor) -> Var {
        let needs_grad = self.recording;
        self.leaf(t, needs_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, mut t: Tensor, needs_grad: bool) -> Var {
        t.take_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let needs_grad = self.recording && inputs.iter().any(|&v| self.needs(v));
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul")?;
        let (k2, n) = dims2(tb, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            View::row_major(ta.data(), m, k),
            View::row_major(tb.data(), k, n),
            0.0,
            &mut out,
            n,
            1,
        );
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `x · wᵀ` for `x: [n, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, din) = dims2(tx, "linear")?;
        let (dout, din2) = dims2(tw, "linear")?;
        if din != din2 {
            return Err(mismatch("linear", tx, tw));
        }
        let mut out = vec![0.0; n * dout];
        gemm(
            View::row_major(tx.data(), n, din),
            View::row_major(tw.data(), dout, din).t(),
            0.0,
            &mut out,
            dout,
            1,
        );
        let t = Tensor::new(vec![n, dout], out)?;
        self.push(t, Op::Linear(x, w), &[x, w], "linear")
    }

    /// Per-head projection: `x: [n, d]`, `w: [h, d, dh]` -> `[n, h*dh]` with head-major columns.
    pub fn head_project(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, d) = dims2(tx, "head_project")?;
        let (h, d2, dh) = dims3(tw, "head_project")?;
        if d != d2 {
            return Err(mismatch("head_project", tx, tw));
        }
        let width = h * dh;
        let mut out = vec![0.0; n * width];
        for head in 0..h {
            gemm(
                View::row_major(tx.data(), n, d),
                View::row_major(&tw.data()[head * d * dh..(head + 1) * d * dh], d, dh),
                0.0,
                &mut out[head * dh..],
                width,
                1,
            );
        }
        let t = Tensor::new(vec![n, width], out)?;
        self.push(t, Op::HeadProject(x, w), &[x, w], "head_project")
    }

    /// Merge heads back to model width: `z: [n, h*dh]`, `w: [h, dh, d]` -> `[n, d]`.
    pub fn head_merge(&mut self, z: Var, w: Var) -> Result<Var> {
        let (tz, tw) = (self.value(z), self.value(w));
        let (n, width) = dims2(tz, "head_merge")?;
        let (h, dh, d) = dims3(tw, "head_merge")?;
        if width != h * dh {
            return Err(mismatch("head_merge", tz, tw));
        }
        let mut out = vec![0.0; n * d];
        for head in 0..h {
            let zh = View {
                data: &tz.data()[head * dh..],
                rows: n,
                cols: dh,
                rs: width,
                cs: 1,
            };
            gemm(
                zh,
                View::row_major(&tw.data()[head * dh * d..(head + 1) * dh * d], dh, d),
                if head == 0 { 0.0 } else { 1.0 },
                &mut out,
                d,
                1,
            );
        }
        let t = Tensor::new(vec![n, d], out)?;
        self.push(t, Op::HeadMerge(z, w), &[z, w], "head_merge")
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|v| v * c).collect())?;
        self.push(t, Op::Scale(a, c), &[a], "scale")
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(a), &[a], "sum")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&v| gelu(v)).collect())?;
        self.push(t, Op::Gelu(a), &[a], "gelu")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let cols = *ta.shape().last().ok_or_else(|| Error::contract("softmax of a scalar"))?;
        let t = Tensor::new(ta.shape().to_vec(), softmax_rows(ta.data(), cols))?;
        self.push(t, Op::Softmax(a), &[a], "softmax")
    }

    /// Layer normalization over the last axis followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (tx, ts, tb) = (self.value(x), self.value(scale), self.value(shift));
        let (rows, d) = dims2(tx, "layer_norm")?;
        if ts.shape() != [d] || tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx, ts));
        }
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS as f64).sqrt();
            rstd[r] = rs as f32;
            for i in 0..d {
                let xh = ((row[i] as f64 - mean) * rs) as f32;
                xhat[r * d + i] = xh;
                out[r * d + i] = xh * ts.data()[i] + tb.data()[i];
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let op = if self.recording {
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                rstd,
            }
        } else {
            Op::Leaf
        };
        self.push(t, op, &[x, scale, shift], "layer_norm")
    }

    /// Token plus position embedding lookup for `ids` laid out as `[batch, seq]`.
    pub fn embed(&mut self, tok: Var, pos: Var, ids: &[u32], seq: usize) -> Result<Var> {
        let (tt, tp) = (self.value(tok), self.value(pos));
        let (vocab, d) = dims2(tt, "embed")?;
        let (max_seq, d2) = dims2(tp, "embed")?;
        if d != d2 {
            return Err(mismatch("embed", tt, tp));
        }
        if seq == 0 || seq > max_seq || ids.len() % seq != 0 {
            return Err(Error::Input(format!(
                "sequence length {seq} outside 1..={max_seq} for {} ids",
                ids.len()
            )));
        }
        let mut out = vec![0.0; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(Error::Input(format!(
                    "token id {id} at batch {} position {} exceeds vocabulary size {vocab}",
                    r / seq,
                    r % seq
                )));
            }
            let p = r % seq;
            let o = &mut out[r * d..(r + 1) * d];
            let e = &tt.data()[id as usize * d..(id as usize + 1) * d];
            let q = &tp.data()[p * d..(p + 1) * d];
            for i in 0..d {
                o[i] = e[i] + q[i];
            }
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let op = Op::Embed {
            tok,
            pos,
            ids: ids.to_vec(),
            seq,
        };
        self.push(t, op, &[tok, pos], "embed")
    }

    /// Causal dot-product attention over head-major `[batch*seq, heads*dh]`
    /// inputs; scores are multiplied by `scale` before the softmax.
    #[allow(clippy::too_many_arguments)]
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        scale: f32,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, width) = dims2(tq, "attention")?;
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(mismatch("attention", tq, tk));
        }
        if n != batch * seq || heads == 0 || width % heads != 0 {
            return Err(Error::Dimension {
                op: "attention",
                lhs: tq.shape().to_vec(),
                rhs: vec![batch, seq, heads],
            });
        }
        let dh = width / heads;
        let mut probs = vec![0.0f32; batch * heads * seq * seq];
        let mut out = vec![0.0f32; n * width];
        let mut scores = vec![0.0f32; seq];
        for b in 0..batch {
            for h in 0..heads {
                let p_base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &tq.data()[(b * seq + i) * width + h * dh..][..dh];
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &tk.data()[(b * seq + j) * width + h * dh..][..dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut denom = 0.0f32;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let o = &mut out[(b * seq + i) * width + h * dh..][..dh];
                    for j in 0..=i {
                        let p = scores[j] / denom;
                        probs[p_base + i * seq + j] = p;
                        let vj = &tv.data()[(b * seq + j) * width + h * dh..][..dh];
                        o.iter_mut().zip(vj).for_each(|(o, v)| *o += p * v);
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, width], out)?;
        let op = if self.recording {
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                scale,
                probs,
            }
        } else {
            Op::Leaf
        };
        self.push(t, op, &[q, k, v], "attention")
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = dims2(tx, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Input(format!("row {bad} out of range for {n} rows")));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&tx.data()[r * c..(r + 1) * c]);
        }
        let t = Tensor::new(vec![rows.len(), c], out)?;
        let op = Op::SelectRows {
            x,
            rows: rows.to_vec(),
        };
        self.push(t, op, &[x], "select_rows")
    }

    fn check_targets(t: &Tensor, targets: &[u32], name: &'static str) -> Result<(usize, usize)> {
        let (m, vocab) = dims2(t, name)?;
        if targets.len() != m {
            return Err(Error::Dimension {
                op: name,
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Input(format!("target token {bad} exceeds vocabulary size {vocab}")));
        }
        Ok((m, vocab))
    }

    /// Summed cross-entropy of `logits: [m, V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let tl = self.value(logits);
        let (_, vocab) = Self::check_targets(tl, targets, "cross_entropy")?;
        let mut total = 0.0f64;
        for (row, &t) in tl.data().chunks(vocab).zip(targets) {
            total += log_sum_exp(row) - row[t as usize] as f64;
        }
        let probs = if self.recording {
            softmax_rows(tl.data(), vocab)
        } else {
            Vec::new()
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(total as f32), op, &[logits], "cross_entropy")
    }

    /// Summed row-wise KL(softmax(teacher) ‖ softmax(student)); the teacher is a constant.
    pub fn kl_div(&mut self, student: Var, teacher_logits: &Tensor) -> Result<Var> {
        let ts = self.value(student);
        if ts.shape() != teacher_logits.shape() {
            return Err(mismatch("kl_div", ts, teacher_logits));
        }
        let vocab = *ts
            .shape()
            .last()
            .ok_or_else(|| Error::contract("kl_div of a scalar"))?;
        let total: f64 = ts
            .data()
            .chunks(vocab)
            .zip(teacher_logits.data().chunks(vocab))
            .map(|(s, t)| kl_row(s, t))
            .sum();
        let (teacher_probs, student_probs) = if self.recording {
            (
                softmax_rows(teacher_logits.data(), vocab),
                softmax_rows(ts.data(), vocab),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let op = Op::KlDiv {
            student,
            teacher_probs,
            student_probs,
        };
        self.push(Tensor::scalar(total as f32), op, &[student], "kl_div")
    }

    /// Summed `max(0, best competing score − correct score)` per row.
    ///
    /// Scores are log-probabilities; the log-normalizer cancels in the
    /// difference so it is evaluated directly on logits.
    pub fn pairwise_hinge(&mut self, student: Var, correct: &[u32]) -> Result<Var> {
        let ts = self.value(student);
        let (_, vocab) = Self::check_targets(ts, correct, "pairwise_hinge")?;
        if vocab < 2 {
            return Err(Error::contract("pairwise hinge needs at least two classes"));
        }
        let mut total = 0.0f64;
        let mut active = Vec::new();
        for (r, (row, &c)) in ts.data().chunks(vocab).zip(correct).enumerate() {
            let c = c as usize;
            let j = top_competitor(row, c);
            let margin = row[j] as f64 - row[c] as f64;
            if margin > 0.0 {
                total += margin;
                active.push((r, j, c));
            }
        }
        let op = Op::Hinge { student, active };
        self.push(Tensor::scalar(total as f32), op, &[student], "pairwise_hinge")
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every trainable leaf's grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::contract("backward on an inference graph"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&gout)?;
                continue;
            }
            self.propagate(i, &gout, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Returns the gradient buffer of `v` if it participates in differentiation.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    let len = nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
                } else {
                    None
                }
            }};
        }

        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let gv = View::row_major(gout, m, n);
                if let Some(ga) = slot!(*a) {
                    gemm(gv, View::row_major(val(*b).data(), k, n).t(), 1.0, ga, k, 1);
                }
                if let Some(gb) = slot!(*b) {
                    gemm(View::row_major(val(*a).data(), m, k).t(), gv, 1.0, gb, n, 1);
                }
            }
            Op::Linear(x, w) => {
                let (n, din) = (val(*x).shape()[0], val(*x).shape()[1]);
                let dout = val(*w).shape()[0];
                let gv = View::row_major(gout, n, dout);
                if let Some(gx) = slot!(*x) {
                    gemm(gv, View::row_major(val(*w).data(), dout, din), 1.0, gx, din, 1);
                }
                if let Some(gw) = slot!(*w) {
                    gemm(gv.t(), View::row_major(val(*x).data(), n, din), 1.0, gw, din, 1);
                }
            }
            Op::HeadProject(x, w) => {
                let (n, d) = (val(*x).shape()[0], val(*x).shape()[1]);
                let (h, _, dh) = (val(*w).shape()[0], d, val(*w).shape()[2]);
                let width = h * dh;
                let go = |head: usize| View {
                    data: &gout[head * dh..],
                    rows: n,
                    cols: dh,
                    rs: width,
                    cs: 1,
                };
                if let Some(gx) = slot!(*x) {
                    for head in 0..h {
                        let wh = View::row_major(&val(*w).data()[head * d * dh..], d, dh);
                        gemm(go(head), wh.t(), 1.0, gx, d, 1);
                    }
                }
                if let Some(gw) = slot!(*w) {
                    for head in 0..h {
                        let xv = View::row_major(val(*x).data(), n, d).t();
                        gemm(xv, go(head), 1.0, &mut gw[head * d * dh..], dh, 1);
                    }
                }
            }
            Op::HeadMerge(z, w) => {
                let (n, width) = (val(*z).shape()[0], val(*z).shape()[1]);
                let (h, dh, d) = (val(*w).shape()[0], val(*w).shape()[1], val(*w).shape()[2]);
                let gv = View::row_major(gout, n, d);
                if let Some(gz) = slot!(*z) {
                    for head in 0..h {
                        let wh = View::row_major(&val(*w).data()[head * dh * d..], dh, d);
                        gemm(gv, wh.t(), 1.0, &mut gz[head * dh..], width, 1);
                    }
                }
                if let Some(gw) = slot!(*w) {
                    for head in 0..h {
                        let zh = View {
                            data: &val(*z).data()[head * dh..],
                            rows: n,
                            cols: dh,
                            rs: width,
                            cs: 1,
                        };
                        gemm(zh.t(), gv, 1.0, &mut gw[head * dh * d..], d, 1);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, gout);
                }
                if let Some(gb) = slot!(*b) {
                    add_into(gb, gout);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, gout);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(gout).for_each(|(g, o)| *g -= o);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot!(*a) {
                    let vb = val(*b).data();
                    ga.iter_mut().zip(gout.iter().zip(vb)).for_each(|(g, (o, y))| *g += o * y);
                }
                if let Some(gb) = slot!(*b) {
                    let va = val(*a).data();
                    gb.iter_mut().zip(gout.iter().zip(va)).for_each(|(g, (o, x))| *g += o * x);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(gout).for_each(|(g, o)| *g += c * o);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = slot!(*a) {
                    let x = val(*a).data();
                    ga.iter_mut()
                        .zip(gout.iter().zip(x))
                        .for_each(|(g, (o, &x))| *g += o * gelu_grad(x));
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = slot!(*a) {
                    let y = nodes[i].value.data();
                    let cols = *nodes[i].value.shape().last().unwrap();
                    for ((g, o), y) in ga.chunks_mut(cols).zip(gout.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f32 = o.iter().zip(y).map(|(o, y)| o * y).sum();
                        for j in 0..cols {
                            g[j] += y[j] * (o[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                rstd,
            } => {
                let d = val(*scale).numel();
                let gamma = val(*scale).data();
                if let Some(gs) = slot!(*scale) {
                    for (o, xh) in gout.chunks(d).zip(xhat.chunks(d)) {
                        gs.iter_mut().zip(o.iter().zip(xh)).for_each(|(g, (o, x))| *g += o * x);
                    }
                }
                if let Some(gb) = slot!(*shift) {
                    for o in gout.chunks(d) {
                        add_into(gb, o);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let mut dxhat = vec![0.0f32; d];
                    for r in 0..rstd.len() {
                        let o = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0f32;
                        let mut mean_dx = 0.0f32;
                        for j in 0..d {
                            dxhat[j] = o[j] * gamma[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= d as f32;
                        mean_dx /= d as f32;
                        let g = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            g[j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Embed { tok, pos, ids, seq } => {
                let d = val(*tok).shape()[1];
                if let Some(gt) = slot!(*tok) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id as usize * d..(id as usize + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                }
                if let Some(gp) = slot!(*pos) {
                    for r in 0..ids.len() {
                        let p = r % seq;
                        add_into(&mut gp[p * d..(p + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                scale,
                probs,
            } => {
                let (batch, seq, heads, scale) = (*batch, *seq, *heads, *scale);
                let width = val(*q).shape()[1];
                let dh = width / heads;
                let (tq, tk, tv) = (val(*q).data(), val(*k).data(), val(*v).data());
                let n = batch * seq * width;
                let mut gq = vec![0.0f32; n];
                let mut gk = vec![0.0f32; n];
                let mut gv = vec![0.0f32; n];
                let mut dp = vec![0.0f32; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let p_base = (b * heads + h) * seq * seq;
                        let at = |t: usize| (b * seq + t) * width + h * dh;
                        for i in 0..seq {
                            let go = &gout[at(i)..at(i) + dh];
                            let mut dot = 0.0f32;
                            for j in 0..=i {
                                let p = probs[p_base + i * seq + j];
                                let vj = &tv[at(j)..at(j) + dh];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += p * dp[j];
                                gv[at(j)..at(j) + dh]
                                    .iter_mut()
                                    .zip(go)
                                    .for_each(|(g, o)| *g += p * o);
                            }
                            for j in 0..=i {
                                let p = probs[p_base + i * seq + j];
                                let ds = p * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    gq[at(i) + c] += ds * tk[at(j) + c];
                                    gk[at(j) + c] += ds * tq[at(i) + c];
                                }
                            }
                        }
                    }
                }
                if let Some(g) = slot!(*q) {
                    add_into(g, &gq);
                }
                if let Some(g) = slot!(*k) {
                    add_into(g, &gk);
                }
                if let Some(g) = slot!(*v) {
                    add_into(g, &gv);
                }
            }
            Op::SelectRows { x, rows } => {
                if let Some(gx) = slot!(*x) {
                    let c = val(*x).shape()[1];
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * c..(r + 1) * c], &gout[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(gl) = slot!(*logits) {
                    let vocab = val(*logits).shape()[1];
                    for (r, &t) in targets.iter().enumerate() {
                        let g = &mut gl[r * vocab..(r + 1) * vocab];
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        g.iter_mut().zip(p).for_each(|(g, p)| *g += gout[0] * p);
                        g[t as usize] -= gout[0];
                    }
                }
            }
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
            } => {
                if let Some(gs) = slot!(*student) {
                    gs.iter_mut()
                        .zip(student_probs.iter().zip(teacher_probs))
                        .for_each(|(g, (ps, pt))| *g += gout[0] * (ps - pt));
                }
            }
            Op::Hinge { student, active } => {
                if let Some(gs) = slot!(*student) {
                    let vocab = val(*student).shape()[1];
                    for &(r, j, c) in active {
                        gs[r * vocab + j] += gout[0];
                        gs[r * vocab + c] -= gout[0];
                    }
                }
            }
        }
    }
}
