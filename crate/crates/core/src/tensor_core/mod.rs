//! Dense tensors and the reverse-mode tape the rest of the crate trains with.

mod graph;
mod linalg;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::kl_row;

use crate::error::{Error, Result};

/// Plain matrix product without recording, `[m,k] x [k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

/// KL(softmax(teacher) ‖ softmax(student)) over the last axis, summed over rows.
pub fn kl_divergence(student_logits: &Tensor, teacher_logits: &Tensor) -> Result<Tensor> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::Dimension {
            op: "kl_divergence",
            lhs: student_logits.shape().to_vec(),
            rhs: teacher_logits.shape().to_vec(),
        });
    }
    student_logits.ensure_finite("kl_divergence input")?;
    teacher_logits.ensure_finite("kl_divergence input")?;
    let vocab = *student_logits
        .shape()
        .last()
        .ok_or_else(|| Error::contract("kl_divergence of a scalar"))?;
    let total: f64 = student_logits
        .data()
        .chunks(vocab)
        .zip(teacher_logits.data().chunks(vocab))
        .map(|(s, t)| kl_row(s, t))
        .sum();
    Ok(Tensor::scalar(total as f32))
}

#[cfg(test)]
mod tests;
