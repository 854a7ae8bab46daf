//! Value-level loss helpers for callers that hold logits rather than a tape.

use super::tape::{log_softmax_into, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mean over samples of `-w[y] * log softmax(logits)[y]`.
pub fn weighted_cross_entropy(logits: &Tensor, labels: &[usize], class_weights: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.input(logits);
    let loss = tape.weighted_cross_entropy(x, labels, class_weights)?;
    Ok(tape.value(loss)[0])
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let c = *logits.shape().last().unwrap();
    let mut out = vec![0.0; logits.len()];
    for (row, o) in logits.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        log_softmax_into(row, 1.0 / temperature, o);
        o.iter_mut().for_each(|v| *v = v.exp());
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// `T^2 * mean_n KL(softmax(teacher/T) || softmax(student/T))`.
pub fn distillation_kl(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<f64> {
    let soft = softmax_rows(teacher, temperature)?;
    let mut tape = Tape::new();
    let s = tape.input(student);
    let kl = tape.distill_kl(s, soft.data(), temperature)?;
    Ok(tape.value(kl)[0])
}
