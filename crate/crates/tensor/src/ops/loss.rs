use crate::element::Element;
use crate::error::{invalid, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub(crate) fn cross_entropy_backward<T: Element>(
    logits_shape: &[usize],
    labels: &[usize],
    probs: &[T],
    upstream: T,
) -> Tensor<T> {
    let classes = logits_shape[1];
    let scale = upstream / T::from_usize(labels.len()).unwrap();
    let mut out: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (row, &label) in labels.iter().enumerate() {
        out[row * classes + label] = out[row * classes + label] - scale;
    }
    Tensor::from_parts(logits_shape.to_vec(), out)
}

/// Per-row log-softmax of `[B,C]` logits via log-sum-exp.
pub fn log_softmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<T> {
    let classes = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

impl<T: Element> Tape<T> {
    /// Mean cross-entropy of `[B,C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(invalid(
                "cross_entropy",
                format!("logits {s:?} do not match {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(invalid(
                "cross_entropy",
                format!("label {bad} out of range for {} classes", s[1]),
            ));
        }
        let logp = log_softmax_rows(self.value(logits));
        let classes = s[1];
        let mut total = T::zero();
        for (row, &label) in labels.iter().enumerate() {
            total = total - logp[row * classes + label];
        }
        let loss = total / T::from_usize(labels.len()).unwrap();
        let probs = logp.iter().map(|&v| v.exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }
}
