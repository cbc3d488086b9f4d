use std::borrow::Borrow;

use crate::tensor::{Graph, TensorError, Var};
use crate::token::TokenSequence;
use crate::Scalar;

/// Row `b*T + t` predicts token `t + 1` of sequence `b` when that token is valid.
pub fn ntp_targets<S: Borrow<TokenSequence>>(batch: &[S]) -> Vec<Option<usize>> {
    let mut out = Vec::new();
    for s in batch {
        let s = s.borrow();
        for t in 0..s.len() {
            let next = t + 1;
            out.push((next < s.len() && s.valid_mask[next]).then(|| s.ids[next] as usize));
        }
    }
    out
}

/// Mean next-token negative log-likelihood over valid predicted positions.
pub fn ntp_loss<T: Scalar, S: Borrow<TokenSequence>>(
    g: &mut Graph<'_, T>,
    lm_logits: Var,
    batch: &[S],
) -> Result<Var, TensorError> {
    g.cross_entropy(lm_logits, &ntp_targets(batch))
}

/// Batch-mean cross-entropy of class logits `[B, C]`.
pub fn classification_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
    let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    g.cross_entropy(logits, &targets)
}

/// `task + lambda * aux`; the task loss itself when there is nothing to add.
pub fn composite_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    task: Var,
    aux: Option<Var>,
    lambda: f64,
) -> Result<Var, TensorError> {
    match aux {
        Some(a) if lambda != 0.0 => {
            let scaled = g.scale(a, T::c(lambda));
            g.add(task, scaled)
        }
        _ => Ok(task),
    }
}
