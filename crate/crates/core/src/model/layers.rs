use std::cmp::Ordering;

use super::{AttentionSlots, ExpertSlots, FfnSlots, RMS_EPS};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::Scalar;

/// `x_t / sqrt(mean(x_t^2) + eps) * gain` per row.
pub fn rmsnorm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, gain: Var) -> Result<Var, TensorError> {
    let r = g.rsqrt_mean_square(x, T::c(RMS_EPS))?;
    let y = g.mul_col(x, r)?;
    g.mul_row(y, gain)
}

/// Pre-norm multi-head causal attention with rotary queries and keys,
/// returning `h + concat(heads) * W_O`. `positions` gives each row's offset
/// inside its sequence; rows are stacked sequences of `seq_len`.
pub fn causal_self_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    h: Var,
    slots: &AttentionSlots<Var>,
    positions: &[usize],
    seq_len: usize,
) -> Result<Var, TensorError> {
    let z = rmsnorm(g, h, slots.norm)?;
    let mut outs = Vec::with_capacity(slots.heads.len());
    for head in &slots.heads {
        let q = g.matmul(z, head.q)?;
        let q = g.rope(q, positions)?;
        let k = g.matmul(z, head.k)?;
        let k = g.rope(k, positions)?;
        let v = g.matmul(z, head.v)?;
        outs.push(g.causal_attention(q, k, v, seq_len)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let proj = g.matmul(cat, slots.out)?;
    g.add(h, proj)
}

/// SwiGLU: `(SiLU(Z W_gate) * (Z W_up)) W_down`.
pub fn expert_forward<T: Scalar>(g: &mut Graph<'_, T>, z: Var, w: &ExpertSlots<Var>) -> Result<Var, TensorError> {
    let a = g.matmul(z, w.gate)?;
    let a = g.silu(a);
    let b = g.matmul(z, w.up)?;
    let hidden = g.mul(a, b)?;
    g.matmul(hidden, w.down)
}

/// Indices of the `k` largest entries, largest first; equal values keep
/// ascending index order.
pub fn top_k<T: PartialOrd + Copy>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal));
    idx.truncate(k);
    idx
}

/// Routing probabilities `S = softmax(Z W_*)` and the sparse `S~` that keeps
/// each row's top-k entries unchanged.
pub fn route_tokens<T: Scalar>(
    z: &Tensor<T>,
    router: &Tensor<T>,
    k: usize,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let mut g = Graph::inference();
    let (zv, wv) = (g.constant(z.clone()), g.constant(router.clone()));
    let logits = g.matmul(zv, wv)?;
    let s = g.softmax_lastdim(logits)?;
    let s = g.value(s).clone();
    let (n, experts) = s.dims2()?;
    let mut sparse = Tensor::zeros(&[n, experts]);
    for r in 0..n {
        for e in top_k(s.row(r), k) {
            sparse.data_mut()[r * experts + e] = s.row(r)[e];
        }
    }
    Ok((s, sparse))
}

pub struct MoeOutput {
    pub hidden: Var,
    /// Full routing probabilities `[rows, N]`; absent for a dense FFN.
    pub scores: Option<Var>,
    /// Row-major `[rows, k]` selected experts.
    pub selected: Vec<usize>,
}

/// Feed-forward half of a block. For the mixture, `Z = RMSNorm(h)`, the
/// shared expert is scaled by a per-token `sigmoid(Z w)` gate, and every
/// specialized expert runs only on the rows that selected it, weighted by
/// their routing probability.
pub fn moe_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    h: Var,
    slots: &FfnSlots<Var>,
    k: usize,
) -> Result<MoeOutput, TensorError> {
    match slots {
        FfnSlots::Dense { norm, ffn } => {
            let z = rmsnorm(g, h, *norm)?;
            let y = expert_forward(g, z, ffn)?;
            Ok(MoeOutput {
                hidden: g.add(h, y)?,
                scores: None,
                selected: Vec::new(),
            })
        }
        FfnSlots::Moe {
            norm,
            router,
            shared_gate,
            shared,
            experts,
        } => {
            let z = rmsnorm(g, h, *norm)?;
            let gate = g.matvec(z, *shared_gate)?;
            let gate = g.sigmoid(gate);
            let shared_out = expert_forward(g, z, shared)?;
            let shared_out = g.mul_col(shared_out, gate)?;
            let mut acc = g.add(h, shared_out)?;

            let logits = g.matmul(z, *router)?;
            let s = g.softmax_lastdim(logits)?;
            let (n, _) = g.value(s).dims2()?;
            let mut selected = Vec::with_capacity(n * k);
            let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); experts.len()];
            for r in 0..n {
                for e in top_k(g.value(s).row(r), k) {
                    selected.push(e);
                    rows_of[e].push(r);
                }
            }
            for (e, rows) in rows_of.iter().enumerate() {
                if rows.is_empty() {
                    continue;
                }
                let ze = g.gather_rows(z, rows)?;
                let y = expert_forward(g, ze, &experts[e])?;
                let at: Vec<(usize, usize)> = rows.iter().map(|&r| (r, e)).collect();
                let w = g.gather_elems(s, &at)?;
                let y = g.mul_col(y, w)?;
                acc = g.index_add_rows(acc, y, rows)?;
            }
            Ok(MoeOutput {
                hidden: acc,
                scores: Some(s),
                selected,
            })
        }
    }
}
