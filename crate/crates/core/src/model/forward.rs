use std::borrow::Borrow;
use std::io::Write;

use super::layers::{causal_self_attention, moe_layer, rmsnorm};
use super::{Layout, ModelError, ModelParams};
use crate::tensor::{Graph, Tensor, Var};
use crate::token::TokenSequence;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Per-position vocabulary logits `[B*T, |V|]`.
    Lm,
    /// Pooled class logits `[B, C]`.
    Classify,
}

/// Routing record of one layer over a batch of stacked rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub experts: usize,
    pub top_k: usize,
    /// Row-major `[rows, N]` probabilities `S`.
    pub probs: Vec<f64>,
    /// Row-major `[rows, k]` selected experts, highest probability first.
    pub selected: Vec<usize>,
    pub valid: Vec<bool>,
}

impl LayerTrace {
    pub fn rows(&self) -> usize {
        self.valid.len()
    }

    pub fn prob_row(&self, r: usize) -> &[f64] {
        &self.probs[r * self.experts..(r + 1) * self.experts]
    }

    pub fn selected_row(&self, r: usize) -> &[usize] {
        &self.selected[r * self.top_k..(r + 1) * self.top_k]
    }

    fn valid_rows(&self) -> Result<Vec<usize>, ModelError> {
        let rows: Vec<usize> = (0..self.rows()).filter(|&r| self.valid[r]).collect();
        if rows.is_empty() {
            return Err(ModelError::NoRoutedTokens);
        }
        Ok(rows)
    }

    /// Share of valid-token assignments per expert, normalized by `T * k`.
    pub fn load(&self) -> Result<Vec<f64>, ModelError> {
        let rows = self.valid_rows()?;
        let mut load = vec![0.0; self.experts];
        for &r in &rows {
            for &e in self.selected_row(r) {
                load[e] += 1.0;
            }
        }
        let denom = (rows.len() * self.top_k) as f64;
        load.iter_mut().for_each(|l| *l /= denom);
        Ok(load)
    }

    /// Mean routing probability per expert over valid tokens.
    pub fn prob(&self) -> Result<Vec<f64>, ModelError> {
        let rows = self.valid_rows()?;
        let mut prob = vec![0.0; self.experts];
        for &r in &rows {
            for (p, &s) in prob.iter_mut().zip(self.prob_row(r)) {
                *p += s;
            }
        }
        let denom = rows.len() as f64;
        prob.iter_mut().for_each(|p| *p /= denom);
        Ok(prob)
    }

    /// `N * sum_e Load_e * Prob_e`.
    pub fn aux_loss(&self) -> Result<f64, ModelError> {
        let (load, prob) = (self.load()?, self.prob()?);
        Ok(self.experts as f64 * load.iter().zip(&prob).map(|(l, p)| l * p).sum::<f64>())
    }

    fn append(&mut self, other: &LayerTrace) {
        self.probs.extend_from_slice(&other.probs);
        self.selected.extend_from_slice(&other.selected);
        self.valid.extend_from_slice(&other.valid);
    }
}

/// Per-layer routing records; empty for a dense model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingTrace {
    pub layers: Vec<LayerTrace>,
}

impl RoutingTrace {
    /// Appends another batch's rows layer by layer.
    pub fn extend(&mut self, other: &RoutingTrace) {
        if self.layers.is_empty() {
            self.layers = other.layers.clone();
            return;
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.append(b);
        }
    }

    /// `layer token expert probability selected` for every valid token.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "layer\ttoken\texpert\tprobability\tselected")?;
        for (l, layer) in self.layers.iter().enumerate() {
            for r in (0..layer.rows()).filter(|&r| layer.valid[r]) {
                let sel = layer.selected_row(r);
                for (e, p) in layer.prob_row(r).iter().enumerate() {
                    writeln!(w, "{l}\t{r}\t{e}\t{p:.9}\t{}", u8::from(sel.contains(&e)))?;
                }
            }
        }
        w.flush()
    }
}

/// Mean over layers of the per-layer balance penalty.
pub fn load_balance_loss(trace: &RoutingTrace) -> Result<f64, ModelError> {
    if trace.layers.is_empty() {
        return Err(ModelError::NoRoutedTokens);
    }
    let mut total = 0.0;
    for layer in &trace.layers {
        total += layer.aux_loss()?;
    }
    Ok(total / trace.layers.len() as f64)
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Differentiable balance loss; `None` for a dense model.
    pub aux: Option<Var>,
    pub trace: RoutingTrace,
    /// Final normalized hidden states `[B*T, d]`.
    pub hidden: Var,
    pub params: Layout<Var>,
    /// One var per tensor, in `ModelParams::tensors` order.
    pub param_vars: Vec<Var>,
    pub seq_len: usize,
}

/// Runs a batch of equal-length sequences through the network.
pub fn forward<'a, T: Scalar, S: Borrow<TokenSequence>>(
    g: &mut Graph<'a, T>,
    params: &'a ModelParams<T>,
    batch: &[S],
    mode: Mode,
) -> Result<ForwardOutput, ModelError> {
    let cfg = &params.config;
    let seq_len = batch.first().map(|s| s.borrow().len()).unwrap_or(0);
    if seq_len == 0 || batch.iter().any(|s| s.borrow().len() != seq_len) {
        return Err(ModelError::Batch);
    }
    let mut ids = Vec::with_capacity(batch.len() * seq_len);
    let mut mask = Vec::with_capacity(batch.len() * seq_len);
    for s in batch {
        let s = s.borrow();
        for (&id, &v) in s.ids.iter().zip(&s.valid_mask) {
            if id as usize >= cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
            ids.push(id as usize);
            mask.push(v);
        }
    }
    let positions: Vec<usize> = (0..ids.len()).map(|r| r % seq_len).collect();

    let (param_vars, slots) = params.bind(g);
    let mut h = g.gather_rows(slots.embedding, &ids)?;
    let mut trace = RoutingTrace::default();
    let mut aux_terms = Vec::new();
    for layer in &slots.layers {
        h = causal_self_attention(g, h, &layer.attention, &positions, seq_len)?;
        let out = moe_layer(g, h, &layer.ffn, cfg.top_k)?;
        h = out.hidden;
        if let Some(s) = out.scores {
            let lt = LayerTrace {
                experts: cfg.experts,
                top_k: cfg.top_k,
                probs: g.value(s).data().iter().map(|x| x.f64()).collect(),
                selected: out.selected,
                valid: mask.clone(),
            };
            aux_terms.push(aux_term(g, s, &lt)?);
            trace.layers.push(lt);
        }
    }
    let aux = match aux_terms.split_first() {
        None => None,
        Some((&first, rest)) => {
            let mut total = first;
            for &t in rest {
                total = g.add(total, t)?;
            }
            Some(g.scale(total, T::c(1.0 / aux_terms.len() as f64)))
        }
    };
    let hidden = rmsnorm(g, h, slots.final_norm)?;
    let logits = match mode {
        Mode::Lm => g.matmul(hidden, slots.vocab)?,
        Mode::Classify => {
            let head = slots.class_head.ok_or(ModelError::NoClassHead)?;
            let pooled = g.masked_mean_pool(hidden, seq_len, &mask)?;
            let x = g.matmul(pooled, head.w1)?;
            let x = g.add_row(x, head.b1)?;
            let x = g.silu(x);
            let x = g.matmul(x, head.w2)?;
            g.add_row(x, head.b2)?
        }
    };
    Ok(ForwardOutput {
        logits,
        aux,
        trace,
        hidden,
        params: slots,
        param_vars,
        seq_len,
    })
}

/// Differentiable `N * sum_e Load_e * Prob_e`; gradients reach the router
/// through `Prob_e`, the assignment counts are constants.
fn aux_term<T: Scalar>(g: &mut Graph<'_, T>, s: Var, trace: &LayerTrace) -> Result<Var, ModelError> {
    let rows = trace.valid_rows()?;
    let load = trace.load()?;
    let scaled: Vec<f64> = load.iter().map(|l| l * trace.experts as f64).collect();
    let sv = g.gather_rows(s, &rows)?;
    let prob = g.mean_rows(sv)?;
    let weights = g.constant(Tensor::from_f64(&[trace.experts], &scaled)?);
    let prod = g.mul(prob, weights)?;
    Ok(g.sum(prod))
}
