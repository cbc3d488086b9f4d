use super::{Mode, ModelConfig};

/// FFN weights touched per token: the shared expert plus `k` specialized
/// experts (or the whole dense FFN).
pub fn ffn_active_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    match cfg.dense_ffn {
        Some(w) => 3 * d * w,
        None => 3 * d * cfg.d_ff + cfg.top_k * 3 * d * cfg.expert_width(),
    }
}

/// All FFN expert weights of one block, router and gate excluded.
pub fn ffn_total_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    match cfg.dense_ffn {
        Some(w) => 3 * d * w,
        None => 3 * d * cfg.d_ff + cfg.experts * 3 * d * cfg.expert_width(),
    }
}

/// Width of the single SwiGLU FFN whose parameter count matches a mixture
/// block (experts, router and shared gate), rounded down.
pub fn dense_ffn_width(cfg: &ModelConfig) -> usize {
    let moe = ModelConfig {
        dense_ffn: None,
        ..cfg.clone()
    };
    let d = cfg.d_model;
    (ffn_total_params(&moe) + d * cfg.experts + d) / (3 * d)
}

impl ModelConfig {
    /// Parameter count implied by the config.
    pub fn total_params(&self) -> usize {
        let (d, v) = (self.d_model, self.vocab_size);
        let attention = d + 3 * d * d + d * d;
        let ffn = d + ffn_total_params(self)
            + match self.dense_ffn {
                Some(_) => 0,
                None => d * self.experts + d,
            };
        let head = self.num_classes.map_or(0, |c| d * d + d + d * c + c);
        v * d + self.layers * (attention + ffn) + d + d * v + head
    }
}

/// Multiply-add FLOPs of one forward pass, split by component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub projections: u64,
    pub attention: u64,
    pub routing: u64,
    pub ffn: u64,
    pub head: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.projections + self.attention + self.routing + self.ffn + self.head
    }
}

/// Closed-form FLOPs for `batch` sequences of `seq_len` tokens.
pub fn forward_flops(cfg: &ModelConfig, batch: usize, seq_len: usize, mode: Mode) -> FlopBreakdown {
    let n = (batch * seq_len) as u64;
    let (d, l) = (cfg.d_model as u64, cfg.layers as u64);
    let pairs = (seq_len * (seq_len + 1) / 2) as u64;
    let projections = l * (2 * n * d * d * 3 + 2 * n * d * d);
    let attention = l * 4 * d * pairs * batch as u64;
    let (routing, ffn) = match cfg.dense_ffn {
        Some(_) => (0, l * 2 * n * ffn_active_params(cfg) as u64),
        None => (
            l * (2 * n * d + 2 * n * d * cfg.experts as u64),
            l * 2 * n * ffn_active_params(cfg) as u64,
        ),
    };
    let head = match mode {
        Mode::Lm => 2 * n * d * cfg.vocab_size as u64,
        Mode::Classify => {
            let c = cfg.num_classes.unwrap_or(0) as u64;
            2 * batch as u64 * (d * d + d * c)
        }
    };
    FlopBreakdown {
        projections,
        attention,
        routing,
        ffn,
        head,
    }
}
