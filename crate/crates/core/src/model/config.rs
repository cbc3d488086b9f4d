use serde::{Deserialize, Serialize};

use super::ModelError;

/// Epsilon inside every RMSNorm.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    /// Shared-expert hidden width; specialized experts use `d_ff / top_k`.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub aux_weight: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    /// When set, each block uses one SwiGLU FFN of this width instead of experts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_ffn: Option<usize>,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 256,
            heads: 8,
            experts: 8,
            top_k: 2,
            d_ff: 1024,
            vocab_size: 65_541,
            max_tokens: 512,
            aux_weight: 0.02,
            num_classes: None,
            dense_ffn: None,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn expert_width(&self) -> usize {
        self.d_ff / self.top_k
    }

    pub fn is_dense(&self) -> bool {
        self.dense_ffn.is_some()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return fail("layers, d_model, heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!("head width {} must be even for rotary embedding", self.head_dim()));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return fail(format!("top_k {} must lie in 1..={}", self.top_k, self.experts));
        }
        if !self.d_ff.is_multiple_of(self.top_k) {
            return fail(format!("d_ff {} not divisible by top_k {}", self.d_ff, self.top_k));
        }
        if self.vocab_size < 5 {
            return fail("vocab_size must cover the five markers".into());
        }
        if self.max_tokens == 0 {
            return fail("max_tokens must be positive".into());
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return fail(format!("aux_weight {} must be finite and non-negative", self.aux_weight));
        }
        if self.num_classes == Some(0) {
            return fail("num_classes must be positive".into());
        }
        if self.dense_ffn == Some(0) {
            return fail("dense_ffn width must be positive".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail("init_std must be positive".into());
        }
        Ok(())
    }

    /// The parameter-matched dense counterpart of this configuration.
    pub fn dense_variant(&self) -> Self {
        Self {
            dense_ffn: Some(super::dense_ffn_width(self)),
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ModelError::ConfigFile(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
