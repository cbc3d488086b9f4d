//! The sparse mixture-of-experts transformer.

mod accounting;
mod config;
mod forward;
mod layers;
mod params;

pub use accounting::{dense_ffn_width, ffn_active_params, ffn_total_params, forward_flops, FlopBreakdown};
pub use config::{ModelConfig, RMS_EPS};
pub use forward::{forward, load_balance_loss, ForwardOutput, LayerTrace, Mode, RoutingTrace};
pub use layers::{causal_self_attention, expert_forward, moe_layer, rmsnorm, route_tokens, top_k, MoeOutput};
pub use params::{
    AttentionSlots, ClassHeadSlots, ExpertSlots, FfnSlots, HeadSlots, LayerSlots, Layout, ModelParams, ParamGroup,
    CONFIG_SUFFIX,
};

use thiserror::Error;

use crate::tensor::{CheckpointError, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("batch is empty or its sequences differ in length")]
    Batch,
    #[error("no valid tokens were routed")]
    NoRoutedTokens,
    #[error("classification requested but the model has no class head")]
    NoClassHead,
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint config: {0}")]
    ConfigFile(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint tensor {name}: {reason}")]
    TensorMismatch { name: String, reason: String },
}
