//! Dense tensors, reverse-mode differentiation, AdamW and checkpoints.

mod checkpoint;
mod graph;
mod optim;
#[allow(clippy::module_inception)]
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected rank {want}, got shape {shape:?}")]
    Rank { want: usize, shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range for bound {bound}")]
    Index { index: usize, bound: usize },
    #[error("rotary embedding needs an even width, got {0}")]
    OddRopeWidth(usize),
    #[error("{rows} rows do not split into sequences of length {seq_len}")]
    SeqLen { rows: usize, seq_len: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
}
