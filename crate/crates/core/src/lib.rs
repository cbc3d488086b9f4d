//! Traffic classification with a sparse mixture-of-experts transformer:
//! capture parsing, flow tokenization, an autodiff tensor engine, the
//! model, its training loops and evaluation tooling.

pub mod eval;
pub mod flow;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod token;
pub mod train;

pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::ModelParams<f32>;
pub type Model64 = model::ModelParams<f64>;
