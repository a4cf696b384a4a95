//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Provides exactly the operators the scan classifiers need: 2-d/3-d
//! convolution, pooling, batch/layer normalisation, linear layers,
//! batched matmul with softmax attention, gathers for patch and window
//! layouts, and slice-axis max aggregation.

mod error;
pub mod optim;
pub mod params;
mod real;
mod tape;
mod tensor;

pub use error::{NnError, Result};
pub use optim::AdamW;
pub use params::{Binding, Param, ParamId, ParamKind, ParamStore};
pub use real::Real;
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
