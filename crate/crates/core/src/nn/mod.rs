//! Minimal reverse-mode differentiation engine.
//!
//! Operations are recorded on a [`Graph`] (a tape) as they execute; calling
//! [`Graph::backward`] walks the tape in reverse and produces gradients for
//! every node that depends on a trainable parameter. The operator set is
//! deliberately small: it covers exactly what the time-frequency model needs.

mod adam;
pub mod checkpoint;
mod graph;
pub mod gradcheck;
mod kernels;
pub mod layers;
mod params;
mod real;
mod rng;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use graph::{BatchStats, ConvSpec, Graph, Mode, Var};
pub use layers::{AttentionSpec, EncoderOutput};
pub use kernels::{cross_entropy, labels_from_one_hot, softmax_rows};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::{gemm, Real};
pub use rng::RngState;
pub use tensor::Tensor;
