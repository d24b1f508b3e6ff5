//! The time-frequency Transformer: a time branch and a frequency branch, each
//! a convolutional encoder followed by a self-attention encoder, fused by a
//! cross-attention encoder over a third convolutional view of the input, then
//! mean/std pooling and a linear classifier.

mod config;
pub mod export;
mod labels;
mod network;

pub use config::{Ablation, ModelConfig};
pub use labels::{EmotionLabel, LabelSet};
pub use network::{AttentionMaps, ForwardOutput, ForwardTrace, TimeFrequencyTransformer};
