//! Time-frequency Transformer for speech emotion recognition.
//!
//! The crate is organised bottom-up:
//!
//! * [`audio`] turns 16 kHz waveforms into fixed-size log-Mel segments and
//!   reads/writes the segment cache format.
//! * [`nn`] is a small reverse-mode differentiation engine with exactly the
//!   operators the model needs, plus Adam and the checkpoint format.
//! * [`model`] wires the time, frequency and time-frequency branches together.
//! * [`training`] runs the mini-batch loop.
//! * [`evaluation`] builds speaker/session folds, computes WAR/UAR and runs the
//!   cross-validation protocol and the architecture ablations.

pub mod audio;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};

pub use model::{Ablation, EmotionLabel, ForwardTrace, LabelSet, ModelConfig, TimeFrequencyTransformer};
pub use nn::{Graph, Mode, ParamStore, Real, RngState, Tensor, Var};
