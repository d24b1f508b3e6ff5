//! Log-Mel feature extraction.
//!
//! Waveform -> pre-emphasis -> Hamming-windowed frames -> zero-padded FFT
//! power spectrum -> Mel filterbank -> log -> fixed-length segments.

mod cache;
mod dsp;
mod features;
mod segment;
mod wav;

pub use cache::{read_feature_cache, write_feature_cache, CACHE_MAGIC, CACHE_VERSION};
pub use dsp::{
    frame_and_window, hamming_window, hz_to_mel, log_compress, mel_to_hz, power_spectrum,
    pre_emphasize, Matrix, MelFilterbank, StftConfig, Waveform, WindowKind,
};
pub use features::{FeatureConfig, FeatureExtractor};
pub use segment::{segment_utterance, LogMelSegment};
pub use wav::read_wav;
