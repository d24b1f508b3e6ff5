use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::dsp::PowerSpectrum;
use super::{
    frame_and_window, log_compress, pre_emphasize, segment_utterance, LogMelSegment, Matrix,
    MelFilterbank, StftConfig, Waveform, WindowKind,
};

/// Everything that determines the log-Mel segments of a waveform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub frame_len_samples: usize,
    pub hop_samples: usize,
    pub fft_size: usize,
    pub preemphasis_coeff: f64,
    pub window: WindowKind,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// Energy floor applied before the logarithm.
    pub log_floor: f64,
    pub segment_frames: usize,
    /// Per-segment zero-mean / unit-variance rescaling.
    pub z_normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        let stft = StftConfig::default();
        Self {
            sample_rate_hz: 16000,
            frame_len_samples: stft.frame_len_samples,
            hop_samples: stft.hop_samples,
            fft_size: stft.fft_size,
            preemphasis_coeff: stft.preemphasis_coeff,
            window: stft.window,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            log_floor: 1e-10,
            segment_frames: 80,
            z_normalize: false,
        }
    }
}

impl FeatureConfig {
    pub fn stft(&self) -> StftConfig {
        StftConfig {
            frame_len_samples: self.frame_len_samples,
            hop_samples: self.hop_samples,
            fft_size: self.fft_size,
            preemphasis_coeff: self.preemphasis_coeff,
            window: self.window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft().validate()?;
        if self.segment_frames == 0 {
            return Err(Error::Config("segment_frames must be positive".into()));
        }
        if self.log_floor.is_nan() || self.log_floor <= 0.0 {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Holds the filterbank and FFT plan so many utterances can be processed
/// without rebuilding them. Stateless between calls.
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    filterbank: MelFilterbank,
    spectrum: PowerSpectrum,
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let filterbank = MelFilterbank::new(cfg.sample_rate_hz, cfg.fft_size, cfg.n_mels, cfg.fmin_hz, cfg.fmax_hz)?;
        let spectrum = PowerSpectrum::new(cfg.fft_size);
        Ok(Self {
            cfg,
            filterbank,
            spectrum,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Full-utterance log-Mel spectrogram, `n_mels x n_frames`.
    pub fn logmel(&self, w: &Waveform) -> Result<Matrix> {
        if w.sample_rate_hz != self.cfg.sample_rate_hz {
            return Err(Error::Input(format!(
                "sample rate {} Hz, expected {} Hz (no resampling)",
                w.sample_rate_hz, self.cfg.sample_rate_hz
            )));
        }
        let stft = self.cfg.stft();
        let emphasized = pre_emphasize(w, stft.preemphasis_coeff)?;
        let frames = frame_and_window(&emphasized, &stft)?;
        let power = self.spectrum.apply(&frames)?;
        let mel = self.filterbank.apply(&power)?;
        log_compress(&mel, self.cfg.log_floor)
    }

    pub fn segments(&self, w: &Waveform, utterance_id: &str, label: u16) -> Result<Vec<LogMelSegment>> {
        let logmel = self.logmel(w)?;
        let mut segs = segment_utterance(&logmel, self.cfg.segment_frames, utterance_id, label)?;
        if self.cfg.z_normalize {
            segs.iter_mut().for_each(LogMelSegment::z_normalize);
        }
        Ok(segs)
    }
}
