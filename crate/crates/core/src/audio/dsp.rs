use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono PCM samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("empty waveform".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Input("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Dense row-major `f64` matrix used between DSP stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hamming,
    /// No tapering; only used to test the spectrum path.
    Rectangular,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub frame_len_samples: usize,
    pub hop_samples: usize,
    pub fft_size: usize,
    pub preemphasis_coeff: f64,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 20 ms Hamming frames, 10 ms hop, 512-point FFT, pre-emphasis 0.97 at 16 kHz.
    fn default() -> Self {
        Self {
            frame_len_samples: 320,
            hop_samples: 160,
            fft_size: 512,
            preemphasis_coeff: 0.97,
            window: WindowKind::Hamming,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.hop_samples
            && self.hop_samples <= self.frame_len_samples
            && self.frame_len_samples <= self.fft_size)
        {
            return Err(Error::Config(format!(
                "need 0 < hop ({}) <= frame_len ({}) <= fft_size ({})",
                self.hop_samples, self.frame_len_samples, self.fft_size
            )));
        }
        if !(0.0..1.0).contains(&self.preemphasis_coeff) {
            return Err(Error::Config(format!(
                "pre-emphasis coefficient {} outside [0, 1)",
                self.preemphasis_coeff
            )));
        }
        Ok(())
    }

    /// `floor((len - frame_len) / hop) + 1`, or `None` if shorter than a frame.
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        (len >= self.frame_len_samples).then(|| (len - self.frame_len_samples) / self.hop_samples + 1)
    }
}

/// First-order difference filter `y[t] = x[t] - coeff * x[t-1]`, `y[0] = x[0]`.
pub fn pre_emphasize(w: &Waveform, coeff: f64) -> Result<Waveform> {
    if w.samples.is_empty() {
        return Err(Error::Input("cannot pre-emphasize an empty waveform".into()));
    }
    if !(0.0..1.0).contains(&coeff) {
        return Err(Error::Config(format!("pre-emphasis coefficient {coeff} outside [0, 1)")));
    }
    let s = &w.samples;
    let mut out = Vec::with_capacity(s.len());
    out.push(s[0]);
    out.extend(s.windows(2).map(|p| p[1] - coeff * p[0]));
    Ok(Waveform {
        samples: out,
        sample_rate_hz: w.sample_rate_hz,
    })
}

/// Symmetric Hamming window `0.54 - 0.46 cos(2 pi n / (N - 1))`.
pub fn hamming_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Splits into overlapping frames and applies the configured window.
/// Returns an `n_frames x frame_len` matrix.
pub fn frame_and_window(w: &Waveform, cfg: &StftConfig) -> Result<Matrix> {
    cfg.validate()?;
    let n = cfg.n_frames(w.len()).ok_or_else(|| {
        Error::Input(format!(
            "waveform of {} samples is shorter than one {}-sample frame",
            w.len(),
            cfg.frame_len_samples
        ))
    })?;
    let len = cfg.frame_len_samples;
    let window = match cfg.window {
        WindowKind::Hamming => hamming_window(len),
        WindowKind::Rectangular => vec![1.0; len],
    };
    let mut frames = Matrix::zeros(n, len);
    for i in 0..n {
        let src = &w.samples[i * cfg.hop_samples..i * cfg.hop_samples + len];
        for ((d, &s), &h) in frames.row_mut(i).iter_mut().zip(src).zip(&window) {
            *d = s * h;
        }
    }
    Ok(frames)
}

/// Reusable real-input power spectrum of a fixed FFT size.
pub(crate) struct PowerSpectrum {
    fft: Arc<dyn Fft<f64>>,
    size: usize,
}

impl PowerSpectrum {
    pub fn new(size: usize) -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(size),
            size,
        }
    }

    pub fn apply(&self, frames: &Matrix) -> Result<Matrix> {
        if frames.cols > self.size {
            return Err(Error::Config(format!(
                "frame length {} exceeds FFT size {}",
                frames.cols, self.size
            )));
        }
        let bins = self.size / 2 + 1;
        let mut out = Matrix::zeros(frames.rows, bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.size];
        for r in 0..frames.rows {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (c, &v) in buf.iter_mut().zip(frames.row(r)) {
                c.re = v;
            }
            self.fft.process(&mut buf);
            for (d, c) in out.row_mut(r).iter_mut().zip(&buf[..bins]) {
                *d = c.norm_sqr();
            }
        }
        Ok(out)
    }
}

/// `|DFT(frame)|^2` for bins `0..=fft_size/2`, zero-padding each frame.
pub fn power_spectrum(frames: &Matrix, fft_size: usize) -> Result<Matrix> {
    PowerSpectrum::new(fft_size).apply(frames)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with centres equally spaced on the Mel scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    /// `n_mels x (fft_size / 2 + 1)`.
    pub weights: Matrix,
    pub sample_rate_hz: u32,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// `n_mels + 2` edge frequencies; filter `m` spans `edges[m]..edges[m + 2]`
    /// and peaks at `edges[m + 1]`.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate_hz: u32, fft_size: usize, n_mels: usize, fmin_hz: f64, fmax_hz: f64) -> Result<Self> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        if !(0.0 <= fmin_hz && fmin_hz < fmax_hz && fmax_hz <= nyquist) {
            return Err(Error::Config(format!(
                "mel range [{fmin_hz}, {fmax_hz}] Hz invalid for Nyquist {nyquist} Hz"
            )));
        }
        if n_mels == 0 || fft_size < 2 {
            return Err(Error::Config("need n_mels >= 1 and fft_size >= 2".into()));
        }
        let (lo, hi) = (hz_to_mel(fmin_hz), hz_to_mel(fmax_hz));
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bins = fft_size / 2 + 1;
        let bin_hz = sample_rate_hz as f64 / fft_size as f64;
        let mut weights = Matrix::zeros(n_mels, bins);
        for m in 0..n_mels {
            let (left, centre, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for (k, w) in weights.row_mut(m).iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let rise = (f - left) / (centre - left);
                let fall = (right - f) / (right - centre);
                *w = rise.min(fall).max(0.0);
            }
            if weights.row(m).iter().all(|&w| w <= 0.0) {
                return Err(Error::Config(format!(
                    "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; use fewer bands or a larger FFT"
                )));
            }
        }
        Ok(Self {
            weights,
            sample_rate_hz,
            fmin_hz,
            fmax_hz,
            edges_hz,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.weights.rows
    }

    pub fn centre_hz(&self, m: usize) -> f64 {
        self.edges_hz[m + 1]
    }

    /// Maps an `n_frames x bins` power spectrum to `n_mels x n_frames` energies.
    pub fn apply(&self, power: &Matrix) -> Result<Matrix> {
        if power.cols != self.weights.cols {
            return Err(Error::Shape(format!(
                "power spectrum has {} bins, filterbank expects {}",
                power.cols, self.weights.cols
            )));
        }
        let mut out = Matrix::zeros(self.n_mels(), power.rows);
        for m in 0..self.n_mels() {
            let filt = self.weights.row(m);
            for t in 0..power.rows {
                out.data[m * power.rows + t] = filt.iter().zip(power.row(t)).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }
}

/// `ln(max(x, floor))` elementwise.
pub fn log_compress(energies: &Matrix, floor: f64) -> Result<Matrix> {
    if floor.is_nan() || floor <= 0.0 {
        return Err(Error::Config(format!("log floor must be positive, got {floor}")));
    }
    Ok(Matrix {
        rows: energies.rows,
        cols: energies.cols,
        data: energies.data.iter().map(|&v| v.max(floor).ln()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, 16000).unwrap()
    }

    #[test]
    fn pre_emphasis_impulse_and_constant() {
        let out = pre_emphasize(&wave(vec![1.0, 0.0, 0.0]), 0.97).unwrap();
        assert_eq!(out.samples, vec![1.0, -0.97, 0.0]);
        let out = pre_emphasize(&wave(vec![1.0, 1.0, 1.0]), 0.97).unwrap();
        assert_eq!(out.samples[0], 1.0);
        assert!((out.samples[1] - 0.03).abs() < 1e-15);
        assert!((out.samples[2] - 0.03).abs() < 1e-15);
    }

    #[test]
    fn empty_waveform_is_an_input_error() {
        assert!(matches!(Waveform::new(vec![], 16000), Err(Error::Input(_))));
        let w = Waveform {
            samples: vec![],
            sample_rate_hz: 16000,
        };
        assert!(matches!(pre_emphasize(&w, 0.97), Err(Error::Input(_))));
    }

    #[test]
    fn hamming_endpoints_and_midpoint() {
        let h = hamming_window(320);
        assert!((h[0] - 0.08).abs() < 1e-12);
        assert!((h[319] - 0.08).abs() < 1e-12);
        assert!(h.iter().all(|&v| v <= 1.0 + 1e-12));
    }

    #[test]
    fn one_second_gives_99_frames() {
        let cfg = StftConfig::default();
        let frames = frame_and_window(&wave(vec![0.1; 16000]), &cfg).unwrap();
        assert_eq!(frames.rows, 99);
        assert_eq!(frames.cols, 320);
    }

    #[test]
    fn frame_of_ones_is_the_window() {
        let cfg = StftConfig::default();
        let frames = frame_and_window(&wave(vec![1.0; 1000]), &cfg).unwrap();
        assert_eq!(frames.row(1), hamming_window(320).as_slice());
    }

    #[test]
    fn short_waveform_is_rejected() {
        let cfg = StftConfig::default();
        assert!(matches!(frame_and_window(&wave(vec![0.0; 319]), &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn dc_frame_concentrates_in_bin_zero() {
        let frames = Matrix {
            rows: 1,
            cols: 320,
            data: vec![0.5; 320],
        };
        let p = power_spectrum(&frames, 320).unwrap();
        assert!((p.get(0, 0) - (0.5 * 320.0f64).powi(2)).abs() < 1e-6);
        assert!(p.row(0)[1..].iter().all(|&v| v < 1e-12));

        let zero = Matrix::zeros(2, 320);
        assert!(power_spectrum(&zero, 512).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mel_reference_points() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_rejects_bad_ranges() {
        assert!(MelFilterbank::new(16000, 512, 80, 0.0, 9000.0).is_err());
        assert!(MelFilterbank::new(16000, 512, 80, 500.0, 500.0).is_err());
        assert!(MelFilterbank::new(16000, 512, 0, 0.0, 8000.0).is_err());
    }

    #[test]
    fn log_compress_floor() {
        let m = Matrix {
            rows: 1,
            cols: 2,
            data: vec![1.0, 0.0],
        };
        let out = log_compress(&m, 1e-10).unwrap();
        assert_eq!(out.data[0], 0.0);
        assert!((out.data[1] + 23.0259).abs() < 1e-4);
        assert!(log_compress(&m, 0.0).is_err());
    }
}
