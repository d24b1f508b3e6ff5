use crate::error::{Error, Result};

use super::Matrix;

/// A fixed `n_bands x n_frames` excerpt of an utterance's log-Mel
/// spectrogram, stored band-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSegment {
    pub values: Vec<f32>,
    pub n_bands: usize,
    pub n_frames: usize,
    pub utterance_id: String,
    pub segment_index: u32,
    /// Class index into the corpus label set.
    pub label: u16,
}

impl LogMelSegment {
    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.n_frames + frame]
    }

    /// Rescales to zero mean and unit variance over the whole segment.
    pub fn z_normalize(&mut self) {
        let n = self.values.len() as f64;
        let mean = self.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-10).sqrt();
        for v in &mut self.values {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
}

/// Cuts a `bands x frames` log-Mel matrix into consecutive, non-overlapping
/// windows of `seg_len` frames, dropping an incomplete tail. Utterances
/// shorter than `seg_len` are repeated cyclically into a single segment.
pub fn segment_utterance(
    logmel: &Matrix,
    seg_len: usize,
    utterance_id: &str,
    label: u16,
) -> Result<Vec<LogMelSegment>> {
    if logmel.rows == 0 || logmel.cols == 0 {
        return Err(Error::Input(format!("{utterance_id}: empty spectrogram")));
    }
    if seg_len == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    let n_frames = logmel.cols;
    let count = (n_frames / seg_len).max(1);
    let segments = (0..count)
        .map(|s| {
            let mut values = Vec::with_capacity(logmel.rows * seg_len);
            for band in 0..logmel.rows {
                let row = logmel.row(band);
                values.extend((0..seg_len).map(|j| row[(s * seg_len + j) % n_frames] as f32));
            }
            LogMelSegment {
                values,
                n_bands: logmel.rows,
                n_frames: seg_len,
                utterance_id: utterance_id.to_owned(),
                segment_index: s as u32,
                label,
            }
        })
        .collect();
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(bands: usize, frames: usize) -> Matrix {
        Matrix {
            rows: bands,
            cols: frames,
            data: (0..bands * frames).map(|i| i as f64).collect(),
        }
    }

    #[test]
    fn tail_is_dropped() {
        let segs = segment_utterance(&ramp(80, 99), 80, "u", 2).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].get(0, 79), 79.0);
        assert_eq!(segs[0].get(1, 0), 99.0);
        assert_eq!(segs[0].label, 2);
        assert_eq!(segment_utterance(&ramp(80, 160), 80, "u", 0).unwrap().len(), 2);
    }

    #[test]
    fn short_utterance_repeats_cyclically() {
        let m = ramp(3, 40);
        let segs = segment_utterance(&m, 80, "u", 1).unwrap();
        assert_eq!(segs.len(), 1);
        for band in 0..3 {
            for j in 0..80 {
                assert_eq!(segs[0].get(band, j) as f64, m.get(band, j % 40));
            }
        }
    }

    #[test]
    fn empty_spectrogram_is_rejected() {
        let m = Matrix::zeros(80, 0);
        assert!(matches!(segment_utterance(&m, 80, "u", 0), Err(Error::Input(_))));
    }

    #[test]
    fn segments_are_numbered_in_order() {
        let segs = segment_utterance(&ramp(2, 250), 80, "utt", 0).unwrap();
        let idx: Vec<u32> = segs.iter().map(|s| s.segment_index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert_eq!(segs[2].get(0, 0), 160.0);
    }
}
