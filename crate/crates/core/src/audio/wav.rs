use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

use super::Waveform;

/// Reads a 16-bit PCM WAV file. Multi-channel input is averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::format("wav file", format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            "wav file",
            format!(
                "{}: only 16-bit PCM is supported ({:?}, {} bits)",
                path.display(),
                spec.sample_format,
                spec.bits_per_sample
            ),
        ));
    }
    let channels = spec.channels as usize;
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format("wav file", format!("{}: {e}", path.display())))?;
    if channels > 1 {
        warn!("{}: {channels} channels averaged to mono", path.display());
    }
    let samples = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(samples, spec.sample_rate)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}
