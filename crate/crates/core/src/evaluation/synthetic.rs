//! Separable-by-construction corpora for tests, benchmarks and demos.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::audio::LogMelSegment;
use crate::error::{Error, Result};
use crate::model::LabelSet;
use crate::nn::RngState;

use super::{Corpus, DatasetManifest, ManifestEntry};

/// Log-Mel-like segments whose class is encoded as raised energy in one
/// block of bands.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub labels: LabelSet,
    pub n_speakers: usize,
    /// Speakers per session.
    pub speakers_per_session: usize,
    /// Segments of each class over the whole corpus.
    pub segments_per_class: usize,
    pub segments_per_utterance: usize,
    pub n_bands: usize,
    pub n_frames: usize,
    /// Energy added to the class's band block.
    pub contrast: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            labels: LabelSet::iemocap(),
            n_speakers: 4,
            speakers_per_session: 2,
            segments_per_class: 32,
            segments_per_utterance: 1,
            n_bands: 80,
            n_frames: 80,
            contrast: 3.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

pub fn speaker_id(i: usize) -> String {
    format!("spk{:02}", i + 1)
}

fn session_id(i: usize, per_session: usize) -> String {
    format!("ses{:02}", i / per_session.max(1) + 1)
}

/// Builds the corpus in memory. Utterances are spread round-robin over
/// speakers, so every speaker holds every class.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    let c = spec.labels.len();
    if spec.n_speakers == 0 || spec.segments_per_utterance == 0 || spec.n_bands < c || spec.n_frames == 0 {
        return Err(Error::Config(format!("degenerate synthetic spec {spec:?}")));
    }
    if !spec.segments_per_class.is_multiple_of(spec.segments_per_utterance) {
        return Err(Error::Config("segments_per_class must be a multiple of segments_per_utterance".into()));
    }
    let mut rng = RngState::new(spec.seed);
    let offsets: Vec<f64> = (0..spec.n_speakers).map(|_| 0.5 * rng.normal()).collect();
    let per_class_utts = spec.segments_per_class / spec.segments_per_utterance;
    let block = spec.n_bands / c;
    let (f, d) = (spec.n_bands, spec.n_frames);
    let mut entries = Vec::new();
    let mut segments = HashMap::new();
    for class in 0..c {
        for u in 0..per_class_utts {
            let spk = u % spec.n_speakers;
            let id = format!("{}_{}_{u:03}", speaker_id(spk), spec.labels.names()[class]);
            let segs = (0..spec.segments_per_utterance)
                .map(|s| {
                    let values = (0..f * d)
                        .map(|i| {
                            let band = i / d;
                            let lift = if band / block == class { spec.contrast } else { 0.0 };
                            (-4.0 + offsets[spk] + lift + spec.noise * rng.normal()) as f32
                        })
                        .collect();
                    LogMelSegment {
                        values,
                        n_bands: f,
                        n_frames: d,
                        utterance_id: id.clone(),
                        segment_index: s as u32,
                        label: class as u16,
                    }
                })
                .collect();
            entries.push(ManifestEntry {
                utterance_id: id.clone(),
                path: PathBuf::from(format!("{id}.wav")),
                speaker_id: speaker_id(spk),
                session_id: session_id(spk, spec.speakers_per_session),
                label: class,
            });
            segments.insert(id, segs);
        }
    }
    Corpus::new(DatasetManifest::new(entries, spec.labels.clone())?, segments)
}

/// Tone frequency of a class in [`write_tone_corpus`].
pub fn class_tone_hz(class: usize) -> f64 {
    [300.0, 900.0, 2000.0, 4000.0, 600.0, 3000.0][class % 6] + 50.0 * (class / 6) as f64
}

/// Writes 16-bit mono WAV files (a class-specific tone with light noise)
/// plus `manifest.csv` into `dir`, returning the manifest path.
pub fn write_tone_corpus(
    dir: &Path,
    labels: &LabelSet,
    n_speakers: usize,
    utterances_per_class_per_speaker: usize,
    seconds: f64,
    seed: u64,
) -> Result<PathBuf> {
    let wav_dir = dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut rng = RngState::new(seed);
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let n = (seconds * 16000.0).round() as usize;
    let mut manifest = String::from("path,speaker_id,session_id,label\n");
    for spk in 0..n_speakers {
        let amp = 0.3 + 0.1 * spk as f64 / n_speakers.max(1) as f64;
        for (class, name) in labels.names().iter().enumerate() {
            for u in 0..utterances_per_class_per_speaker {
                let file = format!("{}_{name}_{u:02}.wav", speaker_id(spk));
                let path = wav_dir.join(&file);
                let mut w = hound::WavWriter::create(&path, spec)
                    .map_err(|e| Error::format("wav", format!("{}: {e}", path.display())))?;
                let hz = class_tone_hz(class) * (1.0 + 0.02 * spk as f64);
                for t in 0..n {
                    let s = amp * (2.0 * std::f64::consts::PI * hz * t as f64 / 16000.0).sin() + 0.01 * rng.normal();
                    w.write_sample((s.clamp(-1.0, 1.0) * 32767.0) as i16)
                        .map_err(|e| Error::format("wav", e.to_string()))?;
                }
                w.finalize().map_err(|e| Error::format("wav", e.to_string()))?;
                manifest += &format!("wav/{file},{},{},{name}\n", speaker_id(spk), session_id(spk, 2));
            }
        }
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
