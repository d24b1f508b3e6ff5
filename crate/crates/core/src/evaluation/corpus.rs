use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::audio::{read_feature_cache, read_wav, FeatureExtractor, LogMelSegment};
use crate::error::{Error, Result};

use super::DatasetManifest;

/// A manifest together with the log-Mel segments of every utterance.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub segments: HashMap<String, Vec<LogMelSegment>>,
}

impl Corpus {
    /// Every manifest utterance needs at least one segment carrying its label.
    pub fn new(manifest: DatasetManifest, segments: HashMap<String, Vec<LogMelSegment>>) -> Result<Self> {
        for e in &manifest.entries {
            let segs = segments
                .get(&e.utterance_id)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Input(format!("no segments for utterance {}", e.utterance_id)))?;
            if let Some(s) = segs.iter().find(|s| s.label as usize != e.label) {
                return Err(Error::Input(format!(
                    "{}#{}: segment label {} disagrees with manifest label {}",
                    e.utterance_id, s.segment_index, s.label, e.label
                )));
            }
        }
        Ok(Self { manifest, segments })
    }

    /// Reads and featurises every audio file of the manifest.
    pub fn extract(manifest: DatasetManifest, extractor: &FeatureExtractor) -> Result<Self> {
        let mut segments = HashMap::new();
        for e in &manifest.entries {
            let wave = read_wav(&e.path)?;
            let segs = extractor.segments(&wave, &e.utterance_id, e.label as u16)?;
            segments.insert(e.utterance_id.clone(), segs);
        }
        Self::new(manifest, segments)
    }

    /// Loads `<dir>/<utterance_id>.tftf` for every manifest entry.
    pub fn load_cache(manifest: DatasetManifest, dir: &Path) -> Result<Self> {
        let mut segments = HashMap::new();
        for e in &manifest.entries {
            let segs = read_feature_cache(&Self::cache_path(dir, &e.utterance_id))?;
            segments.insert(e.utterance_id.clone(), segs);
        }
        Self::new(manifest, segments)
    }

    pub fn cache_path(dir: &Path, utterance_id: &str) -> PathBuf {
        dir.join(format!("{utterance_id}.tftf"))
    }

    /// Segments of the given utterances, in order.
    pub fn gather(&self, ids: &[String]) -> Vec<LogMelSegment> {
        ids.iter()
            .flat_map(|id| self.segments.get(id).into_iter().flatten().cloned())
            .collect()
    }

    /// All segments in manifest order.
    pub fn all_segments(&self) -> Vec<LogMelSegment> {
        self.manifest
            .entries
            .iter()
            .flat_map(|e| self.segments[&e.utterance_id].iter().cloned())
            .collect()
    }

    pub fn n_segments(&self) -> usize {
        self.segments.values().map(Vec::len).sum()
    }
}
