use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::LabelSet;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// File stem of `path`; unique within a manifest.
    pub utterance_id: String,
    pub path: PathBuf,
    pub speaker_id: String,
    pub session_id: String,
    pub label: usize,
}

/// Utterance table read from `path,speaker_id,session_id,label` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub labels: LabelSet,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, labels: LabelSet) -> Result<Self> {
        let mut ids = HashSet::new();
        for e in &entries {
            if !ids.insert(e.utterance_id.as_str()) {
                return Err(Error::Input(format!("duplicate utterance id {:?}", e.utterance_id)));
            }
            if e.speaker_id.is_empty() || e.session_id.is_empty() {
                return Err(Error::Input(format!("{}: empty speaker or session id", e.utterance_id)));
            }
            if e.label >= labels.len() {
                return Err(Error::Input(format!("{}: label index {} out of range", e.utterance_id, e.label)));
            }
        }
        Ok(Self { entries, labels })
    }

    /// Parses manifest text. Relative paths resolve against `base_dir`. A
    /// first line equal to the column header is skipped, as are blank lines
    /// and lines starting with `#`.
    pub fn parse(text: &str, labels: LabelSet, base_dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if i == 0 && cols == ["path", "speaker_id", "session_id", "label"] {
                continue;
            }
            let [path, speaker, session, label] = cols[..] else {
                return Err(Error::format("manifest", format!("line {}: expected 4 columns, got {}", i + 1, cols.len())));
            };
            let path = base_dir.join(path);
            let utterance_id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::format("manifest", format!("line {}: no file name in {path:?}", i + 1)))?
                .to_owned();
            let label = labels
                .index_of(label)
                .map_err(|e| Error::format("manifest", format!("line {}: {e}", i + 1)))?;
            entries.push(ManifestEntry {
                utterance_id,
                path,
                speaker_id: speaker.to_owned(),
                session_id: session.to_owned(),
                label,
            });
        }
        Self::new(entries, labels)
    }

    pub fn read(path: &Path, labels: LabelSet) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, labels, path.parent().unwrap_or(Path::new(".")))
    }

    /// Manifest text with paths relative to `base_dir` where possible.
    pub fn to_csv(&self, base_dir: &Path) -> String {
        let mut s = String::from("path,speaker_id,session_id,label\n");
        for e in &self.entries {
            let p = e.path.strip_prefix(base_dir).unwrap_or(&e.path);
            s += &format!(
                "{},{},{},{}\n",
                p.display(),
                e.speaker_id,
                e.session_id,
                self.labels.names()[e.label]
            );
        }
        s
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, utterance_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utterance_id == utterance_id)
    }
}
