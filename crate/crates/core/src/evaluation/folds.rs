use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::DatasetManifest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldMode {
    Speaker,
    Session,
}

impl fmt::Display for FoldMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FoldMode::Speaker => "speaker",
            FoldMode::Session => "session",
        })
    }
}

impl FromStr for FoldMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "speaker" => Ok(FoldMode::Speaker),
            "session" => Ok(FoldMode::Session),
            _ => Err(Error::Config(format!("unknown fold mode {s:?}; expected speaker or session"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    /// The held-out speaker or session.
    pub unit: String,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub mode: FoldMode,
    pub folds: Vec<Fold>,
}

/// One fold per speaker (or session), ordered by unit id. Utterance ids keep
/// manifest order within each side.
pub fn build_folds(manifest: &DatasetManifest, mode: FoldMode) -> Result<FoldPlan> {
    let unit_of = |i: usize| match mode {
        FoldMode::Speaker => &manifest.entries[i].speaker_id,
        FoldMode::Session => &manifest.entries[i].session_id,
    };
    let mut units: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for i in 0..manifest.len() {
        units.entry(unit_of(i).as_str()).or_default().push(i);
    }
    if units.len() < 2 {
        return Err(Error::Config(format!(
            "{mode} folds need at least 2 distinct {mode}s, manifest has {}",
            units.len()
        )));
    }
    let folds = units
        .keys()
        .map(|&unit| {
            let (test, train): (Vec<_>, Vec<_>) = manifest.entries.iter().partition(|e| match mode {
                FoldMode::Speaker => e.speaker_id == unit,
                FoldMode::Session => e.session_id == unit,
            });
            Fold {
                unit: unit.to_owned(),
                train_ids: train.iter().map(|e| e.utterance_id.clone()).collect(),
                test_ids: test.iter().map(|e| e.utterance_id.clone()).collect(),
            }
        })
        .collect();
    Ok(FoldPlan { mode, folds })
}

impl FoldPlan {
    /// Checks disjointness, coverage and one held-out unit per fold against
    /// `manifest`.
    pub fn verify(&self, manifest: &DatasetManifest) -> Result<()> {
        let all: HashSet<&str> = manifest.entries.iter().map(|e| e.utterance_id.as_str()).collect();
        let mut units = HashSet::new();
        let mut tested = HashSet::new();
        for f in &self.folds {
            if !units.insert(f.unit.as_str()) {
                return Err(Error::Config(format!("unit {} held out twice", f.unit)));
            }
            let train: HashSet<&str> = f.train_ids.iter().map(String::as_str).collect();
            let test: HashSet<&str> = f.test_ids.iter().map(String::as_str).collect();
            if !train.is_disjoint(&test) {
                return Err(Error::Config(format!("fold {}: train and test overlap", f.unit)));
            }
            if train.len() + test.len() != all.len() || !train.union(&test).all(|id| all.contains(id)) {
                return Err(Error::Config(format!("fold {}: does not cover the manifest", f.unit)));
            }
            for id in &test {
                let e = manifest.get(id).expect("covered ids exist");
                let unit = match self.mode {
                    FoldMode::Speaker => &e.speaker_id,
                    FoldMode::Session => &e.session_id,
                };
                if *unit != f.unit {
                    return Err(Error::Config(format!("fold {}: test utterance {id} from {unit}", f.unit)));
                }
                tested.insert(*id);
            }
        }
        if tested.len() != all.len() {
            return Err(Error::Config("some utterances are never tested".into()));
        }
        Ok(())
    }
}
