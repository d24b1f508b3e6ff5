use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EmotionLabel {
    pub index: usize,
    pub name: String,
}

/// Fixed bijection between class indices and emotion names for one corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("label set is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || names[..i].contains(n) {
                return Err(Error::Config(format!("label {n:?} is empty or duplicated")));
            }
        }
        if names.len() > u16::MAX as usize {
            return Err(Error::Config("too many labels".into()));
        }
        Ok(Self { names })
    }

    /// Four improvised-speech classes used for IEMOCAP.
    pub fn iemocap() -> Self {
        Self::new(["angry", "happy", "neutral", "sad"]).unwrap()
    }

    /// Six classes of CASIA.
    pub fn casia() -> Self {
        Self::new(["angry", "fear", "happy", "neutral", "sad", "surprise"]).unwrap()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Input(format!("unknown label {name:?}; expected one of {:?}", self.names)))
    }

    pub fn label(&self, index: usize) -> Result<EmotionLabel> {
        self.names
            .get(index)
            .map(|name| EmotionLabel {
                index,
                name: name.clone(),
            })
            .ok_or_else(|| Error::Input(format!("class index {index} outside {} labels", self.len())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_and_name_are_inverse() {
        let set = LabelSet::casia();
        for i in 0..set.len() {
            let l = set.label(i).unwrap();
            assert_eq!(set.index_of(&l.name).unwrap(), i);
        }
        assert!(set.label(6).is_err());
        assert!(set.index_of("bored").is_err());
    }

    #[test]
    fn duplicates_rejected() {
        assert!(LabelSet::new(["a", "b", "a"]).is_err());
        assert!(LabelSet::new(Vec::<String>::new()).is_err());
    }
}
