use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts (rows true, columns predicted) with WAR and UAR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Vec<Vec<u64>>,
    /// Correct predictions over all predictions.
    pub war: f64,
    /// Mean recall over classes that occur in the true labels.
    pub uar: f64,
    /// Classes with no true sample, left out of the UAR mean.
    pub absent_classes: Vec<usize>,
}

impl Metrics {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn n_classes(&self) -> usize {
        self.confusion.len()
    }
}

pub fn compute_metrics(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Metrics> {
    if truth.len() != predicted.len() {
        return Err(Error::Input(format!(
            "{} true labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if n_classes == 0 {
        return Err(Error::Input("zero classes".into()));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Input(format!("label pair ({t}, {p}) outside {n_classes} classes")));
        }
        confusion[t][p] += 1;
    }
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..n_classes).map(|i| confusion[i][i]).sum();
    let war = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    let mut recalls = Vec::new();
    let mut absent_classes = Vec::new();
    for (i, row) in confusion.iter().enumerate() {
        let n: u64 = row.iter().sum();
        if n == 0 {
            absent_classes.push(i);
        } else {
            recalls.push(row[i] as f64 / n as f64);
        }
    }
    let uar = if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    };
    Ok(Metrics {
        confusion,
        war,
        uar,
        absent_classes,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Averages segment probability vectors and returns the argmax class.
pub fn aggregate_utterance<P: AsRef<[f32]>>(segment_probs: &[P]) -> Result<usize> {
    let first = segment_probs
        .first()
        .ok_or_else(|| Error::Input("utterance has no segments".into()))?;
    let c = first.as_ref().len();
    let mut mean = vec![0.0f64; c];
    for p in segment_probs {
        let p = p.as_ref();
        if p.len() != c {
            return Err(Error::Input("segment probability vectors differ in length".into()));
        }
        mean.iter_mut().zip(p).for_each(|(m, &v)| *m += v as f64);
    }
    let n = segment_probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(argmax_lowest(&mean))
}
