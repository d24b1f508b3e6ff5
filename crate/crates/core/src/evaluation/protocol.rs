use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::model::{Ablation, LabelSet, ModelConfig, TimeFrequencyTransformer};
use crate::nn::RngState;
use crate::training::{TrainConfig, Trainer, TrainingLog};

use super::{aggregate_utterance, build_folds, compute_metrics, Corpus, FoldMode, Metrics};

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub unit: String,
    pub train_segments: usize,
    pub test_utterances: usize,
    pub epochs_run: u32,
    pub metrics: Metrics,
    /// `(true, predicted)` per test utterance, in fold order.
    pub predictions: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct ProtocolResult {
    pub mode: FoldMode,
    pub labels: LabelSet,
    pub folds: Vec<FoldResult>,
    /// Metrics over the test predictions of all folds together.
    pub pooled: Metrics,
}

/// Runs `work(i)` for `0..n` on up to `jobs` threads; results keep index order.
fn run_indexed<R: Send>(n: usize, jobs: usize, work: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(work).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = work(i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every index ran"))
        .collect()
}

/// Trains one model per fold from scratch (seed `train.seed + fold index`),
/// scores each test utterance by its mean segment probabilities, and pools
/// the predictions of all folds.
pub fn run_protocol(
    corpus: &Corpus,
    model: &ModelConfig,
    train: &TrainConfig,
    mode: FoldMode,
    jobs: usize,
) -> Result<ProtocolResult> {
    model.validate()?;
    train.validate()?;
    if model.n_classes != corpus.manifest.labels.len() {
        return Err(Error::Config(format!(
            "model has {} classes, corpus label set has {}",
            model.n_classes,
            corpus.manifest.labels.len()
        )));
    }
    let plan = build_folds(&corpus.manifest, mode)?;
    let results = run_indexed(plan.folds.len(), jobs, |i| {
        let fold = &plan.folds[i];
        run_fold(corpus, model, train, i, &fold.unit, &fold.train_ids, &fold.test_ids).map_err(|e| Error::Fold {
            fold: i + 1,
            unit: fold.unit.clone(),
            source: Box::new(e),
        })
    });
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let (truth, pred): (Vec<usize>, Vec<usize>) = folds.iter().flat_map(|f| f.predictions.iter().copied()).unzip();
    let pooled = compute_metrics(&truth, &pred, model.n_classes)?;
    Ok(ProtocolResult {
        mode,
        labels: corpus.manifest.labels.clone(),
        folds,
        pooled,
    })
}

fn run_fold(
    corpus: &Corpus,
    model: &ModelConfig,
    train: &TrainConfig,
    index: usize,
    unit: &str,
    train_ids: &[String],
    test_ids: &[String],
) -> Result<FoldResult> {
    let mut cfg = train.clone();
    cfg.seed = train.seed.wrapping_add(index as u64);
    cfg.checkpoint_dir = train
        .checkpoint_dir
        .as_ref()
        .map(|d| d.join(format!("fold_{:02}_{}", index + 1, unit)));
    let train_segments = corpus.gather(train_ids);
    let mut trainer = Trainer::new(model.clone(), cfg)?;
    log::info!("fold {} ({unit}): {} training segments", index + 1, train_segments.len());
    match trainer.config.checkpoint_dir.clone() {
        Some(dir) => {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path: PathBuf = dir.join("training_log.csv");
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut log = TrainingLog::new(BufWriter::new(file), false).map_err(|e| Error::io(&path, e))?;
            trainer.fit(&train_segments, Some(&mut log))?;
        }
        None => {
            trainer.fit::<std::io::Sink>(&train_segments, None)?;
        }
    }
    let mut predictions = Vec::with_capacity(test_ids.len());
    for id in test_ids {
        let segs = corpus.gather(std::slice::from_ref(id));
        let probs = trainer.predict(&segs)?;
        let truth = corpus.manifest.get(id).expect("fold ids come from the manifest").label;
        predictions.push((truth, aggregate_utterance(&probs)?));
    }
    let (truth, pred): (Vec<usize>, Vec<usize>) = predictions.iter().copied().unzip();
    Ok(FoldResult {
        fold: index + 1,
        unit: unit.to_owned(),
        train_segments: train_segments.len(),
        test_utterances: test_ids.len(),
        epochs_run: trainer.epoch,
        metrics: compute_metrics(&truth, &pred, model.n_classes)?,
        predictions,
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub parameter_count: usize,
    pub result: ProtocolResult,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Runs the protocol once per module combination, in the given order.
pub fn run_ablations(
    corpus: &Corpus,
    model: &ModelConfig,
    train: &TrainConfig,
    mode: FoldMode,
    which: &[Ablation],
    jobs: usize,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(which.len());
    for &ablation in which {
        let cfg = model.clone().with_ablation(ablation);
        let parameter_count = TimeFrequencyTransformer::<f32>::new(cfg.clone(), &mut RngState::new(0))?.parameter_count();
        let mut t = train.clone();
        t.checkpoint_dir = train
            .checkpoint_dir
            .as_ref()
            .map(|d| d.join(ablation.label().replace('+', "_")));
        log::info!("ablation {ablation}: {parameter_count} parameters");
        let result = run_protocol(corpus, &cfg, &t, mode, jobs)?;
        rows.push(AblationRow {
            ablation,
            parameter_count,
            result,
        });
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexed_runner_keeps_order() {
        let seq = run_indexed(7, 1, |i| i * i);
        let par = run_indexed(7, 3, |i| i * i);
        assert_eq!(seq, par);
        assert!(run_indexed(0, 4, |i| i).is_empty());
    }
}
