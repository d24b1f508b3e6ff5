//! Mini-batch training with Adam, checkpointing and a per-epoch log.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::LogMelSegment;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TimeFrequencyTransformer};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::gradcheck::relative_error;
use crate::nn::{Adam, AdamConfig, Graph, Mode, RngState, Tensor};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1 << 40;
const DROPOUT_STREAM: u64 = 2 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Checkpoint interval in epochs; 0 writes only the final checkpoint.
    pub eval_every: u32,
    pub checkpoint_dir: Option<PathBuf>,
    /// Verify analytic gradients against finite differences on the first
    /// batch before training.
    pub grad_check_mode: bool,
    /// Weight the loss by inverse class frequency.
    pub class_weights: bool,
    /// Stop once an epoch's training WAR reaches this value.
    pub target_train_war: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 1000,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            eval_every: 0,
            checkpoint_dir: None,
            grad_check_mode: false,
            class_weights: false,
            target_train_war: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub mean_loss: f64,
    pub train_war: f64,
    pub wall_ms: u64,
}

/// Input tensor `(b, 1, f, d)` with class indices and the positions of the
/// segments it was built from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Stacks segments into a `(b, 1, f, d)` tensor.
pub fn stack_segments(segments: &[&LogMelSegment]) -> Result<Tensor<f32>> {
    let first = segments
        .first()
        .ok_or_else(|| Error::Input("cannot stack an empty segment list".into()))?;
    let (f, d) = (first.n_bands, first.n_frames);
    let mut data = Vec::with_capacity(segments.len() * f * d);
    for s in segments {
        if (s.n_bands, s.n_frames) != (f, d) || s.values.len() != f * d {
            return Err(Error::Shape(format!(
                "segment {}#{} is {}x{}, batch is {f}x{d}",
                s.utterance_id, s.segment_index, s.n_bands, s.n_frames
            )));
        }
        data.extend_from_slice(&s.values);
    }
    Tensor::new(&[segments.len(), 1, f, d], data)
}

/// Shuffles segment order with `rng` and cuts it into batches; the final
/// partial batch is kept.
pub fn make_batches(segments: &[LogMelSegment], batch_size: usize, rng: &mut RngState) -> Result<Vec<Batch>> {
    if segments.is_empty() {
        return Err(Error::Input("no training segments".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|idx| {
            let refs: Vec<&LogMelSegment> = idx.iter().map(|&i| &segments[i]).collect();
            Ok(Batch {
                x: stack_segments(&refs)?,
                labels: refs.iter().map(|s| s.label as usize).collect(),
                indices: idx.to_vec(),
            })
        })
        .collect()
}

/// `N / (C * n_c)` per class; classes absent from the data get weight 1.
pub fn inverse_frequency_weights(segments: &[LogMelSegment], n_classes: usize) -> Vec<f32> {
    let mut counts = vec![0usize; n_classes];
    for s in segments {
        if let Some(c) = counts.get_mut(s.label as usize) {
            *c += 1;
        }
    }
    let n = segments.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { (n / (n_classes as f64 * c as f64)) as f32 })
        .collect()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One pass over `batches`: forward, loss, backward and an Adam update per
/// batch. Training WAR is tallied from the train-mode predictions.
pub fn train_epoch(
    model: &mut TimeFrequencyTransformer<f32>,
    optimizer: &mut Adam<f32>,
    batches: &[Batch],
    class_weights: Option<&[f32]>,
    dropout_rng: &RngState,
    epoch: u32,
) -> Result<EpochStats> {
    let start = Instant::now();
    let mut losses = Vec::with_capacity(batches.len());
    let (mut loss_sum, mut seen, mut correct) = (0.0f64, 0usize, 0usize);
    for (bi, batch) in batches.iter().enumerate() {
        let mut g = Graph::new(Mode::Train).with_dropout_rng(dropout_rng.fork(DROPOUT_STREAM | (epoch as u64) << 20 | bi as u64));
        let x = g.input(batch.x.clone());
        let trace = model.forward(&mut g, x)?;
        let loss = model.loss(&mut g, &trace, &batch.labels, class_weights)?;
        let value = g.value(loss).data()[0] as f64;
        losses.push(value);
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "epoch {epoch}, batch {bi}: loss {value}; losses so far this epoch {losses:?}"
            )));
        }
        let probs = g.value(trace.probs);
        let c = probs.shape()[1];
        correct += probs
            .data()
            .chunks(c)
            .zip(&batch.labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        g.backward(loss)?;
        let store = model.params_mut();
        store.zero_grad();
        g.accumulate_param_grads(store);
        store.apply_buffer_updates(g.take_buffer_updates())?;
        optimizer.step(store);
        let n = batch.labels.len();
        loss_sum += value * n as f64;
        seen += n;
    }
    Ok(EpochStats {
        epoch,
        mean_loss: loss_sum / seen.max(1) as f64,
        train_war: correct as f64 / seen.max(1) as f64,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Append-only `epoch,mean_loss,train_war,wall_ms` log.
pub struct TrainingLog<W: Write> {
    out: W,
}

impl<W: Write> TrainingLog<W> {
    pub const HEADER: &'static str = "epoch,mean_loss,train_war,wall_ms";

    /// Writes the header unless `resume` is set.
    pub fn new(mut out: W, resume: bool) -> std::io::Result<Self> {
        if !resume {
            writeln!(out, "{}", Self::HEADER)?;
        }
        Ok(Self { out })
    }

    pub fn record(&mut self, s: &EpochStats) -> std::io::Result<()> {
        writeln!(self.out, "{},{},{},{}", s.epoch, s.mean_loss, s.train_war, s.wall_ms)?;
        self.out.flush()
    }
}

/// Model, optimizer and seeded streams for one training run.
pub struct Trainer {
    pub model: TimeFrequencyTransformer<f32>,
    pub optimizer: Adam<f32>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u32,
    rng: RngState,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = RngState::new(config.seed);
        let model = TimeFrequencyTransformer::new(model_config, &mut rng.fork(INIT_STREAM))?;
        let optimizer = Adam::new(config.adam(), model.params());
        Ok(Self {
            model,
            optimizer,
            config,
            epoch: 0,
            rng,
        })
    }

    /// Continues a run from `checkpoint`; the data order of later epochs is
    /// the same as in an uninterrupted run with the same seed.
    pub fn resume(model_config: ModelConfig, config: TrainConfig, checkpoint: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(model_config, config)?;
        checkpoint.restore(t.model.params_mut())?;
        if let Some(mut opt) = checkpoint.optimizer() {
            opt.config = t.config.adam();
            if opt.state.m.len() != t.model.params().len() {
                return Err(Error::format("checkpoint", "optimizer state does not match the model"));
            }
            t.optimizer = opt;
        }
        t.epoch = checkpoint.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.model.params(), Some(&self.optimizer), self.epoch)
    }

    fn class_weights(&self, data: &[LogMelSegment]) -> Option<Vec<f32>> {
        self.config
            .class_weights
            .then(|| inverse_frequency_weights(data, self.model.config().n_classes))
    }

    fn check_data(&self, data: &[LogMelSegment]) -> Result<()> {
        let n = self.model.config().n_classes;
        if let Some(s) = data.iter().find(|s| s.label as usize >= n) {
            return Err(Error::Input(format!(
                "segment {}#{} has label {} but the model has {n} classes",
                s.utterance_id, s.segment_index, s.label
            )));
        }
        Ok(())
    }

    /// Trains one epoch.
    pub fn run_epoch(&mut self, data: &[LogMelSegment]) -> Result<EpochStats> {
        self.check_data(data)?;
        let weights = self.class_weights(data);
        let epoch = self.epoch + 1;
        let mut shuffle = self.rng.fork(SHUFFLE_STREAM | epoch as u64);
        let batches = make_batches(data, self.config.batch_size, &mut shuffle)?;
        let stats = train_epoch(
            &mut self.model,
            &mut self.optimizer,
            &batches,
            weights.as_deref(),
            &self.rng,
            epoch,
        )?;
        self.epoch = epoch;
        Ok(stats)
    }

    /// Trains until `config.epochs` (or the WAR target), logging every epoch
    /// and writing checkpoints into `checkpoint_dir` when one is set.
    pub fn fit<W: Write>(
        &mut self,
        data: &[LogMelSegment],
        mut log: Option<&mut TrainingLog<W>>,
    ) -> Result<Vec<EpochStats>> {
        if self.config.grad_check_mode {
            let worst = self.grad_check(data, 3)?;
            log::info!("gradient check: worst relative error {worst:.3e}");
            if worst > 1e-3 {
                return Err(Error::Numeric(format!("gradient check failed: relative error {worst:.3e}")));
            }
        }
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let stats = self.run_epoch(data)?;
            log::debug!(
                "epoch {} loss {:.5} train_war {:.4} ({} ms)",
                stats.epoch,
                stats.mean_loss,
                stats.train_war,
                stats.wall_ms
            );
            if let Some(log) = log.as_deref_mut() {
                log.record(&stats).map_err(|e| Error::io("training log", e))?;
            }
            history.push(stats);
            let every = self.config.eval_every;
            if every > 0 && self.epoch.is_multiple_of(every) {
                self.save_checkpoint()?;
            }
            if self.config.target_train_war.is_some_and(|t| stats.train_war >= t) {
                break;
            }
        }
        if self.config.checkpoint_dir.is_some() {
            self.save_checkpoint()?;
        }
        Ok(history)
    }

    /// Writes `epoch_NNNN.ckpt` and `final.ckpt` into the checkpoint
    /// directory; a no-op without one.
    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.config.checkpoint_dir else {
            return Ok(None);
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = self.checkpoint();
        let path = dir.join(format!("epoch_{:04}.ckpt", self.epoch));
        ckpt.write(&path)?;
        ckpt.write(&dir.join("final.ckpt"))?;
        Ok(Some(path))
    }

    /// Eval-mode class probabilities per segment.
    pub fn predict(&self, data: &[LogMelSegment]) -> Result<Vec<Vec<f32>>> {
        predict(&self.model, data, self.config.batch_size)
    }

    /// Compares analytic and numeric gradients in double precision on up to
    /// two training segments, probing `per_param` coordinates of every
    /// trainable tensor. Returns the worst normwise relative error.
    pub fn grad_check(&self, data: &[LogMelSegment], per_param: usize) -> Result<f64> {
        let model = self.model.cast::<f64>();
        let refs: Vec<&LogMelSegment> = data.iter().take(2).collect();
        let x = stack_segments(&refs)?.cast::<f64>();
        let labels: Vec<usize> = refs.iter().map(|s| s.label as usize).collect();
        let loss_of = |store: &crate::nn::ParamStore<f64>| -> Result<f64> {
            let mut g = Graph::new(Mode::Train);
            let xv = g.input(x.clone());
            let t = model.forward_with(&mut g, store, xv)?;
            let l = model.loss(&mut g, &t, &labels, None)?;
            Ok(g.value(l).data()[0])
        };
        let mut store = model.params().clone();
        store.zero_grad();
        {
            let mut g = Graph::new(Mode::Train);
            let xv = g.input(x.clone());
            let t = model.forward_with(&mut g, &store, xv)?;
            let l = model.loss(&mut g, &t, &labels, None)?;
            g.backward(l)?;
            g.accumulate_param_grads(&mut store);
        }
        let mut rng = self.rng.fork(INIT_STREAM + 1);
        let h = 1e-5;
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        let mut worst = 0.0f64;
        for id in ids {
            let n = store.get(id).tensor.numel();
            let grad = store.get(id).grad.clone().unwrap_or_default();
            let (mut a, mut num) = (Vec::new(), Vec::new());
            for _ in 0..per_param.min(n) {
                let j = rng.below(n);
                let orig = store.get(id).tensor.data()[j];
                store.get_mut(id).tensor.data_mut()[j] = orig + h;
                let up = loss_of(&store)?;
                store.get_mut(id).tensor.data_mut()[j] = orig - h;
                let down = loss_of(&store)?;
                store.get_mut(id).tensor.data_mut()[j] = orig;
                a.push(grad[j]);
                num.push((up - down) / (2.0 * h));
            }
            let err = relative_error(&a, &num);
            // both sides vanishing to rounding level is a pass
            let scale = a.iter().chain(&num).fold(0.0f64, |m, v| m.max(v.abs()));
            if scale > 1e-7 {
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}

/// Eval-mode class probabilities for `data`, `chunk` segments at a time.
pub fn predict(model: &TimeFrequencyTransformer<f32>, data: &[LogMelSegment], chunk: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(data.len());
    for part in data.chunks(chunk.max(1)) {
        let refs: Vec<&LogMelSegment> = part.iter().collect();
        let probs = model.infer(stack_segments(&refs)?)?.probs;
        let c = probs.shape()[1];
        out.extend(probs.data().chunks(c).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Loads `final.ckpt` (or the given file) into a model of `config`.
pub fn load_model(config: ModelConfig, path: &Path) -> Result<TimeFrequencyTransformer<f32>> {
    let ckpt = Checkpoint::read(path)?;
    let mut model = TimeFrequencyTransformer::new(config, &mut RngState::new(0))?;
    ckpt.restore(model.params_mut())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segments(n: usize, f: usize, d: usize) -> Vec<LogMelSegment> {
        (0..n)
            .map(|i| LogMelSegment {
                values: vec![i as f32; f * d],
                n_bands: f,
                n_frames: d,
                utterance_id: format!("u{i}"),
                segment_index: 0,
                label: (i % 4) as u16,
            })
            .collect()
    }

    #[test]
    fn batches_keep_partial_tail_and_cover_every_segment() {
        let data = segments(130, 2, 2);
        let batches = make_batches(&data, 64, &mut RngState::new(1)).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, [64, 64, 2]);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..130).collect::<Vec<_>>());
        for b in &batches {
            for (k, &i) in b.indices.iter().enumerate() {
                assert_eq!(b.x.data()[k * 4], i as f32);
                assert_eq!(b.labels[k], i % 4);
            }
        }
    }

    #[test]
    fn batch_order_is_seeded() {
        let data = segments(20, 2, 2);
        let order = |seed| {
            make_batches(&data, 8, &mut RngState::new(seed))
                .unwrap()
                .into_iter()
                .flat_map(|b| b.indices)
                .collect::<Vec<_>>()
        };
        assert_eq!(order(3), order(3));
        assert_ne!(order(3), order(4));
        assert!(make_batches(&[], 8, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn inverse_frequency_weights_balance_counts() {
        let mut data = segments(8, 1, 1);
        data[0].label = 1;
        let w = inverse_frequency_weights(&data, 5);
        // counts: [1, 3, 2, 2, 0]
        assert_eq!(w, [1.6, 8.0 / 15.0, 0.8, 0.8, 1.0]);
    }

    #[test]
    fn log_format() {
        let mut buf = Vec::new();
        let mut log = TrainingLog::new(&mut buf, false).unwrap();
        log.record(&EpochStats {
            epoch: 1,
            mean_loss: 0.5,
            train_war: 0.25,
            wall_ms: 7,
        })
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,mean_loss,train_war,wall_ms\n1,0.5,0.25,7\n");
    }

    #[test]
    fn label_outside_model_is_rejected() {
        let mut t = Trainer::new(ModelConfig::tiny(2, 2), TrainConfig::default()).unwrap();
        let data = segments(4, 16, 16);
        assert!(matches!(t.run_epoch(&data), Err(Error::Input(_))));
    }
}
