use proptest::prelude::*;
use tft_core::audio::LogMelSegment;
use tft_core::evaluation::synthetic::{synthetic_corpus, SyntheticSpec};
use tft_core::nn::checkpoint::Checkpoint;
use tft_core::training::{
    inverse_frequency_weights, make_batches, load_model, stack_segments, TrainConfig, Trainer, TrainingLog,
};
use tft_core::{Error, Graph, Mode, ModelConfig, RngState, Tensor, TimeFrequencyTransformer};

fn tiny_data(n_per_class: usize, seed: u64) -> Vec<LogMelSegment> {
    let spec = SyntheticSpec {
        n_bands: 16,
        n_frames: 16,
        segments_per_class: n_per_class,
        seed,
        ..SyntheticSpec::default()
    };
    synthetic_corpus(&spec).unwrap().all_segments()
}

fn cfg(epochs: u32, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs,
        lr: 0.003,
        seed,
        ..TrainConfig::default()
    }
}

fn trainable(t: &Trainer) -> Vec<Vec<f32>> {
    t.model
        .params()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.tensor.data().to_vec())
        .collect()
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let data = tiny_data(4, 1);
    let mut t = Trainer::new(ModelConfig::tiny(4, 4), TrainConfig { lr: 0.0, ..cfg(2, 1) }).unwrap();
    let before = trainable(&t);
    t.fit::<std::io::Sink>(&data, None).unwrap();
    assert_eq!(trainable(&t), before);
    assert_eq!(t.epoch, 2);
}

#[test]
fn loss_decreases_on_small_set() {
    let data = tiny_data(8, 2);
    assert_eq!(data.len(), 32);
    let mut t = Trainer::new(ModelConfig::tiny(4, 4), cfg(50, 2)).unwrap();
    let hist = t.fit::<std::io::Sink>(&data, None).unwrap();
    assert_eq!(hist.len(), 50);
    let first = hist[0].mean_loss;
    let last = hist.last().unwrap().mean_loss;
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    assert!(hist.iter().all(|s| (0.0..=1.0).contains(&s.train_war)));
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let mut rng = RngState::new(3);
    let model = TimeFrequencyTransformer::<f64>::new(ModelConfig::tiny(4, 4), &mut rng).unwrap();
    let b = 4;
    let x: Tensor<f64> = Tensor::new(&[b, 1, 16, 16], (0..b * 256).map(|_| rng.normal()).collect()).unwrap();
    let labels = [0usize, 3, 1, 1];
    let grads = |x: Tensor<f64>, labels: &[usize]| {
        let mut store = model.params().clone();
        store.zero_grad();
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(x);
        let t = model.forward_with(&mut g, &store, xv).unwrap();
        let l = model.loss(&mut g, &t, labels, None).unwrap();
        g.backward(l).unwrap();
        g.accumulate_param_grads(&mut store);
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.grad.clone().unwrap_or_else(|| vec![0.0; p.tensor.numel()]))
            .collect::<Vec<_>>()
    };
    let batch = grads(x.clone(), &labels);
    let mut sum: Vec<Vec<f64>> = batch.iter().map(|g| vec![0.0; g.len()]).collect();
    for i in 0..b {
        let xi = Tensor::new(&[1, 1, 16, 16], x.data()[i * 256..(i + 1) * 256].to_vec()).unwrap();
        for (acc, g) in sum.iter_mut().zip(grads(xi, &labels[i..=i])) {
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
    }
    for (gb, gs) in batch.iter().zip(&sum) {
        let diff: f64 = gb.iter().zip(gs).map(|(a, s)| (a * b as f64 - s).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = gs.iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!(diff <= 1e-6 * norm.max(1e-12) || diff < 1e-14, "{diff} vs {norm}");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = tiny_data(4, 4);
    let model_cfg = ModelConfig::tiny(4, 4);
    let mut full = Trainer::new(model_cfg.clone(), cfg(5, 4)).unwrap();
    full.fit::<std::io::Sink>(&data, None).unwrap();

    let mut part = Trainer::new(model_cfg.clone(), cfg(3, 4)).unwrap();
    part.fit::<std::io::Sink>(&data, None).unwrap();
    let bytes = part.checkpoint().to_bytes();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.epoch, 3);
    let mut resumed = Trainer::resume(model_cfg, cfg(5, 4), &ckpt).unwrap();
    resumed.fit::<std::io::Sink>(&data, None).unwrap();
    assert_eq!(resumed.epoch, 5);
    assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let t = Trainer::new(ModelConfig::tiny(4, 4), cfg(1, 5)).unwrap();
    let bytes = t.checkpoint().to_bytes();
    for bad in [&bytes[..bytes.len() / 2], &bytes[4..], &b"not a checkpoint"[..], &[][..]] {
        assert!(matches!(Checkpoint::from_bytes(bad), Err(Error::Format { .. })));
    }
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Format { .. })));

    let other = Trainer::new(ModelConfig::tiny(8, 4), cfg(1, 5)).unwrap();
    let mut model = other.model.clone();
    assert!(t.checkpoint().restore(model.params_mut()).is_err());
}

#[test]
fn checkpoint_files_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(2, 6);
    let config = TrainConfig {
        eval_every: 1,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..cfg(2, 6)
    };
    let mut t = Trainer::new(ModelConfig::tiny(4, 4), config).unwrap();
    let mut log = TrainingLog::new(Vec::new(), false).unwrap();
    t.fit(&data, Some(&mut log)).unwrap();
    for f in ["epoch_0001.ckpt", "epoch_0002.ckpt", "final.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let model = load_model(ModelConfig::tiny(4, 4), &dir.path().join("final.ckpt")).unwrap();
    let preds = tft_core::training::predict(&model, &data, 3).unwrap();
    assert_eq!(preds, t.predict(&data).unwrap());
    assert!(load_model(ModelConfig::tiny(4, 4), &dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn training_log_layout() {
    let mut buf = Vec::new();
    {
        let data = tiny_data(2, 7);
        let mut t = Trainer::new(ModelConfig::tiny(4, 4), cfg(3, 7)).unwrap();
        let mut log = TrainingLog::new(&mut buf, false).unwrap();
        t.fit(&data, Some(&mut log)).unwrap();
    }
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,mean_loss,train_war,wall_ms");
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 4);
        assert_eq!(cols[0].parse::<u32>().unwrap(), i as u32 + 1);
        assert!(cols[1].parse::<f64>().unwrap().is_finite());
    }
    let mut resumed = Vec::new();
    TrainingLog::new(&mut resumed, true).unwrap();
    assert!(resumed.is_empty());
}

#[test]
fn non_finite_input_is_a_numeric_error() {
    let mut data = tiny_data(2, 8);
    data[0].values[5] = f32::NAN;
    let mut t = Trainer::new(ModelConfig::tiny(4, 4), cfg(1, 8)).unwrap();
    assert!(matches!(t.run_epoch(&data), Err(Error::Numeric(_))));
}

#[test]
fn bad_labels_and_configs_are_rejected() {
    let mut data = tiny_data(2, 9);
    data[1].label = 7;
    let mut t = Trainer::new(ModelConfig::tiny(4, 4), cfg(1, 9)).unwrap();
    assert!(matches!(t.run_epoch(&data), Err(Error::Input(_))));
    assert!(t.run_epoch(&[]).is_err());
    assert!(Trainer::new(ModelConfig::tiny(4, 4), TrainConfig { batch_size: 0, ..cfg(1, 9) }).is_err());
    assert!(Trainer::new(ModelConfig::tiny(4, 4), TrainConfig { lr: f64::NAN, ..cfg(1, 9) }).is_err());
}

#[test]
fn inverse_frequency_weights_oracle() {
    let seg = |label: u16| LogMelSegment {
        values: vec![0.0; 4],
        n_bands: 2,
        n_frames: 2,
        utterance_id: "u".into(),
        segment_index: 0,
        label,
    };
    let data: Vec<_> = [0u16, 0, 0, 1, 2, 2].into_iter().map(seg).collect();
    let w = inverse_frequency_weights(&data, 4);
    // N / (C n_c) with N = 6, C = 4
    assert_eq!(w, vec![0.5, 1.5, 0.75, 1.0]);
    let weighted: f32 = [3.0f32, 1.0, 2.0].iter().zip(&w).map(|(n, w)| n * w).sum();
    assert!((weighted - 6.0 * 3.0 / 4.0).abs() < 1e-6);
    assert!(stack_segments(&[]).is_err());
}

#[test]
fn grad_check_mode_passes_on_tiny_model() {
    let data = tiny_data(1, 10);
    let t = Trainer::new(ModelConfig::tiny(4, 4), cfg(1, 10)).unwrap();
    let worst = t.grad_check(&data, 3).unwrap();
    assert!(worst < 1e-3, "{worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batches_partition_the_data(n in 1usize..40, bs in 1usize..12, seed in 0u64..100) {
        let data: Vec<LogMelSegment> = (0..n)
            .map(|i| LogMelSegment {
                values: vec![i as f32; 4],
                n_bands: 2,
                n_frames: 2,
                utterance_id: format!("u{i}"),
                segment_index: 0,
                label: (i % 3) as u16,
            })
            .collect();
        let batches = make_batches(&data, bs, &mut RngState::new(seed)).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        for b in &batches {
            prop_assert!(b.labels.len() <= bs);
            for (row, &i) in b.indices.iter().enumerate() {
                prop_assert_eq!(b.labels[row], i % 3);
                prop_assert_eq!(b.x.data()[row * 4], i as f32);
            }
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let again = make_batches(&data, bs, &mut RngState::new(seed)).unwrap();
        prop_assert!(batches.iter().zip(&again).all(|(a, b)| a.indices == b.indices));
    }
}
