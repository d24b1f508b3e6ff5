use tft_core::model::Ablation;
use tft_core::nn::gradcheck::check_params;
use tft_core::nn::{AttentionSpec, ConvSpec};
use tft_core::{Graph, Mode, ModelConfig, RngState, Tensor, TimeFrequencyTransformer};

fn randn(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn conv_stack(c_in: usize, s: &ConvSpec) -> usize {
    let k = s.kernel.0 * s.kernel.1;
    let c = s.out_channels;
    (c_in * c * k + c) + 2 * c + (c * c * k + c) + 2 * c
}

fn encoder(s: &AttentionSpec) -> usize {
    let (e, ff) = (s.embed_dim, s.ff_dim);
    4 * (e * e + e) + 2 * 2 * e + (e * ff + ff) + (ff * e + e)
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

/// Parameter count from the architecture description alone.
fn count_oracle(c: &ModelConfig) -> usize {
    let (f, d) = (c.n_bands, c.n_frames);
    let mut n = 0;
    if c.use_time {
        n += conv_stack(c.in_channels, &c.time_conv) + c.encoder_depth * encoder(&c.time_encoder);
    }
    if c.use_freq {
        n += conv_stack(c.in_channels, &c.freq_conv) + c.encoder_depth * encoder(&c.freq_encoder);
    }
    let pooled = if c.use_fusion {
        n += conv_stack(c.in_channels, &c.fusion_conv) + c.encoder_depth * encoder(&c.fusion_encoder);
        n += if c.use_time { linear(d, d / 4) } else { linear(d / 4, d / 4) };
        n += if c.use_freq { linear(f, f / 4) } else { linear(d / 4, d / 4) };
        2 * (d / 4)
    } else {
        (if c.use_time { f / 4 } else { 0 }) + (if c.use_freq { d / 4 } else { 0 })
    };
    n + linear(pooled, c.n_classes)
}

#[test]
fn parameter_counts_match_architecture() {
    let mut rng = RngState::new(0);
    for ab in Ablation::ALL {
        let cfg = ModelConfig::default().with_ablation(ab);
        let m = TimeFrequencyTransformer::<f32>::new(cfg.clone(), &mut rng).unwrap();
        assert_eq!(m.parameter_count(), count_oracle(&cfg), "{ab}");
    }
    let full = TimeFrequencyTransformer::<f32>::new(ModelConfig::default(), &mut rng).unwrap();
    assert_eq!(full.parameter_count(), 239_464);
    let tiny = ModelConfig::tiny(4, 3);
    let m = TimeFrequencyTransformer::<f32>::new(tiny.clone(), &mut rng).unwrap();
    assert_eq!(m.parameter_count(), count_oracle(&tiny));
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for (i, ab) in Ablation::ALL.into_iter().enumerate() {
        let mut rng = RngState::new(40 + i as u64);
        let cfg = ModelConfig::tiny(4, 3).with_ablation(ab);
        let model = TimeFrequencyTransformer::<f64>::new(cfg, &mut rng).unwrap();
        let x = randn(&[3, 1, 16, 16], &mut rng);
        let labels = [0usize, 2, 1];
        let mut store = model.params().clone();
        let checks = check_params(&mut store, 1e-6, |s| {
            let mut g = Graph::new(Mode::Train);
            let xv = g.input(x.clone());
            let t = model.forward_with(&mut g, s, xv)?;
            let l = model.loss(&mut g, &t, &labels, None)?;
            Ok((g, l))
        })
        .unwrap();
        assert!(!checks.is_empty());
        for c in &checks {
            assert!(c.passes(1e-3), "{ab} {}: {c:?}", c.name);
        }
    }
}

#[test]
fn eval_forward_is_pure() {
    let mut rng = RngState::new(1);
    let model = TimeFrequencyTransformer::<f64>::new(ModelConfig::tiny(4, 4), &mut rng).unwrap();
    let before = model.params().clone();
    let x = randn(&[2, 1, 16, 16], &mut rng);
    let a = model.infer(x.clone()).unwrap();
    let b = model.infer(x.clone()).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.attention.fusion, b.attention.fusion);
    let mut g = Graph::new(Mode::Eval);
    let xv = g.input(x);
    model.forward(&mut g, xv).unwrap();
    assert!(g.take_buffer_updates().is_empty());
    for ((_, p), (_, q)) in model.params().iter().zip(before.iter()) {
        assert_eq!(p.tensor, q.tensor, "{}", p.name);
    }
}

#[test]
fn eval_rows_do_not_depend_on_batch_mates() {
    let mut rng = RngState::new(2);
    let model = TimeFrequencyTransformer::<f64>::new(ModelConfig::tiny(4, 4), &mut rng).unwrap();
    let b = 5;
    let x = randn(&[b, 1, 16, 16], &mut rng);
    let full = model.infer(x.clone()).unwrap();
    let per = 256;
    let perm = [3usize, 0, 4, 1, 2];
    let shuffled: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * per..(i + 1) * per].to_vec()).collect();
    let out = model.infer(Tensor::new(&[b, 1, 16, 16], shuffled).unwrap()).unwrap();
    for (row, &i) in perm.iter().enumerate() {
        for c in 0..4 {
            let (p, q) = (out.probs.at(&[row, c]), full.probs.at(&[i, c]));
            assert!((p - q).abs() < 1e-12);
        }
        let single = model
            .infer(Tensor::new(&[1, 1, 16, 16], x.data()[i * per..(i + 1) * per].to_vec()).unwrap())
            .unwrap();
        for c in 0..4 {
            assert!((single.logits.at(&[0, c]) - full.logits.at(&[i, c])).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_inputs_give_identical_rows() {
    let mut rng = RngState::new(3);
    let model = TimeFrequencyTransformer::<f64>::new(ModelConfig::tiny(4, 4), &mut rng).unwrap();
    let one = randn(&[1, 1, 16, 16], &mut rng);
    let x = Tensor::new(&[3, 1, 16, 16], one.data().repeat(3)).unwrap();
    let out = model.infer(x).unwrap();
    let rows: Vec<&[f64]> = out.probs.data().chunks(4).collect();
    assert_eq!(rows[0], rows[1]);
    assert_eq!(rows[1], rows[2]);
    let argmax = |r: &[f64]| (0..r.len()).fold(0, |b, i| if r[i] > r[b] { i } else { b });
    let logit_rows: Vec<&[f64]> = out.logits.data().chunks(4).collect();
    assert_eq!(argmax(rows[0]), argmax(logit_rows[0]));
}

#[test]
fn trace_shapes_for_batches_of_one_and_three() {
    let mut rng = RngState::new(4);
    let model = TimeFrequencyTransformer::<f32>::new(ModelConfig::default(), &mut rng).unwrap();
    for b in [1usize, 3] {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(randn(&[b, 1, 80, 80], &mut rng).cast::<f32>());
        let t = model.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(t.time_conv.unwrap()), [b, 64, 20, 80]);
        assert_eq!(g.shape(t.time_seq.unwrap()), [b, 80, 20]);
        assert_eq!(g.shape(t.freq_conv.unwrap()), [b, 64, 80, 20]);
        assert_eq!(g.shape(t.freq_seq.unwrap()), [b, 80, 20]);
        assert_eq!(g.shape(t.fusion_conv.unwrap()), [b, 64, 20, 20]);
        for v in [t.q, t.k, t.v, t.p, t.y] {
            assert_eq!(g.shape(v.unwrap()), [b, 20, 20]);
        }
        assert_eq!(g.shape(t.pooled), [b, 40]);
        assert_eq!(g.shape(t.probs), [b, 4]);
        assert_eq!(g.shape(t.time_attention[0]), [b * 2, 80, 80]);
        assert_eq!(g.shape(t.fusion_attention[0]), [b * 4, 20, 20]);
    }
}

#[test]
fn ablations_leave_disabled_branches_out() {
    let mut rng = RngState::new(5);
    for ab in Ablation::ALL {
        let cfg = ModelConfig::tiny(4, 4).with_ablation(ab);
        let (t, f, tf) = ab.toggles();
        let model = TimeFrequencyTransformer::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(randn(&[2, 1, 16, 16], &mut rng));
        let tr = model.forward(&mut g, x).unwrap();
        assert_eq!(tr.time_out.is_some(), t);
        assert_eq!(tr.freq_out.is_some(), f);
        assert_eq!(tr.y.is_some(), tf);
        assert_eq!(g.shape(tr.pooled), [2, cfg.classifier_in()]);
        let out = model.infer(g.value(x).clone()).unwrap();
        assert_eq!(out.attention.time.is_some(), t);
        assert_eq!(out.attention.fusion.is_some(), tf);
    }
}

#[test]
fn deeper_encoders_and_positions_run() {
    let mut rng = RngState::new(6);
    let cfg = ModelConfig {
        encoder_depth: 2,
        positional_encoding: true,
        ..ModelConfig::tiny(4, 4)
    };
    let model = TimeFrequencyTransformer::<f64>::new(cfg, &mut rng).unwrap();
    let base = TimeFrequencyTransformer::<f64>::new(ModelConfig::tiny(4, 4), &mut rng).unwrap();
    assert!(model.parameter_count() > base.parameter_count());
    let out = model.infer(randn(&[2, 1, 16, 16], &mut rng)).unwrap();
    assert!(out.probs.data().iter().all(|p| p.is_finite()));
}

#[test]
fn invalid_configs_and_inputs_are_rejected() {
    let mut rng = RngState::new(7);
    let mut cfg = ModelConfig::default();
    cfg.n_bands = 78;
    assert!(TimeFrequencyTransformer::<f32>::new(cfg, &mut rng).is_err());
    let mut cfg = ModelConfig::default();
    cfg.use_time = false;
    cfg.use_freq = false;
    cfg.use_fusion = false;
    assert!(TimeFrequencyTransformer::<f32>::new(cfg, &mut rng).is_err());
    let model = TimeFrequencyTransformer::<f64>::new(ModelConfig::tiny(4, 4), &mut rng).unwrap();
    assert!(model.infer(Tensor::zeros(&[1, 1, 16, 12])).is_err());
}
