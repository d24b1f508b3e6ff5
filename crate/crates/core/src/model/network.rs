use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm2d, Conv2d, EncoderLayer, Linear};
use crate::nn::{ConvSpec, Graph, Mode, ParamStore, Real, RngState, Tensor, Var};

use super::ModelConfig;

/// `Act(BN(C(Act(BN(C(x))))))`.
#[derive(Clone, Debug)]
struct ConvStack {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ConvStack {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        spec: ConvSpec,
        rng: &mut RngState,
    ) -> Result<Self> {
        let c = spec.out_channels;
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_channels, spec, rng)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), c)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, spec, rng)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), c)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.bn1.forward(g, store, h)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = self.bn2.forward(g, store, h)?;
        g.relu(h)
    }
}

/// Convolutional front end plus a stack of self-attention encoders.
#[derive(Clone, Debug)]
struct Branch {
    convs: ConvStack,
    encoders: Vec<EncoderLayer>,
    /// Transpose the channel-mean map so the sequence runs over frames.
    transpose: bool,
}

struct BranchTrace {
    conv: Var,
    seq: Var,
    mid: Var,
    out: Var,
    attention: Vec<Var>,
}

impl Branch {
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        positional: bool,
    ) -> Result<BranchTrace> {
        let conv = self.convs.forward(g, store, x)?;
        let mut seq = g.channel_mean(conv)?;
        if self.transpose {
            seq = g.transpose_last2(seq)?;
        }
        let mut h = if positional { add_positions(g, seq)? } else { seq };
        let mut mid = h;
        let mut attention = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            let o = enc.forward_self(g, store, h)?;
            h = o.out;
            mid = o.mid;
            attention.push(o.attention);
        }
        Ok(BranchTrace {
            conv,
            seq,
            mid,
            out: h,
            attention,
        })
    }
}

/// Cross-attention fusion block with the projections that produce its
/// query and key inputs.
#[derive(Clone, Debug)]
struct Fusion {
    convs: ConvStack,
    /// `d -> d/4` over the transposed time-branch output.
    q_proj: Option<Linear>,
    /// `f -> f/4` over the transposed frequency-branch output.
    k_proj: Option<Linear>,
    /// Stand-ins used when a branch is disabled.
    q_from_v: Option<Linear>,
    k_from_v: Option<Linear>,
    encoders: Vec<EncoderLayer>,
}

/// Nodes of one forward pass. Disabled branches leave their fields `None`.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// `x̂′ (b, c1, f/4, d)`
    pub time_conv: Option<Var>,
    /// `ŝ′ (b, d, f/4)`
    pub time_seq: Option<Var>,
    pub time_mid: Option<Var>,
    /// `q̂ (b, d, f/4)`
    pub time_out: Option<Var>,
    pub time_attention: Vec<Var>,
    /// `x̂″ (b, c1, f, d/4)`
    pub freq_conv: Option<Var>,
    /// `ŝ″ (b, f, d/4)`
    pub freq_seq: Option<Var>,
    pub freq_mid: Option<Var>,
    /// `k̂ (b, f, d/4)`
    pub freq_out: Option<Var>,
    pub freq_attention: Vec<Var>,
    /// `x̂ (b, c1, f/4, d/4)`
    pub fusion_conv: Option<Var>,
    pub v: Option<Var>,
    pub q: Option<Var>,
    pub k: Option<Var>,
    pub p: Option<Var>,
    pub y: Option<Var>,
    pub fusion_attention: Vec<Var>,
    /// Classifier input.
    pub pooled: Var,
    pub logits: Var,
    pub probs: Var,
}

impl ForwardTrace {
    /// `(symbol, node)` pairs for every recorded intermediate.
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        let opt = [
            ("time_conv", self.time_conv),
            ("time_seq", self.time_seq),
            ("time_mid", self.time_mid),
            ("time_out", self.time_out),
            ("freq_conv", self.freq_conv),
            ("freq_seq", self.freq_seq),
            ("freq_mid", self.freq_mid),
            ("freq_out", self.freq_out),
            ("fusion_conv", self.fusion_conv),
            ("v", self.v),
            ("q", self.q),
            ("k", self.k),
            ("p", self.p),
            ("y", self.y),
        ];
        opt.into_iter()
            .filter_map(|(n, v)| v.map(|v| (n, v)))
            .chain([("pooled", self.pooled), ("logits", self.logits), ("probs", self.probs)])
            .collect()
    }
}

/// Attention weights of the last layer of each encoder, `(b, heads, L, L)`.
#[derive(Clone, Debug)]
pub struct AttentionMaps<T> {
    pub time: Option<Tensor<T>>,
    pub freq: Option<Tensor<T>>,
    pub fusion: Option<Tensor<T>>,
}

/// Values copied out of a graph after an inference pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    pub attention: AttentionMaps<T>,
}

/// Parameters and wiring of the full model. Parameter values live in
/// [`TimeFrequencyTransformer::params`]; the struct itself only holds ids.
#[derive(Clone, Debug)]
pub struct TimeFrequencyTransformer<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    time: Option<Branch>,
    freq: Option<Branch>,
    fusion: Option<Fusion>,
    classifier: Linear,
}

impl<T: Real> TimeFrequencyTransformer<T> {
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (f, d) = (config.n_bands, config.n_frames);
        let encoders = |store: &mut ParamStore<T>, name: &str, spec, rng: &mut RngState| {
            (0..config.encoder_depth)
                .map(|i| EncoderLayer::new(store, &format!("{name}.enc{i}"), spec, config.dropout, rng))
                .collect::<Result<Vec<_>>>()
        };
        let time = if config.use_time {
            Some(Branch {
                convs: ConvStack::new(&mut store, "time", config.in_channels, config.time_conv, rng)?,
                encoders: encoders(&mut store, "time", config.time_encoder, rng)?,
                transpose: true,
            })
        } else {
            None
        };
        let freq = if config.use_freq {
            Some(Branch {
                convs: ConvStack::new(&mut store, "freq", config.in_channels, config.freq_conv, rng)?,
                encoders: encoders(&mut store, "freq", config.freq_encoder, rng)?,
                transpose: false,
            })
        } else {
            None
        };
        let fusion = if config.use_fusion {
            let convs = ConvStack::new(&mut store, "fusion", config.in_channels, config.fusion_conv, rng)?;
            let (q_proj, q_from_v) = if config.use_time {
                (Some(Linear::new(&mut store, "fusion.q_proj", d, d / 4, true, rng)?), None)
            } else {
                (None, Some(Linear::new(&mut store, "fusion.q_from_v", d / 4, d / 4, true, rng)?))
            };
            let (k_proj, k_from_v) = if config.use_freq {
                (Some(Linear::new(&mut store, "fusion.k_proj", f, f / 4, true, rng)?), None)
            } else {
                (None, Some(Linear::new(&mut store, "fusion.k_from_v", d / 4, d / 4, true, rng)?))
            };
            Some(Fusion {
                convs,
                q_proj,
                k_proj,
                q_from_v,
                k_from_v,
                encoders: encoders(&mut store, "fusion", config.fusion_encoder, rng)?,
            })
        } else {
            None
        };
        let classifier = Linear::new(&mut store, "classifier", config.classifier_in(), config.n_classes, true, rng)?;
        Ok(Self {
            config,
            params: store,
            time,
            freq,
            fusion,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Records the forward pass of `x (b, c_in, f, d)` on `g`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<ForwardTrace> {
        self.forward_with(g, &self.params, x)
    }

    /// Like [`Self::forward`] but reading parameter values from `store`,
    /// which must have been produced by this model.
    pub fn forward_with(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1..] != [cfg.in_channels, cfg.n_bands, cfg.n_frames] {
            return Err(Error::Shape(format!(
                "model input {xs:?}, expected (b, {}, {}, {})",
                cfg.in_channels, cfg.n_bands, cfg.n_frames
            )));
        }
        let pos = cfg.positional_encoding;
        let mut trace = ForwardTrace::default();
        let t = self.time.as_ref().map(|b| b.forward(g, store, x, pos)).transpose()?;
        let fr = self.freq.as_ref().map(|b| b.forward(g, store, x, pos)).transpose()?;
        if let Some(t) = &t {
            trace.time_conv = Some(t.conv);
            trace.time_seq = Some(t.seq);
            trace.time_mid = Some(t.mid);
            trace.time_out = Some(t.out);
            trace.time_attention = t.attention.clone();
        }
        if let Some(fr) = &fr {
            trace.freq_conv = Some(fr.conv);
            trace.freq_seq = Some(fr.seq);
            trace.freq_mid = Some(fr.mid);
            trace.freq_out = Some(fr.out);
            trace.freq_attention = fr.attention.clone();
        }

        let pooled = match &self.fusion {
            Some(fu) => {
                let conv = fu.convs.forward(g, store, x)?;
                let v = g.channel_mean(conv)?;
                let q = match (&t, &fu.q_proj, &fu.q_from_v) {
                    (Some(t), Some(proj), _) => {
                        let qt = g.transpose_last2(t.out)?;
                        proj.forward(g, store, qt)?
                    }
                    (_, _, Some(lin)) => lin.forward(g, store, v)?,
                    _ => unreachable!("query source fixed at construction"),
                };
                let k = match (&fr, &fu.k_proj, &fu.k_from_v) {
                    (Some(fr), Some(proj), _) => {
                        let kt = g.transpose_last2(fr.out)?;
                        let kp = proj.forward(g, store, kt)?;
                        g.transpose_last2(kp)?
                    }
                    (_, _, Some(lin)) => lin.forward(g, store, v)?,
                    _ => unreachable!("key source fixed at construction"),
                };
                let (q, k, v_in) = if pos {
                    (add_positions(g, q)?, add_positions(g, k)?, add_positions(g, v)?)
                } else {
                    (q, k, v)
                };
                let mut h = v_in;
                let mut p = v_in;
                for enc in &fu.encoders {
                    let o = enc.forward_cross(g, store, q, k, h)?;
                    p = o.mid;
                    h = o.out;
                    trace.fusion_attention.push(o.attention);
                }
                trace.fusion_conv = Some(conv);
                trace.v = Some(v);
                trace.q = Some(q);
                trace.k = Some(k);
                trace.p = Some(p);
                trace.y = Some(h);
                g.mean_std_pool(h)?
            }
            None => {
                let summary = |g: &mut Graph<T>, b: &Option<BranchTrace>| -> Result<Option<Var>> {
                    b.as_ref().map(|b| g.mean_axis(b.out, 1)).transpose()
                };
                match (summary(g, &t)?, summary(g, &fr)?) {
                    (Some(a), Some(b)) => g.concat_last(a, b)?,
                    (Some(a), None) | (None, Some(a)) => a,
                    (None, None) => unreachable!("validated config enables a branch"),
                }
            }
        };
        trace.pooled = pooled;
        trace.logits = self.classifier.forward(g, store, pooled)?;
        trace.probs = g.softmax(trace.logits)?;
        Ok(trace)
    }

    /// Mean cross-entropy of the trace's logits against class indices.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        trace: &ForwardTrace,
        labels: &[usize],
        class_weights: Option<&[T]>,
    ) -> Result<Var> {
        g.softmax_cross_entropy(trace.logits, labels, class_weights)
    }

    /// Eval-mode inference with attention maps copied out.
    pub fn infer(&self, x: Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(x);
        let trace = self.forward(&mut g, xv)?;
        let batch = g.shape(xv)[0];
        let maps = |g: &Graph<T>, vars: &[Var], heads: usize| -> Result<Option<Tensor<T>>> {
            vars.last()
                .map(|&a| {
                    let s = g.shape(a);
                    g.value(a).clone().reshape(&[batch, heads, s[1], s[2]])
                })
                .transpose()
        };
        let cfg = &self.config;
        Ok(ForwardOutput {
            logits: g.value(trace.logits).clone(),
            probs: g.value(trace.probs).clone(),
            attention: AttentionMaps {
                time: maps(&g, &trace.time_attention, cfg.time_encoder.n_heads)?,
                freq: maps(&g, &trace.freq_attention, cfg.freq_encoder.n_heads)?,
                fusion: maps(&g, &trace.fusion_attention, cfg.fusion_encoder.n_heads)?,
            },
        })
    }

    /// Copies the model into another precision (used for gradient checks).
    pub fn cast<U: Real>(&self) -> TimeFrequencyTransformer<U> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            params
                .add(p.name.clone(), p.tensor.cast(), p.trainable)
                .expect("names are unique");
        }
        TimeFrequencyTransformer {
            config: self.config.clone(),
            params,
            time: self.time.clone(),
            freq: self.freq.clone(),
            fusion: self.fusion.clone(),
            classifier: self.classifier.clone(),
        }
    }
}

/// Sinusoidal position codes over the sequence axis of `(b, L, e)`.
pub fn sinusoid_table(len: usize, dim: usize) -> Vec<f64> {
    let mut table = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            table[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

fn add_positions<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let table = sinusoid_table(s[1], s[2]);
    let data = (0..s[0])
        .flat_map(|_| table.iter().map(|&v| T::lit(v)))
        .collect();
    let c = Tensor::new(&s, data)?;
    g.add_constant(x, &c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ablation;

    fn random_input<T: Real>(shape: &[usize], rng: &mut RngState) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::lit(rng.normal())).collect()).unwrap()
    }

    #[test]
    fn tiny_shapes_follow_contract() {
        let mut rng = RngState::new(1);
        let model = TimeFrequencyTransformer::<f64>::new(ModelConfig::tiny(4, 3), &mut rng).unwrap();
        let mut g = Graph::new(Mode::Train);
        let x = g.input(random_input(&[3, 1, 16, 16], &mut rng));
        let t = model.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(t.time_conv.unwrap()), [3, 4, 4, 16]);
        assert_eq!(g.shape(t.time_out.unwrap()), [3, 16, 4]);
        assert_eq!(g.shape(t.freq_conv.unwrap()), [3, 4, 16, 4]);
        assert_eq!(g.shape(t.freq_out.unwrap()), [3, 16, 4]);
        assert_eq!(g.shape(t.fusion_conv.unwrap()), [3, 4, 4, 4]);
        for v in [t.q, t.k, t.v, t.p, t.y] {
            assert_eq!(g.shape(v.unwrap()), [3, 4, 4]);
        }
        assert_eq!(g.shape(t.pooled), [3, 8]);
        assert_eq!(g.shape(t.probs), [3, 3]);
    }

    #[test]
    fn every_ablation_builds_and_runs() {
        let full = ModelConfig::tiny(4, 4);
        let mut counts = Vec::new();
        for a in Ablation::ALL {
            let mut rng = RngState::new(5);
            let m = TimeFrequencyTransformer::<f32>::new(full.clone().with_ablation(a), &mut rng).unwrap();
            let out = m.infer(random_input(&[2, 1, 16, 16], &mut rng)).unwrap();
            assert_eq!(out.probs.shape(), [2, 4]);
            counts.push(m.parameter_count());
        }
        let full_count = counts[3];
        assert!(counts[..3].iter().all(|&c| c < full_count), "{counts:?}");
    }

    #[test]
    fn zero_output_projection_reduces_fusion_residual_to_layer_norm_of_v() {
        let mut rng = RngState::new(2);
        let mut model = TimeFrequencyTransformer::<f64>::new(ModelConfig::tiny(4, 4), &mut rng).unwrap();
        for name in ["fusion.enc0.attn.out.weight", "fusion.enc0.attn.out.bias"] {
            let id = model.params().id(name).unwrap();
            let n = model.params().get(id).tensor.numel();
            model.params_mut().set_values(id, &vec![0.0; n]).unwrap();
        }
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(random_input(&[2, 1, 16, 16], &mut rng));
        let t = model.forward(&mut g, x).unwrap();
        let v = g.value(t.v.unwrap()).data().to_vec();
        let p = g.value(t.p.unwrap()).data().to_vec();
        for (row_v, row_p) in v.chunks(4).zip(p.chunks(4)) {
            let mean = row_v.iter().sum::<f64>() / 4.0;
            let var = row_v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
            for (a, b) in row_v.iter().zip(row_p) {
                assert!(((a - mean) / (var + 1e-5).sqrt() - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn positional_codes_change_the_output_and_keep_shapes() {
        let mut cfg = ModelConfig::tiny(4, 4);
        let mut rng = RngState::new(3);
        let x = random_input::<f32>(&[2, 1, 16, 16], &mut rng);
        let plain = TimeFrequencyTransformer::<f32>::new(cfg.clone(), &mut RngState::new(9)).unwrap();
        cfg.positional_encoding = true;
        let coded = TimeFrequencyTransformer::<f32>::new(cfg, &mut RngState::new(9)).unwrap();
        let a = plain.infer(x.clone()).unwrap().probs;
        let b = coded.infer(x).unwrap().probs;
        assert_eq!(a.shape(), b.shape());
        assert_ne!(a, b);
        assert_eq!(sinusoid_table(2, 2), vec![0.0, 1.0, 1f64.sin(), 1f64.cos()]);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut rng = RngState::new(4);
        let model = TimeFrequencyTransformer::<f32>::new(ModelConfig::tiny(4, 4), &mut rng).unwrap();
        assert!(matches!(model.infer(Tensor::zeros(&[1, 1, 16, 12])), Err(Error::Shape(_))));
    }
}
