//! Parameterised building blocks. Each layer only holds [`ParamId`]s; the
//! values live in a [`ParamStore`] so a model can be checkpointed, frozen and
//! shared read-only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ConvSpec, Graph, Mode, ParamId, ParamStore, Real, RngState, Tensor, Var};

/// Transformer encoder sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSpec {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
}

impl AttentionSpec {
    pub const fn new(embed_dim: usize, n_heads: usize, ff_dim: usize) -> Self {
        Self {
            embed_dim,
            n_heads,
            ff_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config(format!("attention sizes must be positive: {self:?}")));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// Uniform `[-bound, bound]` tensor.
fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut RngState) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.uniform(-bound, bound))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        spec: ConvSpec,
        rng: &mut RngState,
    ) -> Result<Self> {
        spec.validate()?;
        let (kh, kw) = spec.kernel;
        let bound = (1.0 / (in_channels * kh * kw) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(&[spec.out_channels, in_channels, kh, kw], bound, rng),
            true,
        )?;
        let bias = store.add(
            format!("{name}.bias"),
            uniform(&[spec.out_channels], bound, rng),
            true,
        )?;
        Ok(Self { weight, bias, spec })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, &self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
                false,
            )?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Train mode normalises with batch statistics and queues a running-stat
    /// update on the graph; eval mode uses the running statistics.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let eps = T::lit(self.eps);
        match g.mode() {
            Mode::Train => {
                let (y, stats) = g.batchnorm2d(x, gamma, beta, eps)?;
                let mom = T::lit(self.momentum);
                let keep = T::one() - mom;
                // running variance tracks the unbiased estimate
                let unbias = T::lit(stats.count as f64 / (stats.count - 1) as f64);
                let rm = store.get(self.running_mean).tensor.data();
                let rv = store.get(self.running_var).tensor.data();
                let new_mean = rm.iter().zip(&stats.mean).map(|(&r, &m)| keep * r + mom * m).collect();
                let new_var = rv
                    .iter()
                    .zip(&stats.var)
                    .map(|(&r, &v)| keep * r + mom * v * unbias)
                    .collect();
                g.push_buffer_update(self.running_mean, new_mean);
                g.push_buffer_update(self.running_var, new_var);
                Ok(y)
            }
            Mode::Eval => g.batchnorm2d_fixed(
                x,
                gamma,
                beta,
                store.get(self.running_mean).tensor.data(),
                store.get(self.running_var).tensor.data(),
                eps,
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        bias: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        let bound = (1.0 / n_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[n_out, n_in], bound, rng), true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), uniform(&[n_out], bound, rng), true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            n_in,
            n_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, n: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[n], T::one()), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[n]), true)?,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, T::lit(self.eps))
    }
}

/// Multi-head scaled dot-product attention with separate query, key, value
/// and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub spec: AttentionSpec,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: AttentionSpec,
        rng: &mut RngState,
    ) -> Result<Self> {
        spec.validate()?;
        let e = spec.embed_dim;
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), e, e, true, rng)?,
            key: Linear::new(store, &format!("{name}.k"), e, e, true, rng)?,
            value: Linear::new(store, &format!("{name}.v"), e, e, true, rng)?,
            output: Linear::new(store, &format!("{name}.out"), e, e, true, rng)?,
            spec,
        })
    }

    /// Returns the projected output `(b, Lq, e)` and the attention weights
    /// node `(b * heads, Lq, Lk)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Var)> {
        let e = self.spec.embed_dim;
        for (name, x) in [("query", q), ("key", k), ("value", v)] {
            let s = g.shape(x);
            if s.len() != 3 || s[2] != e {
                return Err(Error::Shape(format!("attention {name} {s:?}, embed {e}")));
            }
        }
        if g.shape(k)[..2] != g.shape(v)[..2] || g.shape(q)[0] != g.shape(k)[0] {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?}",
                g.shape(q),
                g.shape(k),
                g.shape(v)
            )));
        }
        let heads = self.spec.n_heads;
        let qp = self.query.forward(g, store, q)?;
        let kp = self.key.forward(g, store, k)?;
        let vp = self.value.forward(g, store, v)?;
        let qh = g.split_heads(qp, heads)?;
        let kh = g.split_heads(kp, heads)?;
        let vh = g.split_heads(vp, heads)?;
        let scale = T::lit(1.0 / (self.spec.head_dim() as f64).sqrt());
        let scores = g.batched_matmul(qh, kh, true, scale)?;
        let attn = g.softmax(scores)?;
        let ctx = g.batched_matmul(attn, vh, false, T::one())?;
        let merged = g.merge_heads(ctx, heads)?;
        let out = self.output.forward(g, store, merged)?;
        Ok((out, attn))
    }
}

/// Position-wise `linear -> ReLU -> linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: AttentionSpec,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), spec.embed_dim, spec.ff_dim, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), spec.ff_dim, spec.embed_dim, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Post-norm Transformer encoder layer: `m = LN(Attn + residual)`,
/// `out = LN(FF(m) + m)`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub feed_forward: FeedForward,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: AttentionSpec,
        dropout: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), spec, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), spec.embed_dim)?,
            feed_forward: FeedForward::new(store, &format!("{name}.ff"), spec, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), spec.embed_dim)?,
            dropout,
        })
    }

    /// Self-attention block (query = key = value = `x`).
    pub fn forward_self<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<EncoderOutput> {
        self.forward_cross(g, store, x, x, x)
    }

    /// Cross-attention block; the first residual connection attaches to `v`.
    pub fn forward_cross<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<EncoderOutput> {
        let (a, attention) = self.attention.forward(g, store, q, k, v)?;
        let a = g.dropout(a, self.dropout)?;
        let r = g.add(a, v)?;
        let mid = self.norm1.forward(g, store, r)?;
        let f = self.feed_forward.forward(g, store, mid)?;
        let f = g.dropout(f, self.dropout)?;
        let r = g.add(f, mid)?;
        let out = self.norm2.forward(g, store, r)?;
        Ok(EncoderOutput {
            out,
            mid,
            attention,
        })
    }
}

/// Nodes produced by one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub out: Var,
    /// Output of the attention sub-layer after its residual and layer norm.
    pub mid: Var,
    /// Attention weights, `(b * heads, Lq, Lk)`.
    pub attention: Var,
}
