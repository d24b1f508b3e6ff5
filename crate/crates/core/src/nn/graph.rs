use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::{gemm, ParamId, ParamStore, Real, RngState, Tensor};

/// Lower clamp applied before taking the log of a probability.
pub(crate) const LOG_FLOOR: f64 = 1e-10;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// 2-D convolution hyperparameters: `(rows, cols)` pairs for kernel, stride
/// and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub const fn new(
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("conv spec has a zero size: {self:?}")));
        }
        Ok(())
    }

    /// `floor((n + 2p - k) / s) + 1` along both axes.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |n: usize, k: usize, s: usize, p: usize| {
            let padded = n + 2 * p;
            if padded < k {
                Err(Error::Shape(format!(
                    "kernel {k} does not fit padded extent {padded}"
                )))
            } else {
                Ok((padded - k) / s + 1)
            }
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0)?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

/// Batch statistics observed by a train-mode batch norm, used to update the
/// running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Population variance.
    pub var: Vec<T>,
    /// Elements per channel (`b * h * w`).
    pub count: usize,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        n_in: usize,
        n_out: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Offset {
        x: Var,
    },
    SwapLast2 {
        x: Var,
    },
    Heads {
        x: Var,
        heads: usize,
        split: bool,
    },
    BatchedMatmul {
        a: Var,
        b: Var,
        transpose_b: bool,
        alpha: T,
    },
    Softmax {
        x: Var,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MeanStdPool {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        row_weights: Vec<T>,
        probs: Vec<T>,
    },
    Dot {
        x: Var,
        r: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Build one per forward pass; call [`Graph::backward`] on a
/// scalar node to populate gradients.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    mode: Mode,
    buffer_updates: Vec<(ParamId, Vec<T>)>,
    dropout_rng: Option<RngState>,
    check_finite: bool,
}

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
            buffer_updates: Vec::new(),
            dropout_rng: None,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Supplies the random stream consumed by dropout in train mode.
    pub fn with_dropout_rng(mut self, rng: RngState) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    /// Enables or disables the per-op NaN/Inf check (on in debug builds).
    pub fn check_finite(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `v`, if any
    /// flowed there.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by node {} ({})",
                self.nodes.len(),
                op_name(&op)
            )));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; gradients are not propagated into it unless
    /// `requires_grad` is set.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives gradients (used by gradient checks on inputs).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf. Gradients flow iff the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn push_buffer_update(&mut self, id: ParamId, values: Vec<T>) {
        self.buffer_updates.push((id, values));
    }

    /// Running-statistic updates produced by train-mode batch norms.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn expect_rank(&self, v: Var, rank: usize, op: &str) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::Shape(format!("{op}: expected rank {rank}, got {s:?}")));
        }
        Ok(s)
    }

    /// Cross-correlation of `x (b, cin, h, w)` with `w (cout, cin, kh, kw)`
    /// plus a per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: &ConvSpec) -> Result<Var> {
        let xs = self.expect_rank(x, 4, "conv2d")?.to_vec();
        let ws = self.shape(w).to_vec();
        let (kh, kw) = spec.kernel;
        if ws != [spec.out_channels, xs[1], kh, kw] {
            return Err(Error::Shape(format!(
                "conv2d: weight {ws:?} incompatible with input {xs:?} and {spec:?}"
            )));
        }
        if self.shape(b) != [spec.out_channels] {
            return Err(Error::Shape(format!("conv2d: bias {:?}", self.shape(b))));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], xs[3], spec)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(&[xs[0], spec.out_channels, geom.ho, geom.wo], out)?;
        self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.expect_rank(x, 4, "batchnorm2d")?;
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batchnorm2d: affine params must have {c} channels"
            )));
        }
        Ok((n, c, hw))
    }

    /// Batch norm using the statistics of the current batch. Returns the
    /// output and the observed statistics.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, hw) = self.bn_check(x, gamma, beta)?;
        if n * hw < 2 {
            return Err(Error::Input(
                "batchnorm2d in train mode needs at least 2 values per channel".into(),
            ));
        }
        let (mean, var) = kernels::channel_stats(self.value(x).data(), n, c, hw);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::batchnorm_apply(
            self.value(x).data(),
            n,
            c,
            hw,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(self.shape(x), y)?;
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            &[x, gamma, beta],
        )?;
        Ok((
            out,
            BatchStats {
                mean,
                var,
                count: n * hw,
            },
        ))
    }

    /// Batch norm with fixed (running) statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, hw) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape("batchnorm2d: running stats length".into()));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::batchnorm_apply(
            self.value(x).data(),
            n,
            c,
            hw,
            mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(self.shape(x), y)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let value = Tensor::new(v.shape(), data)?;
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Affine map over the last axis: `x W^T + b` with `W (n_out, n_in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let n_in = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != n_in {
            return Err(Error::Shape(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        let n_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(Error::Shape(format!("linear: bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / n_in;
        let mut out = vec![T::zero(); rows * n_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            out.chunks_mut(n_out).for_each(|r| r.copy_from_slice(bias));
        }
        gemm(
            rows,
            n_in,
            n_out,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            true,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n_out;
        let value = Tensor::new(&shape, out)?;
        let parents: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                n_in,
                n_out,
            },
            &parents,
        )
    }

    /// Normalises over the last axis (population variance), then applies
    /// `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::Shape(format!("layer_norm: affine params must have {n} entries")));
        }
        let (y, xhat, inv_std) = kernels::layer_norm_forward(
            self.value(x).data(),
            n,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::new(self.shape(x), y)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    /// Adds a constant tensor of identical shape (no gradient into the constant).
    pub fn add_constant(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::Shape("add_constant: shape mismatch".into()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(c.shape(), data)?;
        self.push(value, Op::Offset { x }, &[x])
    }

    /// Swaps the last two axes: `(..., m, n) -> (..., n, m)`.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let data = swap_last2(self.value(x).data(), m, n);
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::SwapLast2 { x }, &[x])
    }

    /// `(b, L, e) -> (b * heads, L, e / heads)`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.expect_rank(x, 3, "split_heads")?.to_vec();
        if heads == 0 || s[2] % heads != 0 {
            return Err(Error::Shape(format!("split_heads: {} not divisible by {heads}", s[2])));
        }
        let data = heads_permute(self.value(x).data(), s[0], s[1], s[2], heads, true);
        let value = Tensor::new(&[s[0] * heads, s[1], s[2] / heads], data)?;
        self.push(
            value,
            Op::Heads {
                x,
                heads,
                split: true,
            },
            &[x],
        )
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.expect_rank(x, 3, "merge_heads")?.to_vec();
        if heads == 0 || s[0] % heads != 0 {
            return Err(Error::Shape(format!("merge_heads: {} not divisible by {heads}", s[0])));
        }
        let (b, e) = (s[0] / heads, s[2] * heads);
        let data = heads_permute(self.value(x).data(), b, s[1], e, heads, false);
        let value = Tensor::new(&[b, s[1], e], data)?;
        self.push(
            value,
            Op::Heads {
                x,
                heads,
                split: false,
            },
            &[x],
        )
    }

    /// `alpha * a @ op(b)` over a leading batch axis. `a (B, m, k)`, `b (B, k, n)`
    /// or `(B, n, k)` with `transpose_b`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, transpose_b: bool, alpha: T) -> Result<Var> {
        let sa = self.expect_rank(a, 3, "batched_matmul")?.to_vec();
        let sb = self.expect_rank(b, 3, "batched_matmul")?.to_vec();
        let (bn, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if sb[0] != bn || kb != k {
            return Err(Error::Shape(format!("batched_matmul: {sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); bn * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bn {
            gemm(
                m,
                k,
                n,
                alpha,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                transpose_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(&[bn, m, n], out)?;
        self.push(
            value,
            Op::BatchedMatmul {
                a,
                b,
                transpose_b,
                alpha,
            },
            &[a, b],
        )
    }

    /// Stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        let data = kernels::softmax_rows(self.value(x).data(), n);
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::Softmax { x }, &[x])
    }

    /// Arithmetic mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return Err(Error::Shape(format!("mean_axis: axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let scale = T::one() / T::lit(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let row = &src[(o * len + l) * inner..][..inner];
                dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d *= scale);
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        self.push(
            value,
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    /// Mean over the channel axis of `(b, c, h, w)`, giving `(b, h, w)`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        self.expect_rank(x, 4, "channel_mean")?;
        self.mean_axis(x, 1)
    }

    /// `(b, F, T) -> (b, 2T)`: per column, mean over `F` then population
    /// standard deviation over `F`, concatenated.
    pub fn mean_std_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank(x, 3, "mean_std_pool")?.to_vec();
        let out = kernels::mean_std_pool_forward(self.value(x).data(), s[0], s[1], s[2]);
        let value = Tensor::new(&[s[0], 2 * s[2]], out)?;
        self.push(value, Op::MeanStdPool { x }, &[x])
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape(format!("concat_last: {sa:?} vs {sb:?}")));
        }
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.value(a).numel() / na;
        let mut out = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            out.extend_from_slice(&self.value(a).data()[r * na..(r + 1) * na]);
            out.extend_from_slice(&self.value(b).data()[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = na + nb;
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Concat { a, b }, &[a, b])
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let rng = self
            .dropout_rng
            .as_mut()
            .ok_or_else(|| Error::Config("dropout needs a graph rng".into()))?;
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.uniform(0.0, 1.0) < p { T::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Fused softmax + mean cross-entropy over `(b, c)` logits. Optional
    /// per-class weights turn the mean into a weighted mean.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[T]>,
    ) -> Result<Var> {
        let s = self.expect_rank(logits, 2, "softmax_cross_entropy")?.to_vec();
        let (b, c) = (s[0], s[1]);
        if labels.len() != b {
            return Err(Error::Input(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} outside {c} classes")));
        }
        if class_weights.is_some_and(|w| w.len() != c) {
            return Err(Error::Config("class weight count differs from classes".into()));
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), c);
        let row_weights: Vec<T> = labels
            .iter()
            .map(|&l| class_weights.map_or(T::one(), |w| w[l]))
            .collect();
        let total_w: T = row_weights.iter().copied().sum();
        let floor = T::lit(LOG_FLOOR);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -row_weights[r] * probs[r * c + l].max(floor).ln())
            .sum::<T>()
            / total_w;
        let normalized: Vec<T> = row_weights.iter().map(|&w| w / total_w).collect();
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                row_weights: normalized,
                probs,
            },
            &[logits],
        )
    }

    /// `sum(x * r)` for a constant `r`; a scalar projection used by gradient checks.
    pub fn dot_constant(&mut self, x: Var, r: &[T]) -> Result<Var> {
        if self.value(x).numel() != r.len() {
            return Err(Error::Shape("dot_constant: length mismatch".into()));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(r)
            .map(|(&a, &b)| a * b)
            .sum();
        self.push(Tensor::scalar(s), Op::Dot { x, r: r.to_vec() }, &[x])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop(i, &dy, &mut grads)?;
            }
            grads[i] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradient of every recorded parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                store.accumulate_grad(*id, g);
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    geom,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                self.acc_if(grads, *w, dw);
                self.acc_if(grads, *b, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let g = self.value(*gamma).data();
                let (dx, dg, db) = if *batch_stats {
                    kernels::batchnorm_train_backward(dy, xhat, n, c, hw, inv_std, g)
                } else {
                    kernels::batchnorm_eval_backward(dy, xhat, n, c, hw, inv_std, g)
                };
                self.acc_if(grads, *x, dx);
                self.acc_if(grads, *gamma, dg);
                self.acc_if(grads, *beta, db);
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Linear {
                x,
                w,
                b,
                n_in,
                n_out,
            } => {
                let rows = dy.len() / n_out;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * n_in];
                    gemm(
                        rows,
                        *n_out,
                        *n_in,
                        T::one(),
                        dy,
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dx,
                        false,
                    );
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); n_out * n_in];
                    gemm(
                        *n_out,
                        rows,
                        *n_in,
                        T::one(),
                        dy,
                        true,
                        self.value(*x).data(),
                        false,
                        &mut dw,
                        false,
                    );
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); *n_out];
                        for row in dy.chunks(*n_out) {
                            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).numel();
                let (dx, dg, db) =
                    kernels::layer_norm_backward(dy, xhat, inv_std, n, self.value(*gamma).data());
                self.acc_if(grads, *x, dx);
                self.acc_if(grads, *gamma, dg);
                self.acc_if(grads, *beta, db);
            }
            Op::Add { a, b } => {
                self.acc_if(grads, *a, dy.to_vec());
                self.acc_if(grads, *b, dy.to_vec());
            }
            Op::Offset { x } | Op::Reshape { x } => accumulate(grads, *x, dy.to_vec()),
            Op::SwapLast2 { x } => {
                let s = self.shape(*x);
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                // dy has the swapped layout (.., n, m)
                accumulate(grads, *x, swap_last2(dy, n, m));
            }
            Op::Heads { x, heads, split } => {
                let s = node.value.shape();
                let dx = if *split {
                    // node is (b*h, L, dh); undo the split
                    heads_permute(dy, s[0] / heads, s[1], s[2] * heads, *heads, false)
                } else {
                    heads_permute(dy, s[0], s[1], s[2], *heads, true)
                };
                accumulate(grads, *x, dx);
            }
            Op::BatchedMatmul {
                a,
                b,
                transpose_b,
                alpha,
            } => {
                let sa = self.shape(*a);
                let (bn, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut da = vec![T::zero(); bn * m * k];
                    for i in 0..bn {
                        gemm(
                            m,
                            n,
                            k,
                            *alpha,
                            &dy[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !transpose_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); bn * k * n];
                    for i in 0..bn {
                        let dyi = &dy[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            gemm(n, m, k, *alpha, dyi, true, ai, false, dbi, false);
                        } else {
                            gemm(k, m, n, *alpha, ai, true, dyi, false, dbi, false);
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Softmax { x } => {
                let n = *node.value.shape().last().unwrap();
                accumulate(grads, *x, kernels::softmax_backward(node.value.data(), dy, n));
            }
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let scale = T::one() / T::lit(*len as f64);
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..*outer {
                    let src = &dy[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let dst = &mut dx[(o * len + l) * inner..][..*inner];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d = g * scale);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::MeanStdPool { x } => {
                let s = self.shape(*x);
                let dx = kernels::mean_std_pool_backward(
                    self.value(*x).data(),
                    node.value.data(),
                    dy,
                    s[0],
                    s[1],
                    s[2],
                );
                accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let na = *self.shape(*a).last().unwrap();
                let nb = *self.shape(*b).last().unwrap();
                let rows = dy.len() / (na + nb);
                let mut da = Vec::with_capacity(rows * na);
                let mut db = Vec::with_capacity(rows * nb);
                for row in dy.chunks(na + nb) {
                    da.extend_from_slice(&row[..na]);
                    db.extend_from_slice(&row[na..]);
                }
                self.acc_if(grads, *a, da);
                self.acc_if(grads, *b, db);
            }
            Op::Dropout { x, mask } => {
                let dx = dy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                row_weights,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let mut dx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * c + l] -= T::one();
                    for v in &mut dx[r * c..(r + 1) * c] {
                        *v *= row_weights[r] * dy[0];
                    }
                }
                accumulate(grads, *logits, dx);
            }
            Op::Dot { x, r } => {
                let dx = r.iter().map(|&v| v * dy[0]).collect();
                accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }

    fn acc_if(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if self.needs(v) {
            accumulate(grads, v, delta);
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

/// `(.., m, n) -> (.., n, m)` on a flat buffer.
fn swap_last2<T: Real>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (blk_in, blk_out) in src.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                blk_out[j * m + i] = blk_in[i * n + j];
            }
        }
    }
    out
}

/// Moves between `(b, L, e)` and `(b * heads, L, e / heads)`.
fn heads_permute<T: Real>(src: &[T], b: usize, l: usize, e: usize, heads: usize, split: bool) -> Vec<T> {
    let dh = e / heads;
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for h in 0..heads {
            for li in 0..l {
                let merged = (bi * l + li) * e + h * dh;
                let splitted = ((bi * heads + h) * l + li) * dh;
                let (from, to) = if split { (merged, splitted) } else { (splitted, merged) };
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNorm { .. } => "batchnorm2d",
        Op::Relu { .. } => "relu",
        Op::Linear { .. } => "linear",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Add { .. } => "add",
        Op::Offset { .. } => "add_constant",
        Op::SwapLast2 { .. } => "transpose",
        Op::Heads { .. } => "heads",
        Op::BatchedMatmul { .. } => "batched_matmul",
        Op::Softmax { .. } => "softmax",
        Op::MeanAxis { .. } => "mean_axis",
        Op::MeanStdPool { .. } => "mean_std_pool",
        Op::Concat { .. } => "concat",
        Op::Dropout { .. } => "dropout",
        Op::Reshape { .. } => "reshape",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::Dot { .. } => "dot",
    }
}
