//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records every primitive in execution order. Values are
//! immutable once recorded; [`Tape::backward`] walks the record in reverse
//! and returns a [`Gradients`] table holding `dLoss/dNode` for every node
//! that requires a gradient. A node used by several ops receives the sum of
//! its path gradients.
//!
//! Only the primitives needed by the fusion network are provided:
//! `conv2d` ("same" padding, stride 1), `batch_norm`, `prelu`, `sigmoid`,
//! `softmax_rows`, `matmul`, the attention reshapes, `concat_channels` and
//! the elementwise family.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{axis_permutation, AttentionAxis, Tensor};

/// Epsilon added to the variance inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Binary elementwise operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ewise {
    Add,
    Mul,
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate.
    pub var: Vec<T>,
}

/// Running mean/variance used by batch norm at evaluation time.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// Exponential moving average update with [`Self::MOMENTUM`].
    pub fn update(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64_lossy(Self::MOMENTUM);
        let keep = T::one() - m;
        for (r, &s) in self.mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * s;
        }
        for (r, &s) in self.var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * s;
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Prelu {
        input: Var,
        slope: Var,
    },
    Sigmoid(Var),
    SoftmaxRows(Var),
    Matmul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    /// `out[o] = in[perm[o]]`
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    AffineCombine {
        a: Var,
        b: Var,
        m: Var,
    },
    Scale(Var, T),
    Sum(Var),
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// 2-D cross-correlation with "same" zero padding and stride (1, 1).
    ///
    /// `input` is `N x Cin x T x F`, `weight` is `Cout x Cin x Kt x Kf` with
    /// odd kernel extents, `bias` has `Cout` entries.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let (n, cin, t, f) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kt, kf) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if kt % 2 == 0 || kf % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel extents must be odd, got {kt}x{kf}"),
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape("conv2d", self.shape(bias), &[cout]));
        }
        let p = t * f;
        let k = cin * kt * kf;
        let geom = ConvGeom { cin, t, f, kt, kf };
        let x = self.data(input);
        let w = self.data(weight);
        let b = self.data(bias);
        let mut out = vec![T::zero(); n * cout * p];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * p]
        };
        for s in 0..n {
            let xn = &x[s * cin * p..(s + 1) * cin * p];
            let on = &mut out[s * cout * p..(s + 1) * cout * p];
            for (co, row) in on.chunks_mut(p).enumerate() {
                row.fill(b[co]);
            }
            let cols_ref: &[T] = if geom.is_pointwise() {
                xn
            } else {
                im2col(xn, &geom, &mut cols);
                &cols
            };
            gemm(
                MatRef::new(w, cout, k),
                MatRef::new(cols_ref, k, p),
                T::one(),
                on,
            );
        }
        let value = Tensor::new(&[n, cout, t, f], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// Per-channel batch normalization over the N, T and F axes.
    ///
    /// Training mode normalizes with the batch statistics and returns them
    /// (so the caller can fold them into its [`RunningStats`]); evaluation
    /// mode uses `running`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        training: bool,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid(
                "batch_norm",
                format!("expected N x C x T x F input, got {xs:?}"),
            ));
        }
        let (n, c, t, f) = (xs[0], xs[1], xs[2], xs[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::invalid(
                    "batch_norm",
                    format!(
                        "{name} shape {:?} does not match {c} channels",
                        self.shape(v)
                    ),
                ));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::invalid(
                "batch_norm",
                format!(
                    "running stats sized for {} channels, input has {c}",
                    running.mean.len()
                ),
            ));
        }
        let p = t * f;
        let count = n * p;
        if training && count < 2 {
            return Err(Error::invalid(
                "batch_norm",
                "training mode needs at least two elements per channel",
            ));
        }
        let eps = T::from_f64_lossy(BN_EPS);
        let x = self.data(input);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if training {
            let inv_count = T::one() / T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut acc = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * p;
                    acc += x[base..base + p]
                        .iter()
                        .map(|v| v.to_f64_lossy())
                        .sum::<f64>();
                }
                let mu = T::from_f64_lossy(acc) * inv_count;
                let mut sq = T::zero();
                for s in 0..n {
                    let base = (s * c + ch) * p;
                    for &v in &x[base..base + p] {
                        let d = v - mu;
                        sq = sq + d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq * inv_count;
            }
        } else {
            mean.copy_from_slice(&running.mean);
            var.copy_from_slice(&running.var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * p;
                for i in base..base + p {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let stats = training.then(|| {
            let scale = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
            BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|&v| v * scale).collect(),
            }
        });
        let value = Tensor::new(&xs, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            &[input, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Parametric ReLU with one slope per channel (axis 1 of `N x C x T x F`).
    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        let (n, c, t, f) = self.value(input).dims4();
        if self.shape(slope) != [c] {
            return Err(Error::shape("prelu", self.shape(input), self.shape(slope)));
        }
        let p = t * f;
        let x = self.data(input);
        let a = self.data(slope);
        let mut out = Vec::with_capacity(x.len());
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * p;
                let ach = a[ch];
                out.extend(
                    x[base..base + p]
                        .iter()
                        .map(|&v| v.max(T::zero()) + ach * v.min(T::zero())),
                );
            }
        }
        let value = Tensor::new(self.shape(input), out)?;
        Ok(self.push(value, Op::Prelu { input, slope }, &[input, slope]))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid_scalar);
        self.push(value, Op::Sigmoid(input), &[input])
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::invalid("softmax_rows", "scalar input"))?;
        let x = self.data(input);
        let mut out = vec![T::zero(); x.len()];
        for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - max).exp();
                total = total + *oi;
            }
            // Subnormal weights are flushed: they are numerically irrelevant
            // and slow every later product by orders of magnitude.
            for oi in o.iter_mut() {
                let v = *oi / total;
                *oi = if v < T::min_positive_value() {
                    T::zero()
                } else {
                    v
                };
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::SoftmaxRows(input), &[input]))
    }

    /// `a · b` for `R x K` by `K x D`, or batched `N x R x K` by `N x K x D`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` stored `D x K` (batched: `N x D x K`).
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (dims, batched) = matmul_dims(self.shape(a), self.shape(b), transpose_b)?;
        let MatmulDims { batch, r, k, d } = dims;
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![T::zero(); batch * r * d];
        for s in 0..batch {
            let am = MatRef::new(&ad[s * r * k..(s + 1) * r * k], r, k);
            let bm = if transpose_b {
                MatRef::new(&bd[s * d * k..(s + 1) * d * k], d, k).t()
            } else {
                MatRef::new(&bd[s * k * d..(s + 1) * k * d], k, d)
            };
            gemm(am, bm, T::zero(), &mut out[s * r * d..(s + 1) * r * d]);
        }
        let shape = if batched {
            vec![batch, r, d]
        } else {
            vec![r, d]
        };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Matmul { a, b, transpose_b }, &[a, b]))
    }

    /// `N x C x T x F` to the attention matrix `N x T x (C*F)` (temporal) or
    /// `N x F x (C*T)` (frequency). Within a row, F varies fastest (T for the
    /// frequency axis), then C.
    pub fn reshape_axis(&mut self, input: Var, axis: AttentionAxis) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid(
                "reshape_axis",
                format!("expected N x C x T x F, got {xs:?}"),
            ));
        }
        let (n, c, t, f) = (xs[0], xs[1], xs[2], xs[3]);
        let perm = axis_permutation(axis, n, c, t, f);
        let (r, d) = axis.matrix_dims(c, t, f);
        self.permute(input, perm, &[n, r, d])
    }

    /// Inverse of [`Tape::reshape_axis`], restoring `target = N x C x T x F`.
    pub fn reshape_axis_inv(
        &mut self,
        input: Var,
        axis: AttentionAxis,
        target: &[usize],
    ) -> Result<Var> {
        if target.len() != 4 {
            return Err(Error::shape("reshape_axis_inv", self.shape(input), target));
        }
        let (n, c, t, f) = (target[0], target[1], target[2], target[3]);
        let (r, d) = axis.matrix_dims(c, t, f);
        if self.shape(input) != [n, r, d] {
            return Err(Error::shape("reshape_axis_inv", self.shape(input), target));
        }
        let fwd = axis_permutation(axis, n, c, t, f);
        let mut inv = vec![0; fwd.len()];
        for (o, &i) in fwd.iter().enumerate() {
            inv[i] = o;
        }
        self.permute(input, inv, target)
    }

    fn permute(&mut self, input: Var, perm: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.data(input);
        let data = perm.iter().map(|&i| x[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Permute { input, perm }, &[input]))
    }

    /// Same data under a new shape (row-major order unchanged).
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        let perm = (0..value.numel()).collect();
        Ok(self.push(value, Op::Permute { input, perm }, &[input]))
    }

    /// Stacks `N x Ci x T x F` tensors along the channel axis, in order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 4 {
            return Err(Error::invalid(
                "concat_channels",
                format!("expected N x C x T x F, got {s0:?}"),
            ));
        }
        let mut total_c = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::shape("concat_channels", &s0, s));
            }
            total_c += s[1];
        }
        let (n, p) = (s0[0], s0[2] * s0[3]);
        let mut out = Vec::with_capacity(n * total_c * p);
        for s in 0..n {
            for &v in inputs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.data(v)[s * c * p..(s + 1) * c * p]);
            }
        }
        let value = Tensor::new(&[n, total_c, s0[2], s0[3]], out)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec()), inputs))
    }

    pub fn ewise(&mut self, op: Ewise, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("ewise", self.shape(a), self.shape(b)));
        }
        let (x, y) = (self.data(a), self.data(b));
        let data = match op {
            Ewise::Add => x.iter().zip(y).map(|(&p, &q)| p + q).collect(),
            Ewise::Mul => x.iter().zip(y).map(|(&p, &q)| p * q).collect(),
        };
        let value = Tensor::new(self.shape(a), data)?;
        let rec = match op {
            Ewise::Add => Op::Add(a, b),
            Ewise::Mul => Op::Mul(a, b),
        };
        Ok(self.push(value, rec, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(Ewise::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(Ewise::Mul, a, b)
    }

    /// `a ⊙ m + b ⊙ (1 − m)`.
    ///
    /// The result is clamped to `[min(a, b), max(a, b)]` so rounding never
    /// leaves the convex hull; the clamp is only active at the ulp level for
    /// `m` in `[0, 1]` and is ignored by the derivative.
    pub fn affine_combine(&mut self, a: Var, b: Var, m: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("affine_combine", self.shape(a), self.shape(b)));
        }
        if self.shape(a) != self.shape(m) {
            return Err(Error::shape("affine_combine", self.shape(a), self.shape(m)));
        }
        let (x, y, w) = (self.data(a), self.data(b), self.data(m));
        let data = x
            .iter()
            .zip(y)
            .zip(w)
            .map(|((&p, &q), &g)| {
                let v = p * g + q * (T::one() - g);
                v.max(p.min(q)).min(p.max(q))
            })
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::AffineCombine { a, b, m }, &[a, b, m]))
    }

    pub fn scale(&mut self, input: Var, k: T) -> Var {
        let value = self.value(input).map(|v| v * k);
        self.push(value, Op::Scale(input, k), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.data(input).iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(input), &[input])
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let n = T::from_usize(self.value(a).numel()).unwrap();
        let total: T = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        Ok(self.push(Tensor::scalar(total / n), Op::Mse(a, b), &[a, b]))
    }

    /// Propagates `dLoss/d·` from a scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, node.requires_grad) {
                (Some(g), _) => Some(Tensor::new(node.value.shape(), g).expect("grad shape")),
                (None, true) => Some(Tensor::zeros(node.value.shape())),
                (None, false) => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); node.value.numel()])
                .as_mut_slice(),
        )
    }

    fn backward_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
            } => self.backward_conv(*input, *weight, *bias, gy, grads),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (n, c, t, f) = node.value.dims4();
                let p = t * f;
                let g = self.data(*gamma);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * p;
                        for i in base..base + p {
                            sum_dy[ch] = sum_dy[ch] + gy[i];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + gy[i] * xhat[i];
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gamma) {
                    for ch in 0..c {
                        dg[ch] = dg[ch] + sum_dy_xhat[ch];
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for ch in 0..c {
                        db[ch] = db[ch] + sum_dy[ch];
                    }
                }
                if let Some(dx) = self.slot(grads, *input) {
                    let m = T::from_usize(n * p).unwrap();
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * p;
                            let k = g[ch] * inv_std[ch];
                            for i in base..base + p {
                                let v = if *training {
                                    k * (gy[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * gy[i]
                                };
                                dx[i] = dx[i] + v;
                            }
                        }
                    }
                }
            }
            Op::Prelu { input, slope } => {
                let (n, c, t, f) = node.value.dims4();
                let p = t * f;
                let x = self.data(*input);
                let a = self.data(*slope);
                if let Some(da) = self.slot(grads, *slope) {
                    for s in 0..n {
                        for ch in 0..c {
                            let r = (s * c + ch) * p..(s * c + ch + 1) * p;
                            let acc: T = x[r.clone()]
                                .iter()
                                .zip(&gy[r])
                                .map(|(&xi, &gi)| gi * xi.min(T::zero()))
                                .sum();
                            da[ch] = da[ch] + acc;
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *input) {
                    for s in 0..n {
                        for ch in 0..c {
                            let r = (s * c + ch) * p..(s * c + ch + 1) * p;
                            let ach = a[ch];
                            for ((d, &xi), &gi) in
                                dx[r.clone()].iter_mut().zip(&x[r.clone()]).zip(&gy[r])
                            {
                                let k = if xi > T::zero() { T::one() } else { ach };
                                *d = *d + k * gi;
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *input) {
                    for i in 0..y.len() {
                        dx[i] = dx[i] + gy[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::SoftmaxRows(input) => {
                let d = *node.value.shape().last().unwrap();
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *input) {
                    for ((yr, gr), dr) in y.chunks(d).zip(gy.chunks(d)).zip(dx.chunks_mut(d)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Matmul { a, b, transpose_b } => {
                let (dims, _) =
                    matmul_dims(self.shape(*a), self.shape(*b), *transpose_b).expect("recorded");
                let MatmulDims { batch, r, k, d } = dims;
                let ad = self.data(*a);
                let bd = self.data(*b);
                if let Some(da) = self.slot(grads, *a) {
                    for s in 0..batch {
                        let gm = MatRef::new(&gy[s * r * d..(s + 1) * r * d], r, d);
                        // dA = dC · Bᵀ (or dC · B when B is stored transposed)
                        let bm = if *transpose_b {
                            MatRef::new(&bd[s * d * k..(s + 1) * d * k], d, k)
                        } else {
                            MatRef::new(&bd[s * k * d..(s + 1) * k * d], k, d).t()
                        };
                        gemm(gm, bm, T::one(), &mut da[s * r * k..(s + 1) * r * k]);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for s in 0..batch {
                        let gm = MatRef::new(&gy[s * r * d..(s + 1) * r * d], r, d);
                        let am = MatRef::new(&ad[s * r * k..(s + 1) * r * k], r, k);
                        if *transpose_b {
                            // dB (D x K) = dCᵀ · A
                            gemm(gm.t(), am, T::one(), &mut db[s * d * k..(s + 1) * d * k]);
                        } else {
                            // dB (K x D) = Aᵀ · dC
                            gemm(am.t(), gm, T::one(), &mut db[s * k * d..(s + 1) * k * d]);
                        }
                    }
                }
            }
            Op::Permute { input, perm } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for (o, &i) in perm.iter().enumerate() {
                        dx[i] = dx[i] + gy[o];
                    }
                }
            }
            Op::Concat(inputs) => {
                let (n, _, t, f) = node.value.dims4();
                let p = t * f;
                let total_c = node.value.shape()[1];
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if let Some(dx) = self.slot(grads, v) {
                        for s in 0..n {
                            let src =
                                &gy[(s * total_c + offset) * p..(s * total_c + offset + c) * p];
                            let dst = &mut dx[s * c * p..(s + 1) * c * p];
                            for (d, &g) in dst.iter_mut().zip(src) {
                                *d = *d + g;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(dx) = self.slot(grads, v) {
                        for (d, &g) in dx.iter_mut().zip(gy) {
                            *d = *d + g;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let o = self.data(other);
                    if let Some(dx) = self.slot(grads, v) {
                        for i in 0..dx.len() {
                            dx[i] = dx[i] + gy[i] * o[i];
                        }
                    }
                }
            }
            Op::AffineCombine { a, b, m } => {
                let (x, y, w) = (self.data(*a), self.data(*b), self.data(*m));
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..da.len() {
                        da[i] = da[i] + gy[i] * w[i];
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for i in 0..db.len() {
                        db[i] = db[i] + gy[i] * (T::one() - w[i]);
                    }
                }
                if let Some(dm) = self.slot(grads, *m) {
                    for i in 0..dm.len() {
                        dm[i] = dm[i] + gy[i] * (x[i] - y[i]);
                    }
                }
            }
            Op::Scale(input, k) => {
                if let Some(dx) = self.slot(grads, *input) {
                    for (d, &g) in dx.iter_mut().zip(gy) {
                        *d = *d + g * *k;
                    }
                }
            }
            Op::Sum(input) => {
                if let Some(dx) = self.slot(grads, *input) {
                    for d in dx.iter_mut() {
                        *d = *d + gy[0];
                    }
                }
            }
            Op::Mse(a, b) => {
                let (x, y) = (self.data(*a), self.data(*b));
                let k = T::from_f64_lossy(2.0) * gy[0] / T::from_usize(x.len()).unwrap();
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..da.len() {
                        da[i] = da[i] + k * (x[i] - y[i]);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for i in 0..db.len() {
                        db[i] = db[i] - k * (x[i] - y[i]);
                    }
                }
            }
        }
    }

    fn backward_conv(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let (n, cin, t, f) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kt, kf) = (ws[0], ws[2], ws[3]);
        let geom = ConvGeom { cin, t, f, kt, kf };
        let p = t * f;
        let k = cin * kt * kf;
        let x = self.data(input);
        let w = self.data(weight);

        if let Some(db) = self.slot(grads, bias) {
            for s in 0..n {
                for co in 0..cout {
                    let row = &gy[(s * cout + co) * p..(s * cout + co + 1) * p];
                    db[co] = db[co] + row.iter().copied().sum::<T>();
                }
            }
        }
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * p]
        };
        if let Some(dw) = self.slot(grads, weight) {
            for s in 0..n {
                let xn = &x[s * cin * p..(s + 1) * cin * p];
                let gn = MatRef::new(&gy[s * cout * p..(s + 1) * cout * p], cout, p);
                let cols_ref: &[T] = if geom.is_pointwise() {
                    xn
                } else {
                    im2col(xn, &geom, &mut cols);
                    &cols
                };
                gemm(gn, MatRef::new(cols_ref, k, p).t(), T::one(), dw);
            }
        }
        if let Some(dx) = self.slot(grads, input) {
            let wt = MatRef::new(w, cout, k).t();
            for s in 0..n {
                let gn = MatRef::new(&gy[s * cout * p..(s + 1) * cout * p], cout, p);
                let dxn = &mut dx[s * cin * p..(s + 1) * cin * p];
                if geom.is_pointwise() {
                    gemm(wt, gn, T::one(), dxn);
                } else {
                    gemm(wt, gn, T::zero(), &mut cols);
                    col2im_add(&cols, &geom, dxn);
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` does not require one.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct ConvGeom {
    cin: usize,
    t: usize,
    f: usize,
    kt: usize,
    kf: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kt == 1 && self.kf == 1
    }
}

/// Unfolds one `Cin x T x F` sample into `(Cin*Kt*Kf) x (T*F)` patches.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (t, f) = (g.t, g.f);
    let (pt, pf) = (g.kt / 2, g.kf / 2);
    let p = t * f;
    for c in 0..g.cin {
        for i in 0..g.kt {
            for j in 0..g.kf {
                let row = ((c * g.kt + i) * g.kf + j) * p;
                let dst = &mut cols[row..row + p];
                // valid output columns: 0 <= ff + j - pf < f
                let f_lo = pf.saturating_sub(j);
                let f_hi = (f + pf).saturating_sub(j).min(f);
                for tt in 0..t {
                    let seg = &mut dst[tt * f..(tt + 1) * f];
                    let st = tt + i;
                    if st < pt || st - pt >= t || f_lo >= f_hi {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src_row = &x[(c * t + st - pt) * f..(c * t + st - pt + 1) * f];
                    seg[..f_lo].fill(T::zero());
                    seg[f_hi..].fill(T::zero());
                    let s0 = f_lo + j - pf;
                    seg[f_lo..f_hi].copy_from_slice(&src_row[s0..s0 + (f_hi - f_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back into the sample.
fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (t, f) = (g.t, g.f);
    let (pt, pf) = (g.kt / 2, g.kf / 2);
    let p = t * f;
    for c in 0..g.cin {
        for i in 0..g.kt {
            for j in 0..g.kf {
                let row = ((c * g.kt + i) * g.kf + j) * p;
                let src = &cols[row..row + p];
                let f_lo = pf.saturating_sub(j);
                let f_hi = (f + pf).saturating_sub(j).min(f);
                if f_lo >= f_hi {
                    continue;
                }
                for tt in 0..t {
                    let st = tt + i;
                    if st < pt || st - pt >= t {
                        continue;
                    }
                    let base = (c * t + st - pt) * f;
                    let s0 = f_lo + j - pf;
                    let seg = &src[tt * f + f_lo..tt * f + f_hi];
                    for (d, &v) in dx[base + s0..base + s0 + seg.len()].iter_mut().zip(seg) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

struct MatmulDims {
    batch: usize,
    r: usize,
    k: usize,
    d: usize,
}

fn matmul_dims(a: &[usize], b: &[usize], transpose_b: bool) -> Result<(MatmulDims, bool)> {
    let mismatch = || Error::shape("matmul", a, b);
    let (batch, am, bm, batched) = match (a.len(), b.len()) {
        (2, 2) => (1, [a[0], a[1]], [b[0], b[1]], false),
        (3, 3) if a[0] == b[0] => (a[0], [a[1], a[2]], [b[1], b[2]], true),
        _ => return Err(mismatch()),
    };
    let (bk, d) = if transpose_b {
        (bm[1], bm[0])
    } else {
        (bm[0], bm[1])
    };
    if am[1] != bk {
        return Err(mismatch());
    }
    Ok((
        MatmulDims {
            batch,
            r: am[0],
            k: am[1],
            d,
        },
        batched,
    ))
}
