//! Dense row-major tensors of rank at most four.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAX_RANK: usize = 4;

/// A dense row-major array.
///
/// Feature tensors are laid out `N x C x T x F` (batch, channels, frames,
/// frequency bins). Lower ranks drop leading axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::RankTooLarge(shape.len()));
        }
        if shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("zero extent in {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("valid shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a tensor from a function of the flat row-major index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, (0..numel).map(f).collect()).expect("valid shape")
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape,
            values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// The same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Self::new(shape, self.data.clone())
    }

    /// Interprets the tensor as `N x C x T x F`, padding leading axes with 1.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        let s = &self.shape;
        match s.len() {
            0 => (1, 1, 1, 1),
            1 => (1, 1, 1, s[0]),
            2 => (1, 1, s[0], s[1]),
            3 => (1, s[0], s[1], s[2]),
            _ => (s[0], s[1], s[2], s[3]),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel `c` of sample `n` as a `T x F` plane.
    pub fn plane(&self, n: usize, c: usize) -> Result<Self> {
        let (nn, cc, t, f) = self.dims4();
        if n >= nn || c >= cc {
            return Err(Error::invalid(
                "plane",
                format!("index ({n}, {c}) outside {:?}", self.shape),
            ));
        }
        let start = (n * cc + c) * t * f;
        Self::new(&[t, f], self.data[start..start + t * f].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(&shape, data)
    }
}

/// Axis along which separable self-attention attends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionAxis {
    Temporal,
    Frequency,
}

impl AttentionAxis {
    /// `(rows, cols)` of the reshaped matrix for a `C x T x F` sample.
    pub fn matrix_dims(self, c: usize, t: usize, f: usize) -> (usize, usize) {
        match self {
            AttentionAxis::Temporal => (t, c * f),
            AttentionAxis::Frequency => (f, c * t),
        }
    }
}

/// Flat-index permutation taking a `N x C x T x F` tensor to `N x R x D`.
///
/// Temporal: `out[n, t, c*F + f] = in[n, c, t, f]`.
/// Frequency: `out[n, f, c*T + t] = in[n, c, t, f]`.
pub(crate) fn axis_permutation(
    axis: AttentionAxis,
    n: usize,
    c: usize,
    t: usize,
    f: usize,
) -> Vec<usize> {
    // perm[out_index] = in_index
    let mut perm = Vec::with_capacity(n * c * t * f);
    let sample = c * t * f;
    for b in 0..n {
        match axis {
            AttentionAxis::Temporal => {
                for ti in 0..t {
                    for ci in 0..c {
                        for fi in 0..f {
                            perm.push(b * sample + (ci * t + ti) * f + fi);
                        }
                    }
                }
            }
            AttentionAxis::Frequency => {
                for fi in 0..f {
                    for ci in 0..c {
                        for ti in 0..t {
                            perm.push(b * sample + (ci * t + ti) * f + fi);
                        }
                    }
                }
            }
        }
    }
    perm
}

fn attention_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match x.rank() {
        3 | 4 => Ok(x.dims4()),
        _ => Err(Error::invalid(
            "reshape_axis",
            format!("expected C x T x F or N x C x T x F, got {:?}", x.shape()),
        )),
    }
}

/// Reshapes `C x T x F` (or batched `N x C x T x F`) to the attention matrix
/// `T x (C*F)` / `F x (C*T)` (batched: `N x R x D`).
pub fn reshape_axis<T: Scalar>(x: &Tensor<T>, axis: AttentionAxis) -> Result<Tensor<T>> {
    let (n, c, t, f) = attention_dims(x)?;
    let perm = axis_permutation(axis, n, c, t, f);
    let data = perm.iter().map(|&i| x.data()[i]).collect();
    let (r, d) = axis.matrix_dims(c, t, f);
    if x.rank() == 3 {
        Tensor::new(&[r, d], data)
    } else {
        Tensor::new(&[n, r, d], data)
    }
}

/// Inverse of [`reshape_axis`]; `target` is the `C x T x F` or `N x C x T x F`
/// shape to restore.
pub fn reshape_axis_inv<T: Scalar>(
    x: &Tensor<T>,
    axis: AttentionAxis,
    target: &[usize],
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(target);
    let (n, c, t, f) = attention_dims(&probe)?;
    let (r, d) = axis.matrix_dims(c, t, f);
    let expected: Vec<usize> = if target.len() == 3 {
        vec![r, d]
    } else {
        vec![n, r, d]
    };
    if x.shape() != expected.as_slice() {
        return Err(Error::shape("reshape_axis_inv", x.shape(), target));
    }
    let perm = axis_permutation(axis, n, c, t, f);
    let mut data = vec![T::zero(); x.numel()];
    for (o, &i) in perm.iter().enumerate() {
        data[i] = x.data()[o];
    }
    Tensor::new(target, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(matches!(
            Tensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]),
            Err(Error::RankTooLarge(5))
        ));
    }

    #[test]
    fn temporal_layout_matches_index_formula() {
        // 2x2x2 tensor enumerated 0..8 as (c, t, f).
        let x = Tensor::<f64>::from_fn(&[2, 2, 2], |i| i as f64);
        let r = reshape_axis(&x, AttentionAxis::Temporal).unwrap();
        assert_eq!(r.shape(), &[2, 4]);
        for t in 0..2 {
            for c in 0..2 {
                for f in 0..2 {
                    let src = (c * 2 + t) * 2 + f;
                    assert_eq!(r.data()[t * 4 + c * 2 + f], src as f64);
                }
            }
        }
        assert_eq!(r.data(), &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn frequency_layout_matches_index_formula() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 2], |i| i as f64);
        let r = reshape_axis(&x, AttentionAxis::Frequency).unwrap();
        assert_eq!(r.data(), &[0.0, 2.0, 4.0, 6.0, 1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn single_channel_temporal_is_plain_view() {
        let x = Tensor::<f32>::from_fn(&[1, 3, 5], |i| i as f32 * 0.25);
        let r = reshape_axis(&x, AttentionAxis::Temporal).unwrap();
        assert_eq!(r.shape(), &[3, 5]);
        assert_eq!(r.data(), x.data());
    }

    #[test]
    fn inverse_rejects_wrong_target() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let r = reshape_axis(&x, AttentionAxis::Temporal).unwrap();
        assert!(reshape_axis_inv(&r, AttentionAxis::Temporal, &[3, 2, 4]).is_err());
        assert!(reshape_axis_inv(&r, AttentionAxis::Frequency, &[2, 3, 4]).is_err());
    }

    #[test]
    fn round_trip_exhaustive_small_shapes() {
        for c in 1..=8 {
            for t in 1..=8 {
                for f in 1..=8 {
                    let x = Tensor::<f32>::from_fn(&[c, t, f], |i| (i as f32 * 0.37).sin());
                    for axis in [AttentionAxis::Temporal, AttentionAxis::Frequency] {
                        let r = reshape_axis(&x, axis).unwrap();
                        let back = reshape_axis_inv(&r, axis, &[c, t, f]).unwrap();
                        assert_eq!(back, x);
                    }
                }
            }
        }
    }

    #[test]
    fn plane_and_stack() {
        let a = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let b = a.map(|v| v + 10.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.plane(0, 1).unwrap(), b);
        assert!(Tensor::stack(&[a, Tensor::zeros(&[3, 2])]).is_err());
    }
}
