use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments per parameter path, plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn moments(&self, path: &str) -> Option<(&[T], &[T])> {
        self.moments
            .get(path)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("adam.beta1", self.beta1);
        kv.set("adam.beta2", self.beta2);
        kv.set("adam.eps", self.eps);
        kv.set("adam.step", self.step);
    }
}

/// Gradients keyed by parameter path.
pub type GradMap<T> = HashMap<String, Tensor<T>>;

/// One bias-corrected Adam update of every parameter in `params`.
///
/// All gradients are checked before anything is modified, so a missing
/// gradient leaves both `params` and `state` untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for (path, p) in params.iter() {
        let g = grads
            .get(path)
            .ok_or_else(|| Error::MissingGrad(path.to_string()))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (
        T::from_f64_lossy(state.beta1),
        T::from_f64_lossy(state.beta2),
    );
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let step_size = T::from_f64_lossy(lr / c1);
    let inv_c2 = T::from_f64_lossy(1.0 / c2);
    let eps = T::from_f64_lossy(state.eps);
    for (path, p) in params.iter_mut() {
        let g = grads[path].data();
        let (m, v) = state
            .moments
            .entry(path.to_string())
            .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            *w = *w - step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}
