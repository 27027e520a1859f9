#![allow(dead_code)]

use iffnet::model::{IffArchConfig, IffNet, ParamStore};
use iffnet::tape::BN_EPS;
use iffnet::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

pub fn fill<T: Scalar>(store: &mut ParamStore<T>, path: &str, value: f64) {
    let t = store.get_mut(path).unwrap_or_else(|e| panic!("{e}"));
    let v = T::from_f64_lossy(value);
    t.data_mut().iter_mut().for_each(|x| *x = v);
}

/// Sets every parameter under `prefix.` to `value`.
pub fn fill_prefix<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, value: f64) {
    let paths: Vec<String> = store
        .paths()
        .filter(|p| p.starts_with(&format!("{prefix}.")))
        .map(str::to_string)
        .collect();
    for p in paths {
        fill(store, &p, value);
    }
}

/// BN gamma that cancels the eval-mode `1/sqrt(1 + eps)` with default
/// running statistics.
pub fn unit_gamma() -> f64 {
    (1.0 + BN_EPS).sqrt()
}

/// Network whose branches reproduce their input in evaluation mode, whose
/// interaction gates are shut and whose merge gate is fully open, so the
/// fused output equals the enhanced input.
pub fn passthrough_model<T: Scalar>(cfg: IffArchConfig) -> IffNet<T> {
    let mut m = IffNet::<T>::init(cfg.clone(), 0).unwrap();
    let c = cfg.filters;
    let p = &mut m.params;
    for br in ["enh", "noisy"] {
        for stage in ["up", "dn"] {
            fill(p, &format!("{br}.{stage}.conv.bias"), 0.0);
            fill(p, &format!("{br}.{stage}.bn.gamma"), unit_gamma());
            fill(p, &format!("{br}.{stage}.bn.beta"), 0.0);
            fill(p, &format!("{br}.{stage}.prelu.slope"), 1.0);
        }
        fill(p, &format!("{br}.up.conv.weight"), 1.0);
        // Dn-conv reads channel 0 only
        let w = p.get_mut(&format!("{br}.dn.conv.weight")).unwrap();
        w.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = if i == 0 { T::one() } else { T::zero() });
        for i in 0..cfg.blocks {
            for j in 0..2 {
                let res = format!("{br}.ra{i}.res{j}");
                fill_prefix(p, &format!("{res}.conv1"), 0.0);
                fill_prefix(p, &format!("{res}.conv2"), 0.0);
                fill(p, &format!("{res}.bn1.beta"), 0.0);
                fill(p, &format!("{res}.bn2.beta"), 0.0);
                fill(p, &format!("{res}.prelu.slope"), 1.0);
            }
            // mix keeps the X^Res third of [X^Temp, X^Freq, X^Res]
            fill(p, &format!("{br}.ra{i}.mix.bias"), 0.0);
            let w = p.get_mut(&format!("{br}.ra{i}.mix.weight")).unwrap();
            w.data_mut().iter_mut().enumerate().for_each(|(k, x)| {
                let (co, ci) = (k / (3 * c), k % (3 * c));
                *x = if ci == 2 * c + co {
                    T::one()
                } else {
                    T::zero()
                }
            });
        }
    }
    for i in 0..cfg.blocks {
        for dir in ["n2e", "e2n"] {
            fill(p, &format!("inter{i}.{dir}.conv.weight"), 0.0);
            fill(p, &format!("inter{i}.{dir}.conv.bias"), -40.0);
        }
    }
    fill(p, "merge.conv2.weight", 0.0);
    fill(p, "merge.conv2.bias", 40.0);
    m
}
