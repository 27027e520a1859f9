//! Desk-scale joint training of the fusion network on synthetic triples.
//!
//! Two reconstruction losses stand in for the recognition and enhancement
//! objectives: the fused feature and the enhanced branch output are both
//! regressed onto the clean feature, weighted `1 − λ` and `λ`.

mod adam;
mod schedule;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState, GradMap, BETA1, BETA2, EPS};
pub use schedule::{combine_losses, lr_schedule, multitask_loss};

use crate::error::{Error, Result};
use crate::fbank::FeatureTriple;
use crate::kv::KvMap;
use crate::model::{save_checkpoint, IffArchConfig, IffNet};
use crate::scalar::Scalar;
use crate::sim::{gen_items, oracle_mse, SimConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    /// λ, the weight of the enhancement term.
    pub enh_loss_weight: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Seeds parameter init and batch order.
    pub seed: u64,
    pub train_items: usize,
    pub eval_items: usize,
    pub arch: IffArchConfig,
    pub sim: SimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-size recipe: warm-up over 25k steps and batches of 64.
    pub fn full() -> Self {
        Self {
            warmup_steps: 25_000,
            batch_size: 64,
            steps: 100_000,
            arch: IffArchConfig::default(),
            ..Self::desk()
        }
    }

    /// Settings that train in minutes on one core.
    pub fn desk() -> Self {
        Self {
            lr_peak: 0.002,
            warmup_steps: 500,
            enh_loss_weight: 0.3,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            train_items: 2048,
            eval_items: 64,
            arch: IffArchConfig::desk(),
            sim: SimConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("train", m));
        if !(0.0..=1.0).contains(&self.enh_loss_weight) {
            return bad(format!(
                "enh_loss_weight {} outside [0, 1]",
                self.enh_loss_weight
            ));
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1".into());
        }
        if self.batch_size == 0 || self.train_items == 0 {
            return bad("batch_size and train_items must be positive".into());
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad(format!("lr_peak {} must be positive", self.lr_peak));
        }
        self.arch.validate()?;
        self.sim.validate()
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("train.lr_peak", self.lr_peak);
        kv.set("train.warmup_steps", self.warmup_steps);
        kv.set("train.enh_loss_weight", self.enh_loss_weight);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.steps", self.steps);
        kv.set("train.seed", self.seed);
        kv.set("train.train_items", self.train_items);
        kv.set("train.eval_items", self.eval_items);
        self.arch.write_kv(kv);
        self.sim.write_kv(kv);
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        macro_rules! field {
            ($key:literal, $slot:expr) => {
                if let Some(v) = kv.get($key)? {
                    $slot = v;
                }
            };
        }
        field!("train.lr_peak", self.lr_peak);
        field!("train.warmup_steps", self.warmup_steps);
        field!("train.enh_loss_weight", self.enh_loss_weight);
        field!("train.batch_size", self.batch_size);
        field!("train.steps", self.steps);
        field!("train.seed", self.seed);
        field!("train.train_items", self.train_items);
        field!("train.eval_items", self.eval_items);
        self.arch.apply_kv(kv)?;
        self.sim.apply_kv(kv)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        self.write_kv(&mut kv);
        kv
    }
}

/// Training and held-out triples drawn from one seed stream, so the two
/// sets never share an item seed.
pub fn split_datasets(cfg: &TrainConfig) -> Result<(Vec<FeatureTriple>, Vec<FeatureTriple>)> {
    let mut items = gen_items(&cfg.sim, cfg.train_items + cfg.eval_items)?;
    let held_out = items.split_off(cfg.train_items);
    Ok((items, held_out))
}

/// One metrics log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Training-batch MSE of the fused feature against clean.
    pub mse_fused: f64,
}

impl std::fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}",
            self.step, self.lr, self.loss, self.mse_fused
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub mse_fused: f64,
    pub mse_enh_input: f64,
    pub mse_noisy_input: f64,
}

pub struct TrainOutcome {
    pub model: IffNet<f32>,
    pub optimizer: AdamState<f32>,
    pub log: Vec<StepMetrics>,
}

impl TrainOutcome {
    /// Tab-separated log, one line per step.
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for m in &self.log {
            writeln!(s, "{m}").unwrap();
        }
        s
    }

    /// Writes the checkpoint and `metrics.tsv` into `dir`.
    pub fn save(&self, dir: &Path, cfg: &TrainConfig) -> Result<()> {
        let mut extra = cfg.to_kv();
        self.optimizer.write_kv(&mut extra);
        save_checkpoint(&self.model, dir, &extra)?;
        let path = dir.join(METRICS_FILE);
        std::fs::write(&path, self.log_text()).map_err(|e| Error::io(path, e))
    }
}

/// Sets flush-to-zero and denormals-are-zero for the current thread until
/// dropped. Subnormal attention weights and their gradients otherwise slow
/// the step several-fold without affecting the result.
struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[allow(deprecated)]
    fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            // SAFETY: only the FTZ (bit 15) and DAZ (bit 6) flags change.
            let saved = unsafe { _mm_getcsr() };
            unsafe { _mm_setcsr(saved | 0x8040) };
            Self { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Self {}
    }
}

impl Drop for FlushDenormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the value read in `new`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

/// Stacks the three features of `items` into `N x T x F` tensors.
fn batch_tensors(items: &[&FeatureTriple]) -> Result<[Tensor<f32>; 3]> {
    let pick = |f: fn(&FeatureTriple) -> &Tensor<f32>| {
        Tensor::stack(&items.iter().map(|t| f(t).clone()).collect::<Vec<_>>())
    };
    Ok([
        pick(|t| &t.clean)?,
        pick(|t| &t.noisy)?,
        pick(|t| &t.enhanced)?,
    ])
}

/// Trains from a fresh initialization. `progress` sees every logged step.
pub fn train(
    cfg: &TrainConfig,
    dataset: &[FeatureTriple],
    mut progress: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    let dims = dataset[0].dims();
    if let Some(bad) = dataset.iter().find(|t| t.dims() != dims) {
        return Err(Error::shape(
            "train",
            &[dims.0, dims.1],
            &[bad.dims().0, bad.dims().1],
        ));
    }
    let _ftz = FlushDenormals::new();
    let mut model = IffNet::<f32>::init(cfg.arch.clone(), cfg.seed)?;
    let mut optimizer = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_7463_6865_7321);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let mut picks = Vec::with_capacity(cfg.batch_size);
        while picks.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
            }
            picks.push(&dataset[order.pop().unwrap()]);
        }
        let [clean, noisy, enhanced] = batch_tensors(&picks)?;
        let lr = lr_schedule(step, cfg.lr_peak, cfg.warmup_steps)?;

        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &enhanced, &noisy, true)?;
        let clean = tape.constant(crate::model::as_feature_batch(&clean)?);
        let v = &pass.vars;
        let loss = multitask_loss(
            &mut tape,
            v.fused,
            clean,
            v.enh.x_in,
            clean,
            cfg.enh_loss_weight,
        )?;
        let loss_value = tape.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { step, lr });
        }
        let fused_mse = {
            let f = tape.value(v.fused).data();
            let c = tape.value(clean).data();
            f.iter()
                .zip(c)
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / f.len() as f64
        };
        let grads = tape.backward(loss)?;
        let mut grad_map = GradMap::new();
        for (path, var) in pass.params.iter() {
            if let Some(g) = grads.get(var) {
                grad_map.insert(path.to_string(), g.clone());
            }
        }
        adam_step(&mut model.params, &grad_map, &mut optimizer, lr)?;
        model.update_running_stats(&pass.observed)?;

        let m = StepMetrics {
            step,
            lr,
            loss: loss_value,
            mse_fused: fused_mse,
        };
        progress(&m);
        log.push(m);
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        log,
    })
}

const EVAL_BATCH: usize = 16;

/// Mean over items of the three reconstruction errors, in evaluation mode.
pub fn evaluate<T: Scalar>(model: &IffNet<T>, dataset: &[FeatureTriple]) -> Result<EvalMetrics> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluate", "dataset is empty"));
    }
    let _ftz = FlushDenormals::new();
    let dims = dataset[0].dims();
    let (mut fused, mut enh, mut noisy) = (0.0, 0.0, 0.0);
    for chunk in dataset.chunks(EVAL_BATCH) {
        for t in chunk {
            if t.dims() != dims {
                return Err(Error::shape(
                    "evaluate",
                    &[dims.0, dims.1],
                    &[t.dims().0, t.dims().1],
                ));
            }
        }
        let refs: Vec<&FeatureTriple> = chunk.iter().collect();
        let [_, x_n, x_e] = batch_tensors(&refs)?;
        let out = model.fuse(&x_e.cast::<T>(), &x_n.cast::<T>())?;
        let fused_f32: Tensor<f32> = out.fused.cast();
        for (i, t) in chunk.iter().enumerate() {
            let plane = fused_f32
                .reshape(&[chunk.len(), 1, dims.0, dims.1])?
                .plane(i, 0)?;
            fused += oracle_mse(&plane, &t.clean)?;
            enh += oracle_mse(&t.enhanced, &t.clean)?;
            noisy += oracle_mse(&t.noisy, &t.clean)?;
        }
    }
    let n = dataset.len() as f64;
    Ok(EvalMetrics {
        mse_fused: fused / n,
        mse_enh_input: enh / n,
        mse_noisy_input: noisy / n,
    })
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_size: 2,
            warmup_steps: 2,
            train_items: 4,
            eval_items: 2,
            arch: IffArchConfig::sized(1, 2),
            sim: SimConfig {
                frames: 6,
                bins: 5,
                ..SimConfig::default()
            },
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = tiny();
        cfg.sim.snr_db = f64::INFINITY;
        let text = cfg.to_kv().to_string();
        let kv = KvMap::parse(&text, Path::new("cfg")).unwrap();
        let mut back = TrainConfig::desk();
        back.apply_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn log_has_one_line_per_step_and_params_move() {
        let cfg = tiny();
        let (items, _) = split_datasets(&cfg).unwrap();
        let out = train(&cfg, &items, |_| {}).unwrap();
        assert_eq!(out.log_text().lines().count(), cfg.steps);
        let init = IffNet::<f32>::init(cfg.arch.clone(), cfg.seed).unwrap();
        assert_ne!(init.params, out.model.params);
        assert_eq!(out.optimizer.step, 3);
    }

    #[test]
    fn rejects_bad_weight_and_empty_data() {
        let cfg = TrainConfig {
            enh_loss_weight: 1.2,
            ..tiny()
        };
        assert!(train(&cfg, &split_datasets(&tiny()).unwrap().0, |_| {}).is_err());
        assert!(train(&tiny(), &[], |_| {}).is_err());
    }

    #[test]
    fn input_errors_do_not_depend_on_model() {
        let cfg = tiny();
        let (_, held) = split_datasets(&cfg).unwrap();
        let a = evaluate(&IffNet::<f32>::init(cfg.arch.clone(), 1).unwrap(), &held).unwrap();
        let b = evaluate(&IffNet::<f32>::init(cfg.arch.clone(), 2).unwrap(), &held).unwrap();
        assert_eq!(a.mse_enh_input, b.mse_enh_input);
        assert_eq!(a.mse_noisy_input, b.mse_noisy_input);
        assert_ne!(a.mse_fused, b.mse_fused);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
