//! Browser demo: simulate an over-suppressed feature triple, train a tiny
//! fusion network on similar triples, and inspect the fused result.

use iffnet::fbank::{compute_fbank, FbankConfig};
use iffnet::model::IffArchConfig;
use iffnet::sim::{gen_items, gen_triple, oracle_mse, SimConfig};
use iffnet::train::{train, TrainConfig};
use iffnet::Tensor;
use wasm_bindgen::prelude::*;

/// A set of equally sized T x F images, row-major, frames first.
#[wasm_bindgen]
pub struct Panels {
    frames: usize,
    bins: usize,
    names: Vec<String>,
    data: Vec<Vec<f32>>,
    summary: String,
}

#[wasm_bindgen]
impl Panels {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, i: usize) -> String {
        self.names.get(i).cloned().unwrap_or_default()
    }

    /// Panel `i` as a Float32Array of length frames * bins.
    pub fn panel(&self, i: usize) -> Vec<f32> {
        self.data.get(i).cloned().unwrap_or_default()
    }

    pub fn summary(&self) -> String {
        self.summary.clone()
    }
}

impl Panels {
    fn new(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            names: Vec::new(),
            data: Vec::new(),
            summary: String::new(),
        }
    }

    fn push(&mut self, name: &str, t: &Tensor<f32>) {
        self.names.push(name.to_string());
        self.data.push(t.data().to_vec());
    }
}

fn sim_config(seed: u32, snr_db: f64, suppress_frac: f64) -> SimConfig {
    SimConfig {
        seed: seed as u64,
        snr_db,
        suppress_frac,
        ..SimConfig::default()
    }
}

/// Clean, noisy and enhanced features of one simulated item.
pub fn simulate_panels(seed: u32, snr_db: f64, suppress_frac: f64) -> iffnet::Result<Panels> {
    let t = gen_triple(&sim_config(seed, snr_db, suppress_frac))?;
    let (frames, bins) = t.dims();
    let mut p = Panels::new(frames, bins);
    p.push("clean", &t.clean);
    p.push("noisy", &t.noisy);
    p.push("enhanced", &t.enhanced);
    p.summary = format!(
        "mse(enhanced, clean) = {:.4}   mse(noisy, clean) = {:.4}",
        oracle_mse(&t.enhanced, &t.clean)?,
        oracle_mse(&t.noisy, &t.clean)?
    );
    Ok(p)
}

/// Trains a one-block, four-filter network for `steps` steps on items drawn
/// from the same simulator settings, then fuses the item `seed` describes.
pub fn train_and_fuse_panels(
    seed: u32,
    snr_db: f64,
    suppress_frac: f64,
    steps: usize,
) -> iffnet::Result<Panels> {
    let sim = sim_config(seed, snr_db, suppress_frac);
    let cfg = TrainConfig {
        steps,
        batch_size: 4,
        warmup_steps: 50,
        lr_peak: 0.004,
        train_items: 64,
        arch: IffArchConfig::sized(1, 4),
        sim: SimConfig {
            seed: sim.seed.wrapping_add(1),
            ..sim.clone()
        },
        ..TrainConfig::desk()
    };
    let items = gen_items(&cfg.sim, cfg.train_items)?;
    let outcome = train(&cfg, &items, |_| {})?;
    let t = gen_triple(&sim)?;
    let fusion = outcome.model.fuse(&t.enhanced, &t.noisy)?;
    let (frames, bins) = t.dims();
    let flat = |x: &Tensor<f32>| x.reshape(&[frames, bins]);
    let fused = flat(&fusion.fused)?;
    let mut p = Panels::new(frames, bins);
    p.push("enhanced input", &t.enhanced);
    p.push("enhanced after interaction", &flat(&fusion.x_e_in)?);
    p.push("noisy after interaction", &flat(&fusion.x_n_in)?);
    p.push("merge mask", &flat(&fusion.mask)?);
    p.push("fused", &fused);
    p.push("clean target", &t.clean);
    let last = outcome.log.last().map_or(f64::NAN, |m| m.loss);
    p.summary = format!(
        "{steps} steps, final loss {last:.4}   mse(fused, clean) = {:.4}   mse(enhanced, clean) = {:.4}   mse(noisy, clean) = {:.4}",
        oracle_mse(&fused, &t.clean)?,
        oracle_mse(&t.enhanced, &t.clean)?,
        oracle_mse(&t.noisy, &t.clean)?
    );
    Ok(p)
}

/// Log-mel features of one second of a pure tone plus optional white-ish
/// noise at 16 kHz.
pub fn tone_fbank_panels(freq_hz: f64, noise: f64) -> iffnet::Result<Panels> {
    let cfg = FbankConfig::default();
    let sr = cfg.sample_rate as f64;
    let mut state = 0x2545_f491_u32;
    let wave: Vec<f32> = (0..cfg.sample_rate)
        .map(|i| {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            let hiss = (state as f64 / u32::MAX as f64) * 2.0 - 1.0;
            (0.5 * (std::f64::consts::TAU * freq_hz * i as f64 / sr).sin() + noise * hiss) as f32
        })
        .collect();
    let fb = compute_fbank(&wave, &cfg)?;
    let mut p = Panels::new(fb.shape()[0], fb.shape()[1]);
    p.push("log-mel fbank", &fb);
    p.summary = format!("{} frames x {} mel bins", p.frames, p.bins);
    Ok(p)
}

fn js(r: iffnet::Result<Panels>) -> Result<Panels, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn simulate(seed: u32, snr_db: f64, suppress_frac: f64) -> Result<Panels, JsError> {
    js(simulate_panels(seed, snr_db, suppress_frac))
}

#[wasm_bindgen]
pub fn train_and_fuse(
    seed: u32,
    snr_db: f64,
    suppress_frac: f64,
    steps: usize,
) -> Result<Panels, JsError> {
    js(train_and_fuse_panels(seed, snr_db, suppress_frac, steps))
}

#[wasm_bindgen]
pub fn tone_fbank(freq_hz: f64, noise: f64) -> Result<Panels, JsError> {
    js(tone_fbank_panels(freq_hz, noise))
}
