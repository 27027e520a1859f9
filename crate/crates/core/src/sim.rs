//! Synthetic over-suppression corpus in log-mel feature space.
//!
//! `clean` is a set of anisotropic Gaussian blobs (elongated along time, with
//! a slow frequency drift) thresholded onto a flat floor. `noisy` adds white
//! Gaussian noise at the requested SNR. `enhanced` removes all but a
//! `residual_noise_frac` share of that noise, but also drops a
//! `suppress_frac` share of the above-floor speech cells to the floor. The
//! dropped cells form coherent holes rather than isolated pixels.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fbank::FeatureTriple;
use crate::io::{load_tensor, save_tensor};
use crate::kv::KvMap;
use crate::tensor::Tensor;

/// Log-energy of silent cells.
pub const FLOOR: f32 = 0.0;
/// Blob energy subtracted before clamping at the floor.
const BLOB_CUTOFF: f64 = 0.1;
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub frames: usize,
    pub bins: usize,
    pub num_blobs: usize,
    /// `f64::INFINITY` disables noise entirely.
    pub snr_db: f64,
    pub suppress_frac: f64,
    pub residual_noise_frac: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            bins: 40,
            num_blobs: 6,
            snr_db: 5.0,
            suppress_frac: 0.3,
            residual_noise_frac: 0.1,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("sim", m));
        if self.frames == 0 || self.bins == 0 {
            return bad("frames and bins must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.suppress_frac) {
            return bad(format!(
                "suppress_frac {} outside [0, 1]",
                self.suppress_frac
            ));
        }
        if !(0.0..=1.0).contains(&self.residual_noise_frac) {
            return bad(format!(
                "residual_noise_frac {} outside [0, 1]",
                self.residual_noise_frac
            ));
        }
        if self.snr_db.is_nan() {
            return bad("snr_db is NaN".into());
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("sim.frames", self.frames);
        kv.set("sim.bins", self.bins);
        kv.set("sim.num_blobs", self.num_blobs);
        kv.set("sim.snr_db", self.snr_db);
        kv.set("sim.suppress_frac", self.suppress_frac);
        kv.set("sim.residual_noise_frac", self.residual_noise_frac);
        kv.set("sim.seed", self.seed);
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        macro_rules! field {
            ($key:literal, $slot:expr) => {
                if let Some(v) = kv.get($key)? {
                    $slot = v;
                }
            };
        }
        field!("sim.frames", self.frames);
        field!("sim.bins", self.bins);
        field!("sim.num_blobs", self.num_blobs);
        field!("sim.snr_db", self.snr_db);
        field!("sim.suppress_frac", self.suppress_frac);
        field!("sim.residual_noise_frac", self.residual_noise_frac);
        field!("sim.seed", self.seed);
        Ok(())
    }
}

/// A generated triple together with the hidden quantities behind it.
#[derive(Clone, Debug)]
pub struct SimDetail {
    pub triple: FeatureTriple,
    /// Unit-variance noise field before scaling.
    pub noise: Vec<f32>,
    /// Standard deviation applied to `noise` in the noisy feature.
    pub noise_std: f64,
    /// Cells of `clean` dropped to the floor in `enhanced`.
    pub suppressed: Vec<bool>,
}

/// One triple; a pure function of `cfg`.
pub fn gen_triple(cfg: &SimConfig) -> Result<FeatureTriple> {
    Ok(gen_triple_detailed(cfg)?.triple)
}

pub fn gen_triple_detailed(cfg: &SimConfig) -> Result<SimDetail> {
    cfg.validate()?;
    let (t_len, f_len) = (cfg.frames, cfg.bins);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut speech = vec![0.0f64; t_len * f_len];
    for _ in 0..cfg.num_blobs {
        let t0 = rng.random_range(0.0..t_len as f64);
        let f0 = rng.random_range(0.0..f_len as f64);
        let st = rng.random_range(0.08..0.22) * t_len as f64;
        let sf = (rng.random_range(0.02..0.06) * f_len as f64).max(0.7);
        let drift = rng.random_range(-0.3..0.3);
        let amp = rng.random_range(1.0..3.0);
        for t in 0..t_len {
            let dt = t as f64 - t0;
            let fc = f0 + drift * dt;
            for f in 0..f_len {
                let df = f as f64 - fc;
                speech[t * f_len + f] +=
                    amp * (-(dt * dt) / (2.0 * st * st) - (df * df) / (2.0 * sf * sf)).exp();
            }
        }
    }
    let clean: Vec<f32> = speech
        .iter()
        .map(|&s| FLOOR + (s - BLOB_CUTOFF).max(0.0) as f32)
        .collect();

    let noise: Vec<f32> = (0..t_len * f_len)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    let power = clean
        .iter()
        .map(|&c| ((c - FLOOR) as f64).powi(2))
        .sum::<f64>()
        / clean.len() as f64;
    let noise_std = if cfg.snr_db.is_infinite() && cfg.snr_db > 0.0 {
        0.0
    } else {
        (power / 10f64.powf(cfg.snr_db / 10.0)).sqrt()
    };

    // Coherent hole field: a few random bumps plus a tiny tie-breaker.
    let mut field = vec![0.0f64; t_len * f_len];
    let holes = 3;
    for _ in 0..holes {
        let t0 = rng.random_range(0.0..t_len as f64);
        let f0 = rng.random_range(0.0..f_len as f64);
        let st = rng.random_range(0.1..0.25) * t_len as f64;
        let sf = rng.random_range(0.1..0.25) * f_len as f64;
        for t in 0..t_len {
            for f in 0..f_len {
                let (dt, df) = (t as f64 - t0, f as f64 - f0);
                field[t * f_len + f] +=
                    (-(dt * dt) / (2.0 * st * st) - (df * df) / (2.0 * sf * sf)).exp();
            }
        }
    }
    for v in field.iter_mut() {
        *v += 1e-9 * rng.random::<f64>();
    }
    let mut speech_cells: Vec<usize> = (0..clean.len()).filter(|&i| clean[i] > FLOOR).collect();
    speech_cells.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let n_suppress = (cfg.suppress_frac * speech_cells.len() as f64).round() as usize;
    let mut suppressed = vec![false; clean.len()];
    for &i in &speech_cells[..n_suppress] {
        suppressed[i] = true;
    }

    let sigma = noise_std as f32;
    let residual = (cfg.residual_noise_frac * noise_std) as f32;
    let noisy: Vec<f32> = if sigma == 0.0 {
        clean.clone()
    } else {
        clean
            .iter()
            .zip(&noise)
            .map(|(&c, &z)| c + sigma * z)
            .collect()
    };
    let enhanced: Vec<f32> = (0..clean.len())
        .map(|i| {
            let base = if suppressed[i] { FLOOR } else { clean[i] };
            if residual == 0.0 {
                base
            } else {
                base + residual * noise[i]
            }
        })
        .collect();

    let shape = [t_len, f_len];
    Ok(SimDetail {
        triple: FeatureTriple::new(
            Tensor::new(&shape, clean)?,
            Tensor::new(&shape, noisy)?,
            Tensor::new(&shape, enhanced)?,
        )?,
        noise,
        noise_std,
        suppressed,
    })
}

/// Per-item seeds derived from a master seed.
pub fn item_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.random()).collect()
}

/// `n` independent triples; item `i` uses the `i`-th derived seed.
pub fn gen_items(cfg: &SimConfig, n: usize) -> Result<Vec<FeatureTriple>> {
    if n == 0 {
        return Err(Error::invalid(
            "gen_dataset",
            "item count must be at least 1",
        ));
    }
    item_seeds(cfg.seed, n)
        .into_iter()
        .map(|seed| {
            gen_triple(&SimConfig {
                seed,
                ..cfg.clone()
            })
        })
        .collect()
}

fn item_files(idx: usize) -> [String; 3] {
    [
        format!("{idx:05}.clean.ift"),
        format!("{idx:05}.noisy.ift"),
        format!("{idx:05}.enh.ift"),
    ]
}

/// Writes `n` triples and `manifest.txt` under `root`.
pub fn gen_dataset(cfg: &SimConfig, n: usize, root: &Path) -> Result<Vec<FeatureTriple>> {
    let items = gen_items(cfg, n)?;
    save_dataset(&items, cfg, root)?;
    Ok(items)
}

pub fn save_dataset(items: &[FeatureTriple], cfg: &SimConfig, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut kv = KvMap::new();
    kv.set("format_version", DATASET_VERSION);
    kv.set("kind", "iffnet-dataset");
    kv.set("count", items.len());
    cfg.write_kv(&mut kv);
    for (i, item) in items.iter().enumerate() {
        let files = item_files(i);
        save_tensor(&item.clean, &root.join(&files[0]))?;
        save_tensor(&item.noisy, &root.join(&files[1]))?;
        save_tensor(&item.enhanced, &root.join(&files[2]))?;
        kv.set(&format!("item.{i:05}"), files.join(","));
    }
    kv.write(&root.join("manifest.txt"))
}

/// Reads a directory written by [`gen_dataset`].
pub fn load_dataset(root: &Path) -> Result<(Vec<FeatureTriple>, SimConfig)> {
    let manifest: PathBuf = root.join("manifest.txt");
    let kv = KvMap::read(&manifest)?;
    let version: u32 = kv.require("format_version", &manifest)?;
    if version != DATASET_VERSION {
        return Err(Error::format(
            &manifest,
            format!("unsupported version {version}"),
        ));
    }
    let count: usize = kv.require("count", &manifest)?;
    let mut cfg = SimConfig::default();
    cfg.apply_kv(&kv)?;
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let key = format!("item.{i:05}");
        let entry: String = kv.require(&key, &manifest)?;
        let files: Vec<&str> = entry.split(',').collect();
        if files.len() != 3 {
            return Err(Error::format(
                &manifest,
                format!("{key}: expected three files"),
            ));
        }
        let load = |f: &str| load_tensor::<f32>(&root.join(f));
        items.push(
            FeatureTriple::new(load(files[0])?, load(files[1])?, load(files[2])?)
                .map_err(|e| Error::format(root.join(files[0]), e.to_string()))?,
        );
    }
    Ok((items, cfg))
}

/// Mean squared difference.
pub fn oracle_mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("oracle_mse", a.shape(), b.shape()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64)
}
