//! Log-mel filter-bank (Fbank) features and waveform readers.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Natural-log floor applied to filter energies.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct FbankConfig {
    pub sample_rate: u32,
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_size: usize,
    pub mel_bins: usize,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_len_ms: 25.0,
            frame_shift_ms: 10.0,
            fft_size: 512,
            mel_bins: 80,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl FbankConfig {
    pub fn frame_len(&self) -> usize {
        (self.sample_rate as f64 * self.frame_len_ms / 1000.0).round() as usize
    }

    pub fn frame_shift(&self) -> usize {
        (self.sample_rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn spectrum_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("fbank", msg));
        if self.sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        if self.mel_bins < 2 {
            return bad(format!("need at least 2 mel bins, got {}", self.mel_bins));
        }
        if self.frame_shift() == 0 || self.frame_len() < self.frame_shift() {
            return bad(format!(
                "frame length {} must be >= frame shift {} > 0",
                self.frame_len(),
                self.frame_shift()
            ));
        }
        if self.fft_size < self.frame_len() {
            return bad(format!(
                "fft size {} shorter than frame length {}",
                self.fft_size,
                self.frame_len()
            ));
        }
        Ok(())
    }

    /// Number of frames for a waveform of `len` samples (0 if shorter than
    /// one frame).
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.frame_len() {
            0
        } else {
            1 + (len - self.frame_len()) / self.frame_shift()
        }
    }

    /// Center frequency of each triangular filter, in Hz.
    pub fn mel_centers_hz(&self) -> Vec<f64> {
        let edges = self.mel_edges_hz();
        edges[1..=self.mel_bins].to_vec()
    }

    fn mel_edges_hz(&self) -> Vec<f64> {
        let top = hz_to_mel(self.sample_rate as f64 / 2.0);
        (0..self.mel_bins + 2)
            .map(|i| mel_to_hz(top * i as f64 / (self.mel_bins + 1) as f64))
            .collect()
    }

    /// Triangular HTK-mel filters, `mel_bins x spectrum_bins`, row-major.
    pub fn mel_filters(&self) -> Vec<f64> {
        let edges = self.mel_edges_hz();
        let nb = self.spectrum_bins();
        let bin_hz = self.sample_rate as f64 / self.fft_size as f64;
        let mut w = vec![0.0; self.mel_bins * nb];
        for m in 0..self.mel_bins {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..nb {
                let fk = k as f64 * bin_hz;
                let v = if fk >= lo && fk <= c && c > lo {
                    (fk - lo) / (c - lo)
                } else if fk > c && fk <= hi && hi > c {
                    (hi - fk) / (hi - c)
                } else {
                    0.0
                };
                w[m * nb + k] = v;
            }
        }
        w
    }
}

/// Clean, noisy and enhanced log-mel features of one utterance, all `T x F`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTriple {
    pub clean: Tensor<f32>,
    pub noisy: Tensor<f32>,
    pub enhanced: Tensor<f32>,
}

impl FeatureTriple {
    pub fn new(clean: Tensor<f32>, noisy: Tensor<f32>, enhanced: Tensor<f32>) -> Result<Self> {
        if clean.rank() != 2 {
            return Err(Error::invalid(
                "feature_triple",
                format!("expected T x F features, got {:?}", clean.shape()),
            ));
        }
        for other in [&noisy, &enhanced] {
            if other.shape() != clean.shape() {
                return Err(Error::shape("feature_triple", clean.shape(), other.shape()));
            }
        }
        if !(clean.is_finite() && noisy.is_finite() && enhanced.is_finite()) {
            return Err(Error::invalid("feature_triple", "non-finite feature value"));
        }
        Ok(Self {
            clean,
            noisy,
            enhanced,
        })
    }

    /// `(T, F)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.clean.shape()[0], self.clean.shape()[1])
    }
}

/// Symmetric Hann window.
fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Power spectrum → mel filters → natural log (floored at [`LOG_FLOOR`]).
/// Returns a `T x F` tensor with `T = 1 + (len − frame_len) / frame_shift`.
pub fn compute_fbank(waveform: &[f32], cfg: &FbankConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let frames = cfg.num_frames(waveform.len());
    if frames == 0 {
        return Err(Error::invalid(
            "compute_fbank",
            format!(
                "waveform of {} samples is shorter than one frame ({})",
                waveform.len(),
                cfg.frame_len()
            ),
        ));
    }
    let (flen, shift, nfft, nb) = (
        cfg.frame_len(),
        cfg.frame_shift(),
        cfg.fft_size,
        cfg.spectrum_bins(),
    );
    let window = hann(flen);
    let filters = cfg.mel_filters();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut power = vec![0.0; nb];
    let mut out = Vec::with_capacity(frames * cfg.mel_bins);
    for t in 0..frames {
        let start = t * shift;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < flen {
                Complex::new(waveform[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, z) in power.iter_mut().zip(&buf) {
            *p = z.norm_sqr();
        }
        for m in 0..cfg.mel_bins {
            let row = &filters[m * nb..(m + 1) * nb];
            let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push(e.max(LOG_FLOOR).ln() as f32);
        }
    }
    Tensor::new(&[frames, cfg.mel_bins], out)
}

/// Reads a mono RIFF/WAVE file; integer PCM is scaled to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            path,
            format!("expected a single channel, found {}", spec.channels),
        ));
    }
    let samples = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<Vec<_>, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    Ok((samples, spec.sample_rate))
}

/// Reads headerless little-endian `f32` samples.
pub fn read_raw_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            path,
            format!("length {} is not a multiple of 4", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Dispatches on extension: `.wav` through [`read_wav`], anything else as raw
/// `f32` at `cfg.sample_rate`. The sample rate must match the config.
pub fn read_waveform(path: &Path, cfg: &FbankConfig) -> Result<Vec<f32>> {
    let is_wav = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if !is_wav {
        return read_raw_f32(path);
    }
    let (samples, sr) = read_wav(path)?;
    if sr != cfg.sample_rate {
        return Err(Error::format(
            path,
            format!(
                "sample rate {sr} Hz does not match configured {} Hz",
                cfg.sample_rate
            ),
        ));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, sr: u32, amp: f64) -> Vec<f32> {
        let n = (seconds * sr as f64) as usize;
        (0..n)
            .map(|i| {
                (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32
            })
            .collect()
    }

    #[test]
    fn default_spectrum_has_257_bins() {
        let cfg = FbankConfig::default();
        assert_eq!(cfg.spectrum_bins(), 257);
        assert_eq!(cfg.frame_len(), 400);
        assert_eq!(cfg.frame_shift(), 160);
    }

    #[test]
    fn one_second_gives_98_frames() {
        let cfg = FbankConfig::default();
        let fb = compute_fbank(&vec![0.1; 16_000], &cfg).unwrap();
        assert_eq!(fb.shape(), &[98, 80]);
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = FbankConfig::default();
        let fb = compute_fbank(&vec![0.0; 800], &cfg).unwrap();
        let floor = LOG_FLOOR.ln() as f32;
        assert!(fb.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn short_waveform_rejected() {
        let cfg = FbankConfig::default();
        assert!(compute_fbank(&[0.0; 399], &cfg).is_err());
    }

    #[test]
    fn tone_peaks_at_nearest_center() {
        let cfg = FbankConfig::default();
        let fb = compute_fbank(&tone(1000.0, 0.2, 16_000, 0.5), &cfg).unwrap();
        let centers = cfg.mel_centers_hz();
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let (t, f) = (fb.shape()[0], fb.shape()[1]);
        for frame in 0..t {
            let row = &fb.data()[frame * f..(frame + 1) * f];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, nearest, "frame {frame}");
        }
    }

    #[test]
    fn prepending_one_shift_adds_one_frame() {
        let cfg = FbankConfig::default();
        for len in [400, 401, 559, 560, 1234, 16_000] {
            assert_eq!(
                cfg.num_frames(len + cfg.frame_shift()),
                cfg.num_frames(len) + 1
            );
        }
    }

    #[test]
    fn scaling_by_ten_adds_ln_100() {
        let cfg = FbankConfig::default();
        let mut wave = tone(440.0, 0.1, 16_000, 0.05);
        for (i, s) in wave.iter_mut().enumerate() {
            *s += 0.01 * ((i * 7919 % 101) as f32 / 50.0 - 1.0);
        }
        let loud: Vec<f32> = wave.iter().map(|v| v * 10.0).collect();
        let a = compute_fbank(&wave, &cfg).unwrap();
        let b = compute_fbank(&loud, &cfg).unwrap();
        let floor = LOG_FLOOR.ln() as f32;
        let mut checked = 0;
        for (x, y) in a.data().iter().zip(b.data()) {
            if *x > floor + 1.0 {
                assert!(((y - x) as f64 - 100f64.ln()).abs() < 1e-4, "{x} {y}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn filters_are_nonnegative() {
        let cfg = FbankConfig {
            mel_bins: 40,
            ..FbankConfig::default()
        };
        let w = cfg.mel_filters();
        assert!(w.iter().all(|&v| v >= 0.0));
        // every filter covers at least one spectrum bin
        let nb = cfg.spectrum_bins();
        for m in 0..40 {
            assert!(
                w[m * nb..(m + 1) * nb].iter().any(|&v| v > 0.0),
                "filter {m}"
            );
        }
    }

    #[test]
    fn mel_scale_round_trip() {
        for hz in [0.0, 100.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn wav_reader_scales_pcm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for v in [0i16, 16384, -32768] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let (s, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 16_000);
        assert_eq!(s, vec![0.0, 0.5, -1.0]);
        let cfg = FbankConfig {
            sample_rate: 8_000,
            ..FbankConfig::default()
        };
        assert!(read_waveform(&path, &cfg).is_err());
    }
}
