//! Tensor files and plane exports.
//!
//! IFT1 layout: the magic bytes `IFT1`, one `u8` rank, `rank` little-endian
//! `u32` extents, then the row-major payload as little-endian `f32`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, MAX_RANK};

pub const IFT_MAGIC: &[u8; 4] = b"IFT1";

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(IFT_MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_f32_bytes());
    }
    out
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 4 || &bytes[..4] != IFT_MAGIC {
        return Err(Error::BadMagic);
    }
    let rank = *bytes.get(4).ok_or(Error::Truncated {
        expected: 1,
        found: 0,
    })? as usize;
    if rank > MAX_RANK {
        return Err(Error::RankTooLarge(rank));
    }
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let payload = &bytes[header..];
    let expected = numel * 4;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::invalid(
            "load_tensor",
            format!("{} trailing bytes after payload", payload.len() - expected),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(&shape, data)
}

pub fn save_tensor<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Io { .. } | Error::Format { .. } => e,
        other => Error::format(path, other.to_string()),
    })
}

fn as_plane<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    let (n, c, rows, cols) = t.dims4();
    if n != 1 || c != 1 {
        return Err(Error::invalid(
            op,
            format!("expected a single T x F plane, got {:?}", t.shape()),
        ));
    }
    Ok((rows, cols))
}

/// One line per frame, comma-separated bins.
pub fn plane_to_csv<T: Scalar>(t: &Tensor<T>) -> Result<String> {
    let (rows, cols) = as_plane(t, "csv")?;
    let mut out = String::new();
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{}", t.data()[r * cols + c].to_f64_lossy() as f32).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    std::fs::write(path, plane_to_csv(t)?).map_err(|e| Error::io(path, e))
}

/// Min/max used to map a plane onto 0..=255.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgmRange {
    pub min: f64,
    pub max: f64,
}

/// Renders a `T x F` plane as an 8-bit grayscale P5 image with time on the
/// horizontal axis and the highest frequency bin on the top row.
pub fn plane_to_pgm<T: Scalar>(t: &Tensor<T>) -> Result<(Vec<u8>, PgmRange)> {
    let (frames, bins) = as_plane(t, "pgm")?;
    let vals = t.to_f64_vec();
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P5\n{frames} {bins}\n255\n").into_bytes();
    for row in 0..bins {
        let bin = bins - 1 - row;
        for frame in 0..frames {
            let v = vals[frame * bins + bin];
            let level = if span > 0.0 {
                ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            out.push(level);
        }
    }
    Ok((out, PgmRange { min, max }))
}

/// Writes `path` and a `path.txt` sidecar holding the normalization range.
pub fn write_pgm<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<PgmRange> {
    let (bytes, range) = plane_to_pgm(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let (frames, bins) = as_plane(t, "pgm")?;
    let mut side = crate::kv::KvMap::new();
    side.set("min", range.min);
    side.set("max", range.max);
    side.set("width_frames", frames);
    side.set("height_bins", bins);
    side.set("top_row", "highest_bin");
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".txt");
    side.write(Path::new(&sidecar))?;
    Ok(range)
}
