//! Dense latent grids and the resampling primitives every pyramid operation
//! is built from.
//!
//! A [`LatentGrid`] stores `height × width × channels` values row-major with
//! the channel index innermost. Resampling is bilinear with half-pixel
//! centers and clamp-to-edge boundaries, accumulated in `f64` and stored as
//! `f32`. The same kernel serves both directions.

use std::io::{Read, Write};

use crate::error::{bail, MsfError, Result};

pub const LGRID_MAGIC: [u8; 4] = *b"MSFG";
pub const LGRID_VERSION: u32 = 1;

#[derive(Clone, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for LatentGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatentGrid")
            .field("shape", &self.shape())
            .finish_non_exhaustive()
    }
}

impl LatentGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        check_dims(height, width, channels)?;
        Self::from_vec(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            bail!(
                Shape,
                "{} values for a {height}x{width}x{channels} grid",
                data.len()
            );
        }
        if data.iter().any(|v| !v.is_finite()) {
            bail!(InvalidArgument, "grid contains non-finite values");
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(row, col, channel)` at every cell.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        check_dims(height, width, channels)?;
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::from_vec(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.shape() == other.shape()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max)
    }

    /// `‖self − reference‖₂ / max(‖reference‖₂, tiny)`.
    pub fn relative_error(&self, reference: &LatentGrid) -> f64 {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (&a, &b) in self.data.iter().zip(&reference.data) {
            let d = a as f64 - b as f64;
            num += d * d;
            den += (b as f64) * (b as f64);
        }
        num.sqrt() / den.sqrt().max(f64::MIN_POSITIVE)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&LGRID_MAGIC)?;
        for v in [LGRID_VERSION, self.height as u32, self.width as u32, self.channels as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != LGRID_MAGIC {
            bail!(Format, "bad LGRID magic {magic:02x?}");
        }
        let version = read_u32(&mut r)?;
        if version != LGRID_VERSION {
            bail!(Format, "unsupported LGRID version {version}");
        }
        let height = read_u32(&mut r)? as usize;
        let width = read_u32(&mut r)? as usize;
        let channels = read_u32(&mut r)? as usize;
        check_dims(height, width, channels).map_err(|e| MsfError::Format(e.to_string()))?;
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| MsfError::Format("LGRID dimensions overflow".into()))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::from_vec(height, width, channels, data).map_err(|e| MsfError::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Wraps values produced by internal arithmetic that is finite by
    /// construction.
    pub(crate) fn from_parts_unchecked(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 || channels == 0 {
        bail!(
            InvalidArgument,
            "grid dimensions must be positive, got {height}x{width}x{channels}"
        );
    }
    Ok(())
}

/// Source taps for one output coordinate along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn axis_taps(src: usize, dst: usize) -> Vec<Tap> {
    let ratio = src as f64 / dst as f64;
    let max = (src - 1) as f64;
    (0..dst)
        .map(|o| {
            let x = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                w_hi: x - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resampling to `target_h × target_w`. Same-size requests return
/// an exact copy.
pub fn resize(src: &LatentGrid, target_h: usize, target_w: usize) -> Result<LatentGrid> {
    if target_h == 0 || target_w == 0 {
        bail!(
            InvalidArgument,
            "resize target must be positive, got {target_h}x{target_w}"
        );
    }
    if target_h == src.height && target_w == src.width {
        return Ok(src.clone());
    }
    let ch = src.channels;
    let rows = axis_taps(src.height, target_h);
    let cols = axis_taps(src.width, target_w);
    let at = |r: usize, c: usize, k: usize| src.data[(r * src.width + c) * ch + k] as f64;
    let mut out = Vec::with_capacity(target_h * target_w * ch);
    for ry in &rows {
        let wy = ry.w_hi;
        for cx in &cols {
            let wx = cx.w_hi;
            for k in 0..ch {
                let top = (1.0 - wx) * at(ry.lo, cx.lo, k) + wx * at(ry.lo, cx.hi, k);
                let bottom = (1.0 - wx) * at(ry.hi, cx.lo, k) + wx * at(ry.hi, cx.hi, k);
                out.push(((1.0 - wy) * top + wy * bottom) as f32);
            }
        }
    }
    Ok(LatentGrid::from_parts_unchecked(target_h, target_w, ch, out))
}

/// Elementwise `a·x + b·y`, evaluated in `f64`.
pub fn combine(a: f64, x: &LatentGrid, b: f64, y: &LatentGrid) -> Result<LatentGrid> {
    if !x.same_shape(y) {
        bail!(Shape, "combine {:?} with {:?}", x.shape(), y.shape());
    }
    let data: Vec<f32> = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(&u, &v)| (a * u as f64 + b * v as f64) as f32)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        bail!(InvalidArgument, "combine overflowed to a non-finite value");
    }
    let (h, w, c) = x.shape();
    Ok(LatentGrid::from_parts_unchecked(h, w, c, data))
}
