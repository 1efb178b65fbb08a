//! Multi-scale residual decomposition of a latent and its inverse.
//!
//! A [`ResidualPyramid`] holds a low-resolution base followed by residuals at
//! increasing resolutions. Upsampling every entry to full resolution and
//! summing reproduces the source latent, because the last residual is taken
//! at full resolution where downsampling is the identity.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{bail, MsfError, Result};
use crate::grid::{combine, read_u32, resize, LatentGrid};

pub const MSFP_MAGIC: [u8; 4] = *b"MSFP";
pub const MSFP_VERSION: u32 = 1;

/// Ordered per-scale spatial sizes; the last entry is full resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSchedule {
    sizes: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(sizes: Vec<(usize, usize)>) -> Result<Self> {
        if sizes.len() < 2 {
            bail!(Config, "a schedule needs a base and at least one residual scale");
        }
        if sizes.iter().any(|&(h, w)| h == 0 || w == 0) {
            bail!(Config, "schedule sizes must be positive: {sizes:?}");
        }
        for pair in sizes.windows(2) {
            let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
            if h1 < h0 || w1 < w0 {
                bail!(Config, "schedule must be non-decreasing: {sizes:?}");
            }
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[(usize, usize)] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the full-resolution scale.
    pub fn last(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn full(&self) -> (usize, usize) {
        self.sizes[self.last()]
    }

    pub fn size(&self, scale: usize) -> (usize, usize) {
        self.sizes[scale]
    }
}

impl FromStr for ScaleSchedule {
    type Err = MsfError;

    /// Parses `h0xw0,h1xw1,...`.
    fn from_str(s: &str) -> Result<Self> {
        let sizes = s
            .split(',')
            .map(|item| {
                let item = item.trim();
                let (h, w) = item
                    .split_once(['x', 'X'])
                    .ok_or_else(|| MsfError::Config(format!("bad scale `{item}`, expected HxW")))?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| MsfError::Config(format!("bad scale `{item}`")))
                };
                Ok((parse(h)?, parse(w)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sizes)
    }
}

impl fmt::Display for ScaleSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (h, w)) in self.sizes.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{h}x{w}")?;
        }
        Ok(())
    }
}

/// Signal-space to latent-space map.
///
/// `AveragePool(k)` encodes by `k × k` block means and decodes by nearest
/// upsampling, which emulates a lossy encoder with downsampling ratio `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Codec {
    #[default]
    Identity,
    AveragePool(usize),
}

impl Codec {
    pub fn downsample_ratio(&self) -> usize {
        match *self {
            Codec::Identity => 1,
            Codec::AveragePool(k) => k,
        }
    }

    pub fn encode(&self, image: &LatentGrid) -> Result<LatentGrid> {
        match *self {
            Codec::Identity => Ok(image.clone()),
            Codec::AveragePool(k) => {
                let (h, w, c) = image.shape();
                if k == 0 || h % k != 0 || w % k != 0 {
                    bail!(
                        InvalidArgument,
                        "{h}x{w} image is not divisible by pool size {k}"
                    );
                }
                let inv = 1.0 / (k * k) as f64;
                let mut out = Vec::with_capacity(h / k * (w / k) * c);
                for by in 0..h / k {
                    for bx in 0..w / k {
                        for ch in 0..c {
                            let mut acc = 0.0f64;
                            for dy in 0..k {
                                for dx in 0..k {
                                    acc += image.get(by * k + dy, bx * k + dx, ch) as f64;
                                }
                            }
                            out.push((acc * inv) as f32);
                        }
                    }
                }
                Ok(LatentGrid::from_parts_unchecked(h / k, w / k, c, out))
            }
        }
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        match *self {
            Codec::Identity => Ok(latent.clone()),
            Codec::AveragePool(k) => {
                let (h, w, c) = latent.shape();
                LatentGrid::from_fn(h * k, w * k, c, |r, col, ch| latent.get(r / k, col / k, ch))
            }
        }
    }
}

impl FromStr for Codec {
    type Err = MsfError;

    /// `identity`, or `avgpool-K` / `average-pool-K`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "identity" {
            return Ok(Codec::Identity);
        }
        let k = s
            .strip_prefix("average-pool-")
            .or_else(|| s.strip_prefix("avgpool-"))
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k > 0)
            .ok_or_else(|| MsfError::Config(format!("unknown codec `{s}`")))?;
        Ok(Codec::AveragePool(k))
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Codec::Identity => f.write_str("identity"),
            Codec::AveragePool(k) => write!(f, "average-pool-{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPyramid {
    schedule: ScaleSchedule,
    residuals: Vec<LatentGrid>,
}

impl ResidualPyramid {
    pub fn new(schedule: ScaleSchedule, residuals: Vec<LatentGrid>) -> Result<Self> {
        if residuals.len() != schedule.len() {
            bail!(
                Shape,
                "{} residuals for a {}-scale schedule",
                residuals.len(),
                schedule.len()
            );
        }
        let channels = residuals[0].channels();
        for (i, (r, &(h, w))) in residuals.iter().zip(schedule.sizes()).enumerate() {
            if r.shape() != (h, w, channels) {
                bail!(Shape, "residual {i} is {:?}, expected ({h}, {w}, {channels})", r.shape());
            }
        }
        Ok(Self {
            schedule,
            residuals,
        })
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn residuals(&self) -> &[LatentGrid] {
        &self.residuals
    }

    pub fn channels(&self) -> usize {
        self.residuals[0].channels()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&MSFP_MAGIC)?;
        w.write_all(&MSFP_VERSION.to_le_bytes())?;
        w.write_all(&(self.residuals.len() as u32).to_le_bytes())?;
        for r in &self.residuals {
            r.write_to(&mut w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MSFP_MAGIC {
            bail!(Format, "bad MSFP magic {magic:02x?}");
        }
        let version = read_u32(&mut r)?;
        if version != MSFP_VERSION {
            bail!(Format, "unsupported MSFP version {version}");
        }
        let count = read_u32(&mut r)? as usize;
        let residuals = (0..count)
            .map(|_| LatentGrid::read_from(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let sizes = residuals.iter().map(|g| (g.height(), g.width())).collect();
        let schedule = ScaleSchedule::new(sizes).map_err(|e| MsfError::Format(e.to_string()))?;
        Self::new(schedule, residuals).map_err(|e| MsfError::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Accumulated-prior conditioning for scales `1..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSet {
    schedule: ScaleSchedule,
    priors: Vec<LatentGrid>,
}

impl PriorSet {
    pub(crate) fn from_parts(schedule: ScaleSchedule, priors: Vec<LatentGrid>) -> Self {
        debug_assert_eq!(priors.len() + 1, schedule.len());
        Self { schedule, priors }
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    /// Prior for `scale`; scale 0 has none.
    pub fn prior(&self, scale: usize) -> Option<&LatentGrid> {
        scale.checked_sub(1).and_then(|i| self.priors.get(i))
    }

    pub fn priors(&self) -> &[LatentGrid] {
        &self.priors
    }
}

/// `acc ← acc + Up(residual)`, the accumulation step shared by prior
/// extraction and sampling so both produce bitwise-identical priors.
pub(crate) fn accumulate(acc: &mut LatentGrid, residual: &LatentGrid) -> Result<()> {
    let up = resize(residual, acc.height(), acc.width())?;
    *acc = combine(1.0, acc, 1.0, &up)?;
    Ok(())
}

/// Decomposes `image_high` into a base latent plus residuals.
///
/// When `image_low` is absent it is synthesized by resizing `image_high` to
/// the base scale's pre-codec size.
pub fn extract_residuals(
    image_high: &LatentGrid,
    image_low: Option<&LatentGrid>,
    schedule: &ScaleSchedule,
    codec: Codec,
) -> Result<ResidualPyramid> {
    let ratio = codec.downsample_ratio();
    let (h_n, w_n) = schedule.full();
    let mut latent = codec.encode(image_high)?;
    if (latent.height(), latent.width()) != (h_n, w_n) {
        bail!(
            Shape,
            "encoded latent is {:?} but the schedule ends at {h_n}x{w_n}",
            latent.shape()
        );
    }
    let (h0, w0) = schedule.size(0);
    let base = match image_low {
        Some(low) => codec.encode(low)?,
        None => codec.encode(&resize(image_high, h0 * ratio, w0 * ratio)?)?,
    };
    if base.shape() != (h0, w0, latent.channels()) {
        bail!(
            Shape,
            "base latent is {:?}, expected ({h0}, {w0}, {})",
            base.shape(),
            latent.channels()
        );
    }

    let mut residuals = Vec::with_capacity(schedule.len());
    residuals.push(base);
    for i in 0..schedule.last() {
        let up = resize(&residuals[i], h_n, w_n)?;
        latent = combine(1.0, &latent, -1.0, &up)?;
        let (h, w) = schedule.size(i + 1);
        residuals.push(resize(&latent, h, w)?);
    }
    ResidualPyramid::new(schedule.clone(), residuals)
}

pub fn extract_priors(pyramid: &ResidualPyramid) -> Result<PriorSet> {
    let schedule = pyramid.schedule();
    let (h_n, w_n) = schedule.full();
    let mut acc = LatentGrid::zeros(h_n, w_n, pyramid.channels())?;
    let mut priors = Vec::with_capacity(schedule.last());
    for i in 0..schedule.last() {
        accumulate(&mut acc, &pyramid.residuals()[i])?;
        let (h, w) = schedule.size(i + 1);
        priors.push(resize(&acc, h, w)?);
    }
    Ok(PriorSet::from_parts(schedule.clone(), priors))
}

pub fn reconstruct(pyramid: &ResidualPyramid) -> Result<LatentGrid> {
    let (h_n, w_n) = pyramid.schedule().full();
    let mut acc = LatentGrid::zeros(h_n, w_n, pyramid.channels())?;
    for r in pyramid.residuals() {
        accumulate(&mut acc, r)?;
    }
    Ok(acc)
}

/// Independent per-scale resizes of a latent, with no residual structure.
pub fn factorize_scaling_latent(
    latent: &LatentGrid,
    schedule: &ScaleSchedule,
) -> Result<Vec<LatentGrid>> {
    schedule
        .sizes()
        .iter()
        .map(|&(h, w)| resize(latent, h, w))
        .collect()
}

/// Resizes in signal space to each scale's pre-codec size, then encodes.
pub fn factorize_scaling_image(
    image: &LatentGrid,
    schedule: &ScaleSchedule,
    codec: Codec,
) -> Result<Vec<LatentGrid>> {
    let k = codec.downsample_ratio();
    if image.height() % k != 0 || image.width() % k != 0 {
        bail!(
            InvalidArgument,
            "{}x{} image is not divisible by codec ratio {k}",
            image.height(),
            image.width()
        );
    }
    schedule
        .sizes()
        .iter()
        .map(|&(h, w)| codec.encode(&resize(image, h * k, w * k)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LatentGrid {
        LatentGrid::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    fn sched(s: &str) -> ScaleSchedule {
        s.parse().unwrap()
    }

    #[test]
    fn schedule_validation() {
        assert!(ScaleSchedule::new(vec![(4, 4)]).is_err());
        assert!(ScaleSchedule::new(vec![(8, 8), (4, 4)]).is_err());
        assert!(ScaleSchedule::new(vec![(0, 4), (4, 4)]).is_err());
        assert!(ScaleSchedule::new(vec![(4, 4), (4, 4)]).is_ok());
        let s = sched("4x4, 8x8,16x16");
        assert_eq!(s.sizes(), &[(4, 4), (8, 8), (16, 16)]);
        assert_eq!(s.to_string(), "4x4,8x8,16x16");
        assert!("4x4;8x8".parse::<ScaleSchedule>().is_err());
    }

    #[test]
    fn constant_latent_has_zero_residuals() {
        let img = LatentGrid::filled(8, 8, 1, 0.7).unwrap();
        let p = extract_residuals(&img, None, &sched("4x4,8x8"), Codec::Identity).unwrap();
        assert_eq!(p.residuals()[0].shape(), (4, 4, 1));
        assert!(p.residuals()[0].as_slice().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        assert!(p.residuals()[1].as_slice().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn last_residual_is_the_remaining_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_grid(&mut rng, 8, 8, 2);
        let p = extract_residuals(&img, None, &sched("4x4,8x8"), Codec::Identity).unwrap();
        let up = resize(&p.residuals()[0], 8, 8).unwrap();
        let expected = combine(1.0, &img, -1.0, &up).unwrap();
        assert_eq!(p.residuals()[1], expected);
    }

    #[test]
    fn telescoping_sum_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_grid(&mut rng, 16, 16, 1);
        let p = extract_residuals(&img, None, &sched("4x4,8x8,16x16"), Codec::Identity).unwrap();
        // Oracle: explicit sum of upsampled residuals.
        let mut sum = vec![0.0f64; 256];
        for r in p.residuals() {
            let up = resize(r, 16, 16).unwrap();
            for (s, &v) in sum.iter_mut().zip(up.as_slice()) {
                *s += v as f64;
            }
        }
        let sum = LatentGrid::from_vec(16, 16, 1, sum.iter().map(|&v| v as f32).collect()).unwrap();
        assert!(sum.relative_error(&img) < 1e-4);
        assert!(reconstruct(&p).unwrap().relative_error(&img) < 1e-4);
    }

    #[test]
    fn explicit_low_resolution_image_is_encoded_as_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hi = random_grid(&mut rng, 8, 8, 1);
        let lo = random_grid(&mut rng, 4, 4, 1);
        let p = extract_residuals(&hi, Some(&lo), &sched("4x4,8x8"), Codec::Identity).unwrap();
        assert_eq!(p.residuals()[0], lo);
        assert!(reconstruct(&p).unwrap().relative_error(&hi) < 1e-4);
        let wrong = random_grid(&mut rng, 2, 2, 1);
        assert!(matches!(
            extract_residuals(&hi, Some(&wrong), &sched("4x4,8x8"), Codec::Identity),
            Err(MsfError::Shape(_))
        ));
    }

    #[test]
    fn schedule_mismatch_is_a_shape_error() {
        let img = LatentGrid::zeros(8, 8, 1).unwrap();
        assert!(matches!(
            extract_residuals(&img, None, &sched("4x4,16x16"), Codec::Identity),
            Err(MsfError::Shape(_))
        ));
    }

    #[test]
    fn single_prior_is_upsampled_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_grid(&mut rng, 8, 8, 2);
        let p = extract_residuals(&img, None, &sched("4x4,8x8"), Codec::Identity).unwrap();
        let priors = extract_priors(&p).unwrap();
        assert!(priors.prior(0).is_none());
        assert_eq!(priors.prior(1).unwrap(), &resize(&p.residuals()[0], 8, 8).unwrap());
    }

    #[test]
    fn zero_pyramid() {
        let s = sched("2x2,4x4,8x8");
        let residuals = s
            .sizes()
            .iter()
            .map(|&(h, w)| LatentGrid::zeros(h, w, 3).unwrap())
            .collect();
        let p = ResidualPyramid::new(s, residuals).unwrap();
        let priors = extract_priors(&p).unwrap();
        assert!(priors.priors().iter().all(|g| g.as_slice().iter().all(|&v| v == 0.0)));
        assert!(reconstruct(&p).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_single_size_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = sched("4x4,4x4");
        let a = random_grid(&mut rng, 4, 4, 1);
        let b = random_grid(&mut rng, 4, 4, 1);
        let p = ResidualPyramid::new(s, vec![a.clone(), b.clone()]).unwrap();
        let expected = combine(1.0, &a, 1.0, &b).unwrap();
        assert!(reconstruct(&p).unwrap().max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn scaling_latent_ablation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_grid(&mut rng, 8, 8, 1);
        let s = sched("4x4,8x8");
        let f = factorize_scaling_latent(&img, &s).unwrap();
        assert_eq!(f[1], img);
        assert_eq!(f[0], resize(&img, 4, 4).unwrap());
        let c = factorize_scaling_latent(&LatentGrid::filled(8, 8, 1, 2.0).unwrap(), &s).unwrap();
        assert!(c.iter().all(|g| g.as_slice().iter().all(|&v| (v - 2.0).abs() < 1e-6)));
    }

    #[test]
    fn scaling_image_ablation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_grid(&mut rng, 8, 8, 1);
        let s = sched("4x4,8x8");
        assert_eq!(
            factorize_scaling_image(&img, &s, Codec::Identity).unwrap(),
            factorize_scaling_latent(&img, &s).unwrap()
        );

        // 16x16 image with a 2x2 pool: the full-resolution entry is the
        // block-mean image.
        let img = random_grid(&mut rng, 16, 16, 1);
        let f = factorize_scaling_image(&img, &s, Codec::AveragePool(2)).unwrap();
        assert_eq!(f[0].shape(), (4, 4, 1));
        for r in 0..8 {
            for c in 0..8 {
                let mean = (img.get(2 * r, 2 * c, 0) as f64
                    + img.get(2 * r, 2 * c + 1, 0) as f64
                    + img.get(2 * r + 1, 2 * c, 0) as f64
                    + img.get(2 * r + 1, 2 * c + 1, 0) as f64)
                    / 4.0;
                assert!((f[1].get(r, c, 0) as f64 - mean).abs() < 1e-6);
            }
        }

        let c = factorize_scaling_image(
            &LatentGrid::filled(16, 16, 1, -1.5).unwrap(),
            &s,
            Codec::AveragePool(2),
        )
        .unwrap();
        assert!(c.iter().all(|g| g.as_slice().iter().all(|&v| (v + 1.5).abs() < 1e-6)));

        let odd = LatentGrid::zeros(15, 16, 1).unwrap();
        assert!(matches!(
            factorize_scaling_image(&odd, &s, Codec::AveragePool(2)),
            Err(MsfError::InvalidArgument(_))
        ));
    }

    #[test]
    fn average_pool_codec() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = random_grid(&mut rng, 8, 8, 2);
        let codec = Codec::AveragePool(2);
        let lat = codec.encode(&img).unwrap();
        assert_eq!(lat.shape(), (4, 4, 2));
        let back = codec.decode(&lat).unwrap();
        assert_eq!(back.shape(), img.shape());
        // Round-trip error per cell is bounded by the block's spread.
        for r in 0..8 {
            for c in 0..8 {
                for ch in 0..2 {
                    let (by, bx) = (r / 2 * 2, c / 2 * 2);
                    let block = [
                        img.get(by, bx, ch),
                        img.get(by, bx + 1, ch),
                        img.get(by + 1, bx, ch),
                        img.get(by + 1, bx + 1, ch),
                    ];
                    let spread = block.iter().cloned().fold(f32::MIN, f32::max)
                        - block.iter().cloned().fold(f32::MAX, f32::min);
                    assert!((back.get(r, c, ch) - img.get(r, c, ch)).abs() <= spread + 1e-6);
                }
            }
        }
        // Lossy codec: residual decomposition is exact in latent space.
        let img = random_grid(&mut rng, 16, 16, 1);
        let p = extract_residuals(&img, None, &sched("4x4,8x8"), codec).unwrap();
        let lat = codec.encode(&img).unwrap();
        assert!(reconstruct(&p).unwrap().relative_error(&lat) < 1e-4);

        assert_eq!(Codec::Identity.decode(&img).unwrap(), img);
        assert_eq!("average-pool-8".parse::<Codec>().unwrap(), Codec::AveragePool(8));
        assert_eq!("identity".parse::<Codec>().unwrap(), Codec::Identity);
        assert!("bicubic".parse::<Codec>().is_err());
    }

    #[test]
    fn msfp_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_grid(&mut rng, 8, 8, 1);
        let p = extract_residuals(&img, None, &sched("4x4,8x8"), Codec::Identity).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], &[0x4D, 0x53, 0x46, 0x50]);
        assert_eq!(&buf[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[12..16], b"MSFG");
        assert_eq!(buf.len(), 12 + (20 + 16 * 4) + (20 + 64 * 4));
        assert_eq!(ResidualPyramid::read_from(&buf[..]).unwrap(), p);
        buf[4] = 9;
        assert!(matches!(ResidualPyramid::read_from(&buf[..]), Err(MsfError::Format(_))));
    }
}
