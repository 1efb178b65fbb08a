//! Synthetic class-conditional grids.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, MsfError, Result};
use crate::grid::LatentGrid;
use crate::parallel::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    /// One Gaussian bump per class, placed on a ring around the center.
    GaussianBlobs,
    /// A smooth cosine base plus a pixel-scale checker texture per class.
    CheckerFrequencies,
}

impl FromStr for GeneratorKind {
    type Err = MsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gaussian-blobs" => Ok(Self::GaussianBlobs),
            "checker-frequencies" => Ok(Self::CheckerFrequencies),
            other => bail!(Config, "unknown dataset kind {other:?}"),
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GaussianBlobs => "gaussian-blobs",
            Self::CheckerFrequencies => "checker-frequencies",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub kind: GeneratorKind,
    pub samples_per_class: usize,
    /// Standard deviation of the per-element Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            bail!(Config, "dataset grid must be non-empty");
        }
        if self.num_classes == 0 || self.samples_per_class == 0 {
            bail!(Config, "dataset needs at least one class and one sample per class");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            bail!(Config, "noise level must be finite and non-negative");
        }
        Ok(())
    }
}

/// Noise-free mean image of `class_id`.
pub fn template(spec: &DatasetSpec, class_id: usize) -> Result<LatentGrid> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let k = class_id;
    match spec.kind {
        GeneratorKind::GaussianBlobs => {
            let angle = 2.0 * PI * k as f64 / spec.num_classes as f64;
            // later laps of the ring move inward so centers never coincide
            let radius = 0.3 / (1 + k / 8) as f64;
            let (cy, cx) = (h * (0.5 + radius * angle.sin()), w * (0.5 + radius * angle.cos()));
            let spread = 0.12 * h.min(w);
            LatentGrid::from_fn(spec.height, spec.width, spec.channels, |r, c, ch| {
                let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                let sign = if ch % 2 == 0 { 1.0 } else { -1.0 };
                (sign * 1.5 * (-(dy * dy + dx * dx) / (2.0 * spread * spread)).exp()) as f32
            })
        }
        GeneratorKind::CheckerFrequencies => {
            const FREQS: [(f64, f64); 4] = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0)];
            let (fy, fx) = FREQS[k % 4];
            let mult = (1 + k / 8) as f64;
            let phase = if (k / 4) % 2 == 0 { 0.0 } else { PI };
            let period = 1 + k % 2;
            let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
            LatentGrid::from_fn(spec.height, spec.width, spec.channels, |r, c, ch| {
                let base = 0.8 * (2.0 * PI * mult * (fy * (r as f64 + 0.5) / h + fx * (c as f64 + 0.5) / w) + phase).cos();
                let parity = (r / period + c / period) % 2;
                let texture = 0.4 * sign * if parity == 0 { 1.0 } else { -1.0 };
                ((base + texture) / (1 + ch) as f64) as f32
            })
        }
    }
}

/// Generates `samples_per_class` noisy copies of each class template,
/// ordered by class. Each sample draws from its own stream of `seed`, so
/// the result does not depend on `exec`.
pub fn synth_dataset(spec: &DatasetSpec, exec: Exec) -> Result<Vec<(LatentGrid, usize)>> {
    spec.validate()?;
    let templates = (0..spec.num_classes)
        .map(|k| template(spec, k))
        .collect::<Result<Vec<_>>>()?;
    let n = spec.num_classes * spec.samples_per_class;
    let samples = exec.map_range(n, |i| {
        let k = i / spec.samples_per_class;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let data = templates[k]
            .as_slice()
            .iter()
            .map(|&v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (v as f64 + spec.noise * e) as f32
            })
            .collect();
        LatentGrid::from_vec(spec.height, spec.width, spec.channels, data).map(|g| (g, k))
    });
    samples.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: GeneratorKind, noise: f64) -> DatasetSpec {
        DatasetSpec {
            height: 16,
            width: 16,
            channels: 1,
            num_classes: 8,
            kind,
            samples_per_class: 5,
            noise,
            seed: 3,
        }
    }

    #[test]
    fn zero_noise_gives_identical_class_members() {
        for kind in [GeneratorKind::GaussianBlobs, GeneratorKind::CheckerFrequencies] {
            let data = synth_dataset(&spec(kind, 0.0), Exec::Sequential).unwrap();
            assert_eq!(data.len(), 40);
            for chunk in data.chunks(5) {
                assert!(chunk.iter().all(|(g, k)| g == &chunk[0].0 && *k == chunk[0].1));
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let s = spec(GeneratorKind::CheckerFrequencies, 0.2);
        let a = synth_dataset(&s, Exec::Sequential).unwrap();
        assert_eq!(a, synth_dataset(&s, Exec::Parallel).unwrap());
        let b = synth_dataset(&DatasetSpec { seed: 4, ..s }, Exec::Sequential).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn class_templates_are_far_apart() {
        let noise = 0.1;
        for kind in [GeneratorKind::GaussianBlobs, GeneratorKind::CheckerFrequencies] {
            let s = DatasetSpec { num_classes: 16, ..spec(kind, noise) };
            let t: Vec<_> = (0..16).map(|k| template(&s, k).unwrap()).collect();
            for i in 0..16 {
                for j in 0..i {
                    let d: f64 = t[i]
                        .as_slice()
                        .iter()
                        .zip(t[j].as_slice())
                        .map(|(a, b)| ((a - b) as f64).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!(d > 3.0 * noise, "{kind} classes {i} and {j} at distance {d}");
                }
            }
        }
    }

    #[test]
    fn empirical_means_match_templates() {
        let s = DatasetSpec {
            num_classes: 4,
            samples_per_class: 1000,
            ..spec(GeneratorKind::GaussianBlobs, 0.5)
        };
        let data = synth_dataset(&s, Exec::default()).unwrap();
        let bound = 3.0 * s.noise / (1000f64).sqrt();
        let mut worst = 0.0f64;
        let mut over = 0;
        for k in 0..4 {
            let t = template(&s, k).unwrap();
            for e in 0..256 {
                let mean = data[k * 1000..(k + 1) * 1000]
                    .iter()
                    .map(|(g, _)| g.as_slice()[e] as f64)
                    .sum::<f64>()
                    / 1000.0;
                let err = (mean - t.as_slice()[e] as f64).abs();
                worst = worst.max(err);
                if err > bound {
                    over += 1;
                }
            }
        }
        // a 3-sigma bound fails for ~0.3% of 1024 independent elements
        assert!(over <= 10, "{over} elements beyond {bound}, worst {worst}");
        assert!(worst < 5.0 * s.noise / (1000f64).sqrt());
    }

    #[test]
    fn kind_round_trips() {
        for k in [GeneratorKind::GaussianBlobs, GeneratorKind::CheckerFrequencies] {
            assert_eq!(k.to_string().parse::<GeneratorKind>().unwrap(), k);
        }
        assert!("stripes".parse::<GeneratorKind>().is_err());
    }
}
