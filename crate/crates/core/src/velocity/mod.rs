//! The conditional velocity field: a small DiT-style transformer
//! conditioned on class, time, scale, and the accumulated coarser-scale
//! prior, plus classifier-free-guided evaluation.

mod checkpoint;
mod network;
pub(crate) mod nn;

use std::sync::atomic::{AtomicU64, Ordering};

pub use checkpoint::{load_checkpoint, save_checkpoint, MSFC_MAGIC, MSFC_VERSION};
pub use network::{VelocityParams, TIME_FREQS};
pub use nn::{Scalar, Tensor};

pub(crate) use network::{patchify, unpatchify};

use crate::error::{bail, Result};
use crate::factorize::ScaleSchedule;
use crate::grid::LatentGrid;

/// Spatial size and patch size for one scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleSpec {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl ScaleSpec {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VelocityConfig {
    pub channels: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub scales: Vec<ScaleSpec>,
}

impl VelocityConfig {
    pub const DEFAULT_DEPTH: usize = 4;
    pub const DEFAULT_HIDDEN: usize = 128;
    pub const DEFAULT_HEADS: usize = 4;
    pub const DEFAULT_PATCH: usize = 2;

    /// Desk-scale defaults (depth 4, width 128, 4 heads, patch 2).
    pub fn new(channels: usize, num_classes: usize, schedule: &ScaleSchedule) -> Self {
        Self {
            channels,
            hidden: Self::DEFAULT_HIDDEN,
            depth: Self::DEFAULT_DEPTH,
            heads: Self::DEFAULT_HEADS,
            num_classes,
            scales: schedule
                .sizes()
                .iter()
                .map(|&(height, width)| ScaleSpec {
                    height,
                    width,
                    patch: Self::DEFAULT_PATCH,
                })
                .collect(),
        }
    }

    pub fn with_size(mut self, hidden: usize, depth: usize, heads: usize) -> Self {
        self.hidden = hidden;
        self.depth = depth;
        self.heads = heads;
        self
    }

    pub fn with_patches(mut self, patches: &[usize]) -> Self {
        for (s, &p) in self.scales.iter_mut().zip(patches) {
            s.patch = p;
        }
        self
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Row `num_classes` of the class table is the unconditional token.
    pub fn has_null_class(&self) -> bool {
        true
    }

    pub fn schedule(&self) -> Result<ScaleSchedule> {
        ScaleSchedule::new(self.scales.iter().map(|s| (s.height, s.width)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 || self.depth == 0 || self.heads == 0 {
            bail!(Config, "channels, hidden width, depth and heads must be positive");
        }
        if self.num_classes == 0 {
            bail!(Config, "at least one class is required");
        }
        if self.hidden % self.heads != 0 {
            bail!(Config, "hidden width {} not divisible by {} heads", self.hidden, self.heads);
        }
        if self.scales.is_empty() {
            bail!(Config, "no scales configured");
        }
        for (i, s) in self.scales.iter().enumerate() {
            if s.patch == 0 || s.height % s.patch != 0 || s.width % s.patch != 0 {
                bail!(
                    Config,
                    "patch size {} does not divide scale {i} ({}x{})",
                    s.patch,
                    s.height,
                    s.width
                );
            }
        }
        Ok(())
    }
}

/// Conditioning for one evaluation of the field.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// Class index; `num_classes` denotes the unconditional token.
    pub class_id: usize,
    pub t: f64,
    pub scale_index: usize,
    /// Accumulated coarser-scale latent; absent exactly at scale 0.
    pub prior: Option<LatentGrid>,
}

/// Anything that maps `(z_t, condition)` to a velocity of the same shape.
pub trait VelocityField: Sync {
    fn null_class(&self) -> usize;

    /// Evaluates a batch of inputs; each counts as one network evaluation.
    fn velocity(&self, inputs: &[(&LatentGrid, &ConditionBundle)]) -> Result<Vec<LatentGrid>>;
}

/// Counts network evaluations (one per sample per forward pass).
#[derive(Debug, Default)]
pub struct EvalCounter(AtomicU64);

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Largest batch packed into one pass; bounds activation memory.
const INFER_CHUNK: usize = 128;

impl<F: Scalar> VelocityField for VelocityParams<F> {
    fn null_class(&self) -> usize {
        self.config().num_classes
    }

    fn velocity(&self, inputs: &[(&LatentGrid, &ConditionBundle)]) -> Result<Vec<LatentGrid>> {
        let mut out: Vec<Option<LatentGrid>> = vec![None; inputs.len()];
        for scale in 0..self.config().num_scales() {
            let idx: Vec<usize> = (0..inputs.len())
                .filter(|&i| inputs[i].1.scale_index == scale)
                .collect();
            for chunk in idx.chunks(INFER_CHUNK) {
                let sub: Vec<_> = chunk.iter().map(|&i| inputs[i]).collect();
                for (&i, g) in chunk.iter().zip(self.forward_group(&sub)?) {
                    out[i] = Some(g);
                }
            }
        }
        out.into_iter()
            .zip(inputs)
            .map(|(g, (_, c))| match g {
                Some(g) => Ok(g),
                None => bail!(InvalidArgument, "scale index {} out of range", c.scale_index),
            })
            .collect()
    }
}

impl<F: Scalar> VelocityParams<F> {
    fn forward_group(&self, inputs: &[(&LatentGrid, &ConditionBundle)]) -> Result<Vec<LatentGrid>> {
        let packed = self.pack(inputs)?;
        let (out, _) = self.forward_packed(&packed);
        let spec = self.config().scales[packed.scale];
        let c = self.config().channels;
        let per = spec.height * spec.width * c;
        out.chunks_exact(per)
            .map(|tok| {
                let grid = unpatchify(tok, spec.height, spec.width, spec.patch, c);
                LatentGrid::from_vec(
                    spec.height,
                    spec.width,
                    c,
                    grid.into_iter().map(|v| v.f64() as f32).collect(),
                )
            })
            .collect()
    }
}

pub fn init_params(config: &VelocityConfig, seed: u64) -> Result<VelocityParams> {
    VelocityParams::init(config, seed)
}

pub fn forward<V: VelocityField + ?Sized>(
    field: &V,
    z_t: &LatentGrid,
    cond: &ConditionBundle,
) -> Result<LatentGrid> {
    Ok(field.velocity(&[(z_t, cond)])?.remove(0))
}

/// Guided velocity `v_u + g·(v_c − v_u)`. With `g == 1` only the
/// conditional pass runs.
pub fn forward_cfg<V: VelocityField + ?Sized>(
    field: &V,
    z_t: &LatentGrid,
    cond: &ConditionBundle,
    guidance: f64,
    counter: &EvalCounter,
) -> Result<LatentGrid> {
    Ok(forward_cfg_batch(field, &[z_t], std::slice::from_ref(cond), guidance, counter)?.remove(0))
}

pub fn forward_cfg_batch<V: VelocityField + ?Sized>(
    field: &V,
    zs: &[&LatentGrid],
    conds: &[ConditionBundle],
    guidance: f64,
    counter: &EvalCounter,
) -> Result<Vec<LatentGrid>> {
    if !(guidance >= 1.0) || !guidance.is_finite() {
        bail!(InvalidArgument, "guidance must be a finite value >= 1, got {guidance}");
    }
    if zs.len() != conds.len() {
        bail!(InvalidArgument, "{} inputs but {} conditions", zs.len(), conds.len());
    }
    let null = field.null_class();
    if conds.iter().any(|c| c.class_id == null) {
        bail!(InvalidArgument, "guided evaluation needs a real class, got the null class");
    }
    let n = zs.len();
    let mut inputs: Vec<(&LatentGrid, &ConditionBundle)> = zs.iter().copied().zip(conds).collect();
    if guidance == 1.0 {
        counter.record(n as u64);
        return field.velocity(&inputs);
    }
    let uncond: Vec<ConditionBundle> = conds
        .iter()
        .map(|c| ConditionBundle {
            class_id: null,
            ..c.clone()
        })
        .collect();
    inputs.extend(zs.iter().copied().zip(&uncond));
    counter.record(2 * n as u64);
    let mut v = field.velocity(&inputs)?;
    let v_u = v.split_off(n);
    v.iter()
        .zip(&v_u)
        .map(|(vc, vu)| guide(vc, vu, guidance))
        .collect()
}

fn guide(v_c: &LatentGrid, v_u: &LatentGrid, g: f64) -> Result<LatentGrid> {
    let (h, w, c) = v_c.shape();
    let data = v_c
        .as_slice()
        .iter()
        .zip(v_u.as_slice())
        .map(|(&c, &u)| (u as f64 + g * (c as f64 - u as f64)) as f32)
        .collect();
    LatentGrid::from_vec(h, w, c, data)
}
