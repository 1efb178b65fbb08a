use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::nn::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, silu, silu_grad, softmax_rows,
    Linear, Scalar, Tensor, View,
};
use super::{ConditionBundle, VelocityConfig};
use crate::error::{bail, Result};
use crate::grid::LatentGrid;

/// Number of sinusoid frequencies in the timestep embedding.
pub const TIME_FREQS: usize = 64;
/// Multiplier applied to `t ∈ [0, 1]` before the sinusoids.
const TIME_SCALE: f64 = 1000.0;
const INIT_STD: f64 = 0.02;
const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Block<F> {
    pub(crate) modulation: Linear<F>,
    pub(crate) qkv: Linear<F>,
    pub(crate) proj: Linear<F>,
    pub(crate) fc1: Linear<F>,
    pub(crate) fc2: Linear<F>,
}

/// Trainable parameters of the conditional velocity field.
///
/// One backbone serves every scale. Scales differ only in their segment
/// embedding row, positional table, and (per distinct patch size) the
/// patch embed/unembed layers.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityParams<F = f32> {
    pub(crate) config: VelocityConfig,
    pub(crate) patch_sizes: Vec<usize>,
    pub(crate) class_embed: Tensor<F>,
    pub(crate) segment_embed: Tensor<F>,
    pub(crate) time_in: Linear<F>,
    pub(crate) time_out: Linear<F>,
    pub(crate) patch_in: Vec<Linear<F>>,
    pub(crate) patch_out: Vec<Linear<F>>,
    pub(crate) pos_embed: Vec<Tensor<F>>,
    pub(crate) blocks: Vec<Block<F>>,
    pub(crate) final_mod: Linear<F>,
}

macro_rules! named_tensors {
    ($s:expr) => {{
        let VelocityParams {
            patch_sizes,
            class_embed,
            segment_embed,
            time_in,
            time_out,
            patch_in,
            patch_out,
            pos_embed,
            blocks,
            final_mod,
            ..
        } = $s;
        let mut out = Vec::new();
        out.push(("class_embed".to_string(), class_embed));
        out.push(("segment_embed".to_string(), segment_embed));
        let Linear { weight, bias } = time_in;
        out.push(("time_in.weight".to_string(), weight));
        out.push(("time_in.bias".to_string(), bias));
        let Linear { weight, bias } = time_out;
        out.push(("time_out.weight".to_string(), weight));
        out.push(("time_out.bias".to_string(), bias));
        for (p, l) in patch_sizes.iter().zip(patch_in) {
            let Linear { weight, bias } = l;
            out.push((format!("patch_in.p{p}.weight"), weight));
            out.push((format!("patch_in.p{p}.bias"), bias));
        }
        for (s, t) in pos_embed.into_iter().enumerate() {
            out.push((format!("pos_embed.s{s}"), t));
        }
        for (i, b) in blocks.into_iter().enumerate() {
            let Block {
                modulation,
                qkv,
                proj,
                fc1,
                fc2,
            } = b;
            for (n, l) in [
                ("modulation", modulation),
                ("qkv", qkv),
                ("proj", proj),
                ("fc1", fc1),
                ("fc2", fc2),
            ] {
                let Linear { weight, bias } = l;
                out.push((format!("blocks.{i}.{n}.weight"), weight));
                out.push((format!("blocks.{i}.{n}.bias"), bias));
            }
        }
        let Linear { weight, bias } = final_mod;
        out.push(("final_mod.weight".to_string(), weight));
        out.push(("final_mod.bias".to_string(), bias));
        for (p, l) in patch_sizes.iter().zip(patch_out) {
            let Linear { weight, bias } = l;
            out.push((format!("patch_out.p{p}.weight"), weight));
            out.push((format!("patch_out.p{p}.bias"), bias));
        }
        out
    }};
}

impl<F: Scalar> VelocityParams<F> {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &VelocityConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let c = config.channels;
        let mut patch_sizes: Vec<usize> = config.scales.iter().map(|s| s.patch).collect();
        patch_sizes.sort_unstable();
        patch_sizes.dedup();
        let block = Block {
            modulation: Linear::zeros(d, 6 * d),
            qkv: Linear::zeros(d, 3 * d),
            proj: Linear::zeros(d, d),
            fc1: Linear::zeros(d, MLP_RATIO * d),
            fc2: Linear::zeros(MLP_RATIO * d, d),
        };
        Ok(Self {
            config: config.clone(),
            class_embed: Tensor::zeros(&[config.num_classes + 1, d]),
            segment_embed: Tensor::zeros(&[config.scales.len(), d]),
            time_in: Linear::zeros(2 * TIME_FREQS, d),
            time_out: Linear::zeros(d, d),
            patch_in: patch_sizes
                .iter()
                .map(|p| Linear::zeros(p * p * 2 * c, d))
                .collect(),
            patch_out: patch_sizes.iter().map(|p| Linear::zeros(d, p * p * c)).collect(),
            pos_embed: config
                .scales
                .iter()
                .map(|s| Tensor::zeros(&[s.tokens(), d]))
                .collect(),
            blocks: vec![block; config.depth],
            final_mod: Linear::zeros(d, 2 * d),
            patch_sizes,
        })
    }

    /// Normal(0, 0.02) weights and embeddings, zero biases, and a
    /// zero-initialized output head so the initial field is identically 0.
    pub fn init(config: &VelocityConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (name, t) in params.tensors_mut() {
            if name.ends_with(".bias") || name.starts_with("patch_out.") {
                continue;
            }
            for v in &mut t.data {
                *v = F::of(normal.sample(&mut rng));
            }
        }
        Ok(params)
    }

    /// Redraws the output head from Normal(0, `std`), leaving every other
    /// tensor untouched.
    pub fn randomize_head(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        for (name, t) in self.tensors_mut() {
            if name.starts_with("patch_out.") {
                for v in &mut t.data {
                    *v = F::of(normal.sample(&mut rng));
                }
            }
        }
    }

    pub fn config(&self) -> &VelocityConfig {
        &self.config
    }

    pub fn null_class(&self) -> usize {
        self.config.num_classes
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        named_tensors!(self)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        named_tensors!(self)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = F::zero());
        }
        z
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn cast<G: Scalar>(&self) -> VelocityParams<G> {
        let mut out = VelocityParams::<G>::zeros(&self.config).expect("config already validated");
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    fn patch_index(&self, scale: usize) -> usize {
        let p = self.config.scales[scale].patch;
        self.patch_sizes
            .binary_search(&p)
            .expect("every scale's patch size is registered")
    }

    pub(crate) fn validate_input(&self, z: &LatentGrid, cond: &ConditionBundle) -> Result<()> {
        let cfg = &self.config;
        let s = cond.scale_index;
        if s >= cfg.scales.len() {
            bail!(InvalidArgument, "scale index {s} out of range");
        }
        if cond.class_id > cfg.num_classes {
            bail!(InvalidArgument, "class id {} out of range", cond.class_id);
        }
        if !(0.0..=1.0).contains(&cond.t) {
            bail!(InvalidArgument, "time {} outside [0, 1]", cond.t);
        }
        let expected = (cfg.scales[s].height, cfg.scales[s].width, cfg.channels);
        if z.shape() != expected {
            bail!(Shape, "z_t is {:?}, scale {s} expects {expected:?}", z.shape());
        }
        match (&cond.prior, s) {
            (Some(_), 0) => bail!(InvalidArgument, "scale 0 takes no prior"),
            (None, s) if s > 0 => bail!(InvalidArgument, "scale {s} requires a prior"),
            (Some(p), _) if p.shape() != expected => {
                bail!(Shape, "prior is {:?}, expected {expected:?}", p.shape())
            }
            _ => Ok(()),
        }
    }

    /// Packs inputs (all at one scale) into token rows.
    pub(crate) fn pack(&self, inputs: &[(&LatentGrid, &ConditionBundle)]) -> Result<Packed<F>> {
        let Some(&(_, first)) = inputs.first() else {
            bail!(InvalidArgument, "empty batch");
        };
        let scale = first.scale_index;
        let spec = self.config.scales.get(scale).copied();
        let c = self.config.channels;
        let mut patches = Vec::new();
        let mut times = Vec::with_capacity(inputs.len());
        let mut classes = Vec::with_capacity(inputs.len());
        for &(z, cond) in inputs {
            self.validate_input(z, cond)?;
            if cond.scale_index != scale {
                bail!(InvalidArgument, "mixed scales in one packed batch");
            }
            let spec = spec.expect("validated");
            patchify_pair(z, cond.prior.as_ref(), spec.patch, c, &mut patches);
            times.push(cond.t);
            classes.push(cond.class_id);
        }
        let spec = spec.expect("validated");
        Ok(Packed {
            scale,
            batch: inputs.len(),
            tokens: spec.tokens(),
            patches,
            times,
            classes,
        })
    }

    /// Token-layout output `(batch·tokens) × (patch²·C)` plus the
    /// activations needed by [`Self::backward`].
    pub(crate) fn forward_packed(&self, x: &Packed<F>) -> (Vec<F>, Cache<F>) {
        let d = self.config.hidden;
        let (b, t) = (x.batch, x.tokens);
        let rows = b * t;

        let mut t_feat = Vec::with_capacity(b * 2 * TIME_FREQS);
        for &tv in &x.times {
            t_feat.extend(timestep_features(tv).into_iter().map(F::of));
        }
        let t_pre = self.time_in.forward(&t_feat, b);
        let t_act: Vec<F> = t_pre.iter().map(|&v| silu(v)).collect();
        let mut cond = self.time_out.forward(&t_act, b);
        for (i, row) in cond.chunks_exact_mut(d).enumerate() {
            let cls = self.class_embed.row(x.classes[i]);
            let seg = self.segment_embed.row(x.scale);
            for j in 0..d {
                row[j] += cls[j] + seg[j];
            }
        }
        let cond_act: Vec<F> = cond.iter().map(|&v| silu(v)).collect();

        let pi = self.patch_index(x.scale);
        let mut h = self.patch_in[pi].forward(&x.patches, rows);
        let pos = &self.pos_embed[x.scale].data;
        for row in h.chunks_exact_mut(t * d) {
            for (v, &p) in row.iter_mut().zip(pos) {
                *v += p;
            }
        }

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (next, cache) = self.block_forward(blk, h, &cond_act, b, t);
            h = next;
            blocks.push(cache);
        }

        let final_mods = self.final_mod.forward(&cond_act, b);
        let (xhat_f, rstd_f) = layer_norm(&h, d);
        let mod_f = modulate(&xhat_f, &final_mods, t, d, 2, 0, 1);
        let out = self.patch_out[pi].forward(&mod_f, rows);
        let cache = Cache {
            t_feat,
            t_pre,
            t_act,
            cond,
            cond_act,
            blocks,
            final_mods,
            xhat_f,
            rstd_f,
            mod_f,
        };
        (out, cache)
    }

    fn block_forward(
        &self,
        blk: &Block<F>,
        x: Vec<F>,
        cond_act: &[F],
        b: usize,
        t: usize,
    ) -> (Vec<F>, BlockCache<F>) {
        let d = self.config.hidden;
        let rows = b * t;
        let mods = blk.modulation.forward(cond_act, b);
        let (xhat1, rstd1) = layer_norm(&x, d);
        let m1 = modulate(&xhat1, &mods, t, d, 6, 0, 1);
        let qkv = blk.qkv.forward(&m1, rows);
        let (attn, probs) = attention(&qkv, b, t, d, self.config.heads);
        let a = blk.proj.forward(&attn, rows);
        let mut x2 = x;
        gate_add(&mut x2, &a, &mods, t, d, 6, 2);
        let (xhat2, rstd2) = layer_norm(&x2, d);
        let m2 = modulate(&xhat2, &mods, t, d, 6, 3, 4);
        let u = blk.fc1.forward(&m2, rows);
        let g: Vec<F> = u.iter().map(|&v| gelu(v)).collect();
        let f = blk.fc2.forward(&g, rows);
        let mut x3 = x2;
        gate_add(&mut x3, &f, &mods, t, d, 6, 5);
        let cache = BlockCache {
            mods,
            xhat1,
            rstd1,
            m1,
            qkv,
            probs,
            attn,
            a,
            xhat2,
            rstd2,
            m2,
            u,
            g,
            f,
        };
        (x3, cache)
    }

    /// Accumulates `dL/dθ` into `grads` given `dL/d(output)` in token layout.
    pub(crate) fn backward(&self, x: &Packed<F>, cache: &Cache<F>, d_out: &[F], grads: &mut Self) {
        let d = self.config.hidden;
        let (b, t) = (x.batch, x.tokens);
        let rows = b * t;
        let pi = self.patch_index(x.scale);

        let d_mod_f = self.patch_out[pi]
            .backward(&cache.mod_f, d_out, rows, &mut grads.patch_out[pi], true)
            .expect("requested");
        let mut d_final_mods = vec![F::zero(); b * 2 * d];
        let d_xhat = modulate_backward(
            &cache.xhat_f,
            &cache.final_mods,
            &d_mod_f,
            t,
            d,
            2,
            0,
            1,
            &mut d_final_mods,
        );
        let mut dh = vec![F::zero(); rows * d];
        layer_norm_backward(&cache.xhat_f, &cache.rstd_f, &d_xhat, d, &mut dh);

        let mut d_cond_act = self
            .final_mod
            .backward(&cache.cond_act, &d_final_mods, b, &mut grads.final_mod, true)
            .expect("requested");

        for (i, blk) in self.blocks.iter().enumerate().rev() {
            let d_mods = self.block_backward(blk, &cache.blocks[i], &mut dh, b, t, &mut grads.blocks[i]);
            let dc = blk
                .modulation
                .backward(&cache.cond_act, &d_mods, b, &mut grads.blocks[i].modulation, true)
                .expect("requested");
            for (a, &v) in d_cond_act.iter_mut().zip(&dc) {
                *a += v;
            }
        }

        let d_cond: Vec<F> = d_cond_act
            .iter()
            .zip(&cache.cond)
            .map(|(&g, &c)| g * silu_grad(c))
            .collect();
        for (i, row) in d_cond.chunks_exact(d).enumerate() {
            for (g, &v) in grads.class_embed.row_mut(x.classes[i]).iter_mut().zip(row) {
                *g += v;
            }
            for (g, &v) in grads.segment_embed.row_mut(x.scale).iter_mut().zip(row) {
                *g += v;
            }
        }
        let d_t_act = self
            .time_out
            .backward(&cache.t_act, &d_cond, b, &mut grads.time_out, true)
            .expect("requested");
        let d_t_pre: Vec<F> = d_t_act
            .iter()
            .zip(&cache.t_pre)
            .map(|(&g, &p)| g * silu_grad(p))
            .collect();
        self.time_in
            .backward(&cache.t_feat, &d_t_pre, b, &mut grads.time_in, false);

        let gpos = &mut grads.pos_embed[x.scale].data;
        for row in dh.chunks_exact(t * d) {
            for (g, &v) in gpos.iter_mut().zip(row) {
                *g += v;
            }
        }
        self.patch_in[pi].backward(&x.patches, &dh, rows, &mut grads.patch_in[pi], false);
    }

    /// Back-propagates through one block, replacing `dx` (gradient at the
    /// block output) with the gradient at its input. Returns the gradient
    /// of the modulation vectors.
    fn block_backward(
        &self,
        blk: &Block<F>,
        c: &BlockCache<F>,
        dx: &mut Vec<F>,
        b: usize,
        t: usize,
        g: &mut Block<F>,
    ) -> Vec<F> {
        let d = self.config.hidden;
        let rows = b * t;
        let mut d_mods = vec![F::zero(); b * 6 * d];

        // x3 = x2 + gate2 ⊙ f
        let d_f = gate_backward(dx, &c.f, &c.mods, t, d, 6, 5, &mut d_mods);
        let d_g = blk.fc2.backward(&c.g, &d_f, rows, &mut g.fc2, true).expect("requested");
        let d_u: Vec<F> = d_g
            .iter()
            .zip(&c.u)
            .map(|(&dg, &u)| dg * gelu_grad(u))
            .collect();
        let d_m2 = blk.fc1.backward(&c.m2, &d_u, rows, &mut g.fc1, true).expect("requested");
        let d_xhat2 = modulate_backward(&c.xhat2, &c.mods, &d_m2, t, d, 6, 3, 4, &mut d_mods);
        layer_norm_backward(&c.xhat2, &c.rstd2, &d_xhat2, d, dx);

        // x2 = x + gate1 ⊙ a
        let d_a = gate_backward(dx, &c.a, &c.mods, t, d, 6, 2, &mut d_mods);
        let d_attn = blk.proj.backward(&c.attn, &d_a, rows, &mut g.proj, true).expect("requested");
        let d_qkv = attention_backward(&c.qkv, &c.probs, &d_attn, b, t, d, self.config.heads);
        let d_m1 = blk.qkv.backward(&c.m1, &d_qkv, rows, &mut g.qkv, true).expect("requested");
        let d_xhat1 = modulate_backward(&c.xhat1, &c.mods, &d_m1, t, d, 6, 0, 1, &mut d_mods);
        layer_norm_backward(&c.xhat1, &c.rstd1, &d_xhat1, d, dx);
        d_mods
    }
}

/// Inputs for one scale, packed into token rows.
pub(crate) struct Packed<F> {
    pub(crate) scale: usize,
    pub(crate) batch: usize,
    pub(crate) tokens: usize,
    pub(crate) patches: Vec<F>,
    pub(crate) times: Vec<f64>,
    pub(crate) classes: Vec<usize>,
}

pub(crate) struct Cache<F> {
    t_feat: Vec<F>,
    t_pre: Vec<F>,
    t_act: Vec<F>,
    cond: Vec<F>,
    cond_act: Vec<F>,
    blocks: Vec<BlockCache<F>>,
    final_mods: Vec<F>,
    xhat_f: Vec<F>,
    rstd_f: Vec<F>,
    mod_f: Vec<F>,
}

struct BlockCache<F> {
    mods: Vec<F>,
    xhat1: Vec<F>,
    rstd1: Vec<F>,
    m1: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    attn: Vec<F>,
    a: Vec<F>,
    xhat2: Vec<F>,
    rstd2: Vec<F>,
    m2: Vec<F>,
    u: Vec<F>,
    g: Vec<F>,
    f: Vec<F>,
}

pub(crate) fn timestep_features(t: f64) -> [f64; 2 * TIME_FREQS] {
    let mut out = [0.0; 2 * TIME_FREQS];
    for k in 0..TIME_FREQS {
        let freq = (-(10_000f64.ln()) * k as f64 / TIME_FREQS as f64).exp();
        let arg = TIME_SCALE * t * freq;
        out[k] = arg.cos();
        out[TIME_FREQS + k] = arg.sin();
    }
    out
}

/// `xhat ⊙ (1 + scale) + shift`, with per-example modulation rows of
/// `chunks · d` values.
fn modulate<F: Scalar>(
    xhat: &[F],
    mods: &[F],
    tokens: usize,
    d: usize,
    chunks: usize,
    shift: usize,
    scale: usize,
) -> Vec<F> {
    let mut out = Vec::with_capacity(xhat.len());
    for (r, row) in xhat.chunks_exact(d).enumerate() {
        let m = &mods[(r / tokens) * chunks * d..];
        let (sh, sc) = (&m[shift * d..(shift + 1) * d], &m[scale * d..(scale + 1) * d]);
        for j in 0..d {
            out.push(row[j] * (F::one() + sc[j]) + sh[j]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn modulate_backward<F: Scalar>(
    xhat: &[F],
    mods: &[F],
    d_out: &[F],
    tokens: usize,
    d: usize,
    chunks: usize,
    shift: usize,
    scale: usize,
    d_mods: &mut [F],
) -> Vec<F> {
    let mut d_xhat = Vec::with_capacity(xhat.len());
    for (r, (row, g)) in xhat.chunks_exact(d).zip(d_out.chunks_exact(d)).enumerate() {
        let base = (r / tokens) * chunks * d;
        for j in 0..d {
            d_xhat.push(g[j] * (F::one() + mods[base + scale * d + j]));
            d_mods[base + scale * d + j] += g[j] * row[j];
            d_mods[base + shift * d + j] += g[j];
        }
    }
    d_xhat
}

/// `x ← x + gate ⊙ y`.
fn gate_add<F: Scalar>(x: &mut [F], y: &[F], mods: &[F], tokens: usize, d: usize, chunks: usize, gate: usize) {
    for (r, (xr, yr)) in x.chunks_exact_mut(d).zip(y.chunks_exact(d)).enumerate() {
        let gv = &mods[(r / tokens) * chunks * d + gate * d..];
        for j in 0..d {
            xr[j] += gv[j] * yr[j];
        }
    }
}

/// Returns `dL/dy` of [`gate_add`] and accumulates the gate gradient.
#[allow(clippy::too_many_arguments)]
fn gate_backward<F: Scalar>(
    d_x: &[F],
    y: &[F],
    mods: &[F],
    tokens: usize,
    d: usize,
    chunks: usize,
    gate: usize,
    d_mods: &mut [F],
) -> Vec<F> {
    let mut d_y = Vec::with_capacity(y.len());
    for (r, (g, yr)) in d_x.chunks_exact(d).zip(y.chunks_exact(d)).enumerate() {
        let base = (r / tokens) * chunks * d + gate * d;
        for j in 0..d {
            d_y.push(g[j] * mods[base + j]);
            d_mods[base + j] += g[j] * yr[j];
        }
    }
    d_y
}

/// Multi-head self-attention over each example's tokens. `qkv` rows hold
/// `[q | k | v]`, each `d` wide. Returns the concatenated head outputs and
/// the attention probabilities.
fn attention<F: Scalar>(qkv: &[F], b: usize, t: usize, d: usize, heads: usize) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![F::zero(); b * t * d];
    let mut probs = vec![F::zero(); b * heads * t * t];
    for e in 0..b {
        for h in 0..heads {
            let base = e * t * 3 * d + h * dh;
            let q = View::strided(&qkv[base..], t, dh, 3 * d, 1);
            let k = View::strided(&qkv[base + d..], t, dh, 3 * d, 1);
            let v = View::strided(&qkv[base + 2 * d..], t, dh, 3 * d, 1);
            let p = &mut probs[(e * heads + h) * t * t..(e * heads + h + 1) * t * t];
            gemm(q, k.t(), p, t, F::zero());
            p.iter_mut().for_each(|s| *s *= scale);
            softmax_rows(p, t);
            gemm(View::new(p, t, t), v, &mut out[e * t * d + h * dh..], d, F::zero());
        }
    }
    (out, probs)
}

fn attention_backward<F: Scalar>(
    qkv: &[F],
    probs: &[F],
    d_out: &[F],
    b: usize,
    t: usize,
    d: usize,
    heads: usize,
) -> Vec<F> {
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut d_qkv = vec![F::zero(); b * t * 3 * d];
    let mut d_p = vec![F::zero(); t * t];
    for e in 0..b {
        for h in 0..heads {
            let base = e * t * 3 * d + h * dh;
            let p = View::new(&probs[(e * heads + h) * t * t..(e * heads + h + 1) * t * t], t, t);
            let d_o = View::strided(&d_out[e * t * d + h * dh..], t, dh, d, 1);
            let q = View::strided(&qkv[base..], t, dh, 3 * d, 1);
            let k = View::strided(&qkv[base + d..], t, dh, 3 * d, 1);
            let v = View::strided(&qkv[base + 2 * d..], t, dh, 3 * d, 1);

            gemm(p.t(), d_o, &mut d_qkv[base + 2 * d..], 3 * d, F::zero());
            gemm(d_o, v.t(), &mut d_p, t, F::zero());
            let pr = &probs[(e * heads + h) * t * t..(e * heads + h + 1) * t * t];
            for (dp_row, p_row) in d_p.chunks_exact_mut(t).zip(pr.chunks_exact(t)) {
                let dot = dp_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum::<F>();
                for (dp, &pv) in dp_row.iter_mut().zip(p_row) {
                    *dp = pv * (*dp - dot) * scale;
                }
            }
            let d_s = View::new(&d_p, t, t);
            gemm(d_s, k, &mut d_qkv[base..], 3 * d, F::zero());
            gemm(d_s.t(), q, &mut d_qkv[base + d..], 3 * d, F::zero());
        }
    }
    d_qkv
}

/// Appends the patch tokens of `[z | prior]` (prior zero when absent).
/// Token elements are ordered `(dy, dx, channel)`.
pub(crate) fn patchify_pair<F: Scalar>(
    z: &LatentGrid,
    prior: Option<&LatentGrid>,
    p: usize,
    c: usize,
    out: &mut Vec<F>,
) {
    let (h, w, _) = z.shape();
    for ty in 0..h / p {
        for tx in 0..w / p {
            for dy in 0..p {
                for dx in 0..p {
                    let (r, col) = (ty * p + dy, tx * p + dx);
                    for ch in 0..c {
                        out.push(F::of(z.get(r, col, ch) as f64));
                    }
                    for ch in 0..c {
                        out.push(prior.map_or(F::zero(), |g| F::of(g.get(r, col, ch) as f64)));
                    }
                }
            }
        }
    }
}

/// Maps one example's grid-layout values (`h × w × c`) to token layout.
pub(crate) fn patchify<F: Copy>(grid: &[F], h: usize, w: usize, p: usize, c: usize, out: &mut Vec<F>) {
    for ty in 0..h / p {
        for tx in 0..w / p {
            for dy in 0..p {
                for dx in 0..p {
                    let base = ((ty * p + dy) * w + tx * p + dx) * c;
                    out.extend_from_slice(&grid[base..base + c]);
                }
            }
        }
    }
}

/// Inverse of [`patchify`] for one example.
pub(crate) fn unpatchify<F: Copy + Default>(tokens: &[F], h: usize, w: usize, p: usize, c: usize) -> Vec<F> {
    let mut grid = vec![F::default(); h * w * c];
    let mut it = tokens.chunks_exact(c);
    for ty in 0..h / p {
        for tx in 0..w / p {
            for dy in 0..p {
                for dx in 0..p {
                    let base = ((ty * p + dy) * w + tx * p + dx) * c;
                    grid[base..base + c].copy_from_slice(it.next().expect("token count matches"));
                }
            }
        }
    }
    grid
}
