//! Euler integration of the learned ODE per scale and the coarse-to-fine
//! accumulation loop that turns per-scale residuals into a full latent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{bail, Result};
use crate::factorize::{accumulate, Codec, ResidualPyramid, ScaleSchedule};
use crate::grid::{resize, LatentGrid};
use crate::parallel::Exec;
use crate::velocity::{forward_cfg_batch, ConditionBundle, EvalCounter, VelocityField};

/// Samples generated together in one lockstep batch.
const SAMPLE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: Vec<usize>,
    pub guidance: Vec<f64>,
    pub seed: u64,
    pub schedule: ScaleSchedule,
    pub codec: Codec,
    pub exec: Exec,
}

impl SampleConfig {
    /// 100 steps with guidance 1.3 at the base scale; 20 unguided steps at
    /// every later scale.
    pub fn standard(schedule: ScaleSchedule, codec: Codec, seed: u64) -> Self {
        let n = schedule.len();
        let mut steps = vec![20; n];
        let mut guidance = vec![1.0; n];
        steps[0] = 100;
        guidance[0] = 1.3;
        Self {
            steps,
            guidance,
            seed,
            schedule,
            codec,
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.schedule.len();
        if self.steps.len() != n || self.guidance.len() != n {
            bail!(
                Config,
                "{} scales but {} step counts and {} guidance scales",
                n,
                self.steps.len(),
                self.guidance.len()
            );
        }
        if self.steps.contains(&0) {
            bail!(Config, "step counts must be positive");
        }
        if self.guidance.iter().any(|g| !(*g >= 1.0) || !g.is_finite()) {
            bail!(Config, "guidance scales must be finite and >= 1");
        }
        Ok(())
    }

    /// Network evaluations per generated sample.
    pub fn evaluations_per_sample(&self) -> u64 {
        self.steps
            .iter()
            .zip(&self.guidance)
            .map(|(&s, &g)| s as u64 * if g > 1.0 { 2 } else { 1 })
            .sum()
    }
}

/// Independent noise stream for one (sample, scale) pair, so changing the
/// step count at one scale leaves every other scale's noise unchanged.
pub fn noise_rng(seed: u64, sample: usize, scale: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sample as u64) << 16) | scale as u64);
    rng
}

pub fn standard_normal_grid<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize, usize)) -> Result<LatentGrid> {
    let (h, w, c) = shape;
    LatentGrid::from_fn(h, w, c, |_, _, _| rng.sample::<f64, _>(StandardNormal) as f32)
}

/// Integrates from `t = 1` (noise) to `t = 0` with `steps` uniform Euler
/// steps, evaluating the guided field at `t_k = k / steps` for
/// `k = steps, …, 1`.
pub fn euler_solve<V: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    cond: &ConditionBundle,
    shape: (usize, usize, usize),
    steps: usize,
    guidance: f64,
    rng: &mut R,
    counter: &EvalCounter,
) -> Result<LatentGrid> {
    let z1 = standard_normal_grid(rng, shape)?;
    Ok(euler_from(field, std::slice::from_ref(cond), vec![z1], steps, guidance, counter)?.remove(0))
}

/// Lockstep Euler integration of several starting points.
pub fn euler_from<V: VelocityField + ?Sized>(
    field: &V,
    conds: &[ConditionBundle],
    starts: Vec<LatentGrid>,
    steps: usize,
    guidance: f64,
    counter: &EvalCounter,
) -> Result<Vec<LatentGrid>> {
    if steps == 0 {
        bail!(InvalidArgument, "Euler solver needs at least one step");
    }
    if conds.len() != starts.len() {
        bail!(InvalidArgument, "{} conditions for {} starting points", conds.len(), starts.len());
    }
    let shapes: Vec<_> = starts.iter().map(LatentGrid::shape).collect();
    // State is carried in f64; the field sees the f32-rounded state.
    let mut state: Vec<Vec<f64>> = starts
        .iter()
        .map(|g| g.as_slice().iter().map(|&v| v as f64).collect())
        .collect();
    let mut zs = starts;
    let mut conds = conds.to_vec();
    let dt = 1.0 / steps as f64;
    for k in (1..=steps).rev() {
        let t = k as f64 / steps as f64;
        conds.iter_mut().for_each(|c| c.t = t);
        let refs: Vec<&LatentGrid> = zs.iter().collect();
        let v = forward_cfg_batch(field, &refs, &conds, guidance, counter)?;
        for ((s, vi), z) in state.iter_mut().zip(&v).zip(zs.iter_mut()) {
            if vi.shape() != z.shape() {
                bail!(Shape, "field returned {:?} for {:?}", vi.shape(), z.shape());
            }
            for (x, &dv) in s.iter_mut().zip(vi.as_slice()) {
                *x -= dt * dv as f64;
            }
            let (h, w, c) = z.shape();
            *z = LatentGrid::from_vec(h, w, c, s.iter().map(|&x| x as f32).collect())?;
        }
    }
    debug_assert!(zs.iter().zip(&shapes).all(|(z, s)| z.shape() == *s));
    Ok(zs)
}

/// Everything produced while generating one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    pub latent: LatentGrid,
    pub image: LatentGrid,
    pub residuals: Vec<LatentGrid>,
    /// Priors for scales `1..=N`.
    pub priors: Vec<LatentGrid>,
}

/// Coarse-to-fine accumulation for a batch of `n` samples.
///
/// `residual_at(scale, priors)` returns each sample's residual at `scale`;
/// `priors` is `None` for every sample at scale 0 and `Some` afterwards.
/// Returns `(latent, residuals, priors)` per sample.
pub fn accumulate_scales<F>(
    schedule: &ScaleSchedule,
    channels: usize,
    n: usize,
    mut residual_at: F,
) -> Result<Vec<(LatentGrid, Vec<LatentGrid>, Vec<LatentGrid>)>>
where
    F: FnMut(usize, &[Option<LatentGrid>]) -> Result<Vec<LatentGrid>>,
{
    let (h_n, w_n) = schedule.full();
    let mut out: Vec<(LatentGrid, Vec<LatentGrid>, Vec<LatentGrid>)> = (0..n)
        .map(|_| Ok((LatentGrid::zeros(h_n, w_n, channels)?, Vec::new(), Vec::new())))
        .collect::<Result<_>>()?;
    let mut current: Vec<Option<LatentGrid>> = vec![None; n];
    for i in 0..schedule.len() {
        let residuals = residual_at(i, &current)?;
        if residuals.len() != n {
            bail!(Shape, "expected {n} residuals at scale {i}, got {}", residuals.len());
        }
        let (h, w) = schedule.size(i);
        for (j, r) in residuals.into_iter().enumerate() {
            if r.shape() != (h, w, channels) {
                bail!(Shape, "residual at scale {i} is {:?}, expected ({h}, {w}, {channels})", r.shape());
            }
            let (acc, res, pri) = &mut out[j];
            accumulate(acc, &r)?;
            res.push(r);
            if i < schedule.last() {
                let (nh, nw) = schedule.size(i + 1);
                let prior = resize(acc, nh, nw)?;
                pri.push(prior.clone());
                current[j] = Some(prior);
            }
        }
    }
    Ok(out)
}

/// Runs the accumulation loop with the ground-truth residuals in place of
/// model predictions.
pub fn teacher_forced(pyramid: &ResidualPyramid, codec: Codec) -> Result<GenerationTrace> {
    let mut traces = accumulate_scales(pyramid.schedule(), pyramid.channels(), 1, |i, priors| {
        match (i, &priors[0]) {
            (0, Some(_)) => bail!(InvalidArgument, "scale 0 was handed a prior"),
            (i, None) if i > 0 => bail!(InvalidArgument, "scale {i} was sampled without a prior"),
            _ => Ok(vec![pyramid.residuals()[i].clone()]),
        }
    })?;
    let (latent, residuals, priors) = traces.remove(0);
    Ok(GenerationTrace {
        image: codec.decode(&latent)?,
        latent,
        residuals,
        priors,
    })
}

/// Generates one sample of `class_id`. Returns the trace and the number of
/// network evaluations performed.
pub fn generate<V: VelocityField + ?Sized>(
    field: &V,
    class_id: usize,
    config: &SampleConfig,
    channels: usize,
) -> Result<(GenerationTrace, u64)> {
    let (mut traces, evals) = generate_batch(field, &[class_id], config, channels)?;
    Ok((traces.remove(0), evals))
}

/// Generates one sample per entry of `classes`; sample `j` draws its noise
/// from stream `j`. Returns the traces and the total evaluation count.
pub fn generate_batch<V: VelocityField + ?Sized>(
    field: &V,
    classes: &[usize],
    config: &SampleConfig,
    channels: usize,
) -> Result<(Vec<GenerationTrace>, u64)> {
    run_batch(field, classes, config, channels, None)
}

/// Like [`generate_batch`], but takes the residuals of scales below
/// `from_scale` from `previous` instead of sampling them. Because every
/// (sample, scale) pair has its own noise stream, the result is identical
/// to a full run whenever `previous` came from the same seed, classes and
/// settings at those scales.
pub fn generate_batch_from<V: VelocityField + ?Sized>(
    field: &V,
    classes: &[usize],
    config: &SampleConfig,
    channels: usize,
    previous: &[GenerationTrace],
    from_scale: usize,
) -> Result<(Vec<GenerationTrace>, u64)> {
    if previous.len() != classes.len() {
        bail!(InvalidArgument, "{} previous traces for {} classes", previous.len(), classes.len());
    }
    if from_scale > config.schedule.len() || previous.iter().any(|p| p.residuals.len() < from_scale) {
        bail!(InvalidArgument, "previous traces do not cover scales below {from_scale}");
    }
    run_batch(field, classes, config, channels, Some((previous, from_scale)))
}

type Reuse<'a> = Option<(&'a [GenerationTrace], usize)>;

fn run_batch<V: VelocityField + ?Sized>(
    field: &V,
    classes: &[usize],
    config: &SampleConfig,
    channels: usize,
    reuse: Reuse<'_>,
) -> Result<(Vec<GenerationTrace>, u64)> {
    config.validate()?;
    let counter = EvalCounter::new();
    let starts: Vec<usize> = (0..classes.len()).step_by(SAMPLE_CHUNK).collect();
    let chunks = config.exec.map(&starts, |&start| {
        let end = (start + SAMPLE_CHUNK).min(classes.len());
        let reuse = reuse.map(|(p, s)| (&p[start..end], s));
        generate_chunk(field, &classes[start..end], start, config, channels, reuse, &counter)
    });
    let mut traces = Vec::with_capacity(classes.len());
    for chunk in chunks {
        traces.extend(chunk?);
    }
    Ok((traces, counter.get()))
}

fn generate_chunk<V: VelocityField + ?Sized>(
    field: &V,
    classes: &[usize],
    first_sample: usize,
    config: &SampleConfig,
    channels: usize,
    reuse: Reuse<'_>,
    counter: &EvalCounter,
) -> Result<Vec<GenerationTrace>> {
    let schedule = &config.schedule;
    let raw = accumulate_scales(schedule, channels, classes.len(), |i, priors| {
        if let Some((previous, from)) = reuse {
            if i < from {
                return Ok(previous.iter().map(|p| p.residuals[i].clone()).collect());
            }
        }
        let (h, w) = schedule.size(i);
        let mut conds = Vec::with_capacity(classes.len());
        let mut starts = Vec::with_capacity(classes.len());
        for (j, (&class_id, prior)) in classes.iter().zip(priors).enumerate() {
            if (i == 0) != prior.is_none() {
                bail!(InvalidArgument, "prior presence does not match scale {i}");
            }
            let mut rng = noise_rng(config.seed, first_sample + j, i);
            starts.push(standard_normal_grid(&mut rng, (h, w, channels))?);
            conds.push(ConditionBundle {
                class_id,
                t: 1.0,
                scale_index: i,
                prior: prior.clone(),
            });
        }
        euler_from(field, &conds, starts, config.steps[i], config.guidance[i], counter)
    })?;
    raw.into_iter()
        .map(|(latent, residuals, priors)| {
            Ok(GenerationTrace {
                image: config.codec.decode(&latent)?,
                latent,
                residuals,
                priors,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::combine;

    /// `v(z, t) = a·z + b`, counting nothing beyond what the caller does.
    struct Affine {
        a: f64,
        b: f32,
    }

    impl VelocityField for Affine {
        fn null_class(&self) -> usize {
            100
        }

        fn velocity(&self, inputs: &[(&LatentGrid, &ConditionBundle)]) -> Result<Vec<LatentGrid>> {
            inputs
                .iter()
                .map(|(z, _)| {
                    let (h, w, c) = z.shape();
                    combine(self.a, z, 1.0, &LatentGrid::filled(h, w, c, self.b)?)
                })
                .collect()
        }
    }

    fn cond() -> ConditionBundle {
        ConditionBundle {
            class_id: 0,
            t: 1.0,
            scale_index: 0,
            prior: None,
        }
    }

    #[test]
    fn constant_field_is_exact_for_any_step_count() {
        let field = Affine { a: 0.0, b: 0.75 };
        for steps in [1, 3, 10, 100] {
            let counter = EvalCounter::new();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let out = euler_solve(&field, &cond(), (3, 3, 2), steps, 1.0, &mut rng, &counter).unwrap();
            let z1 = standard_normal_grid(&mut ChaCha8Rng::seed_from_u64(4), (3, 3, 2)).unwrap();
            let expected = combine(1.0, &z1, 0.0, &z1).unwrap();
            for (&o, &e) in out.as_slice().iter().zip(expected.as_slice()) {
                assert!((o as f64 - (e as f64 - 0.75)).abs() < 1e-6);
            }
            assert_eq!(counter.get(), steps as u64);
        }
    }

    #[test]
    fn single_step_unrolls() {
        let field = Affine { a: 0.5, b: -0.25 };
        let counter = EvalCounter::new();
        let out = euler_solve(&field, &cond(), (2, 2, 1), 1, 1.0, &mut ChaCha8Rng::seed_from_u64(1), &counter).unwrap();
        let z1 = standard_normal_grid(&mut ChaCha8Rng::seed_from_u64(1), (2, 2, 1)).unwrap();
        for (&o, &z) in out.as_slice().iter().zip(z1.as_slice()) {
            let expected = z as f64 - (0.5 * z as f64 - 0.25);
            assert!((o as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let counter = EvalCounter::new();
        let r = euler_solve(&Affine { a: 0.0, b: 0.0 }, &cond(), (2, 2, 1), 0, 1.0, &mut ChaCha8Rng::seed_from_u64(1), &counter);
        assert!(matches!(r, Err(crate::MsfError::InvalidArgument(_))));
    }

    #[test]
    fn config_validation_and_eval_arithmetic() {
        let s: ScaleSchedule = "4x4,8x8".parse().unwrap();
        let c = SampleConfig::standard(s.clone(), Codec::Identity, 0);
        assert_eq!(c.steps, vec![100, 20]);
        assert_eq!(c.guidance, vec![1.3, 1.0]);
        assert_eq!(c.evaluations_per_sample(), 220);
        assert!(c.validate().is_ok());
        let bad = SampleConfig { steps: vec![10], ..c.clone() };
        assert!(bad.validate().is_err());
        let bad = SampleConfig { guidance: vec![0.5, 1.0], ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noise_streams_are_independent() {
        let a = standard_normal_grid(&mut noise_rng(1, 0, 0), (4, 4, 1)).unwrap();
        let b = standard_normal_grid(&mut noise_rng(1, 0, 1), (4, 4, 1)).unwrap();
        let c = standard_normal_grid(&mut noise_rng(1, 1, 0), (4, 4, 1)).unwrap();
        let a2 = standard_normal_grid(&mut noise_rng(1, 0, 0), (4, 4, 1)).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
