//! Rectified-flow training with teacher-forced priors.
//!
//! Each example pairs a ground-truth residual `z0` with Gaussian noise `z1`
//! at a uniform time `t`; the network regresses the straight-line velocity
//! `z1 − z0` from `z_t = t·z1 + (1−t)·z0`. Stage 0 trains the base scale
//! alone; stage 1 trains all scales jointly with summed, weighted losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{bail, MsfError, Result};
use crate::factorize::{extract_priors, extract_residuals, Codec, PriorSet, ResidualPyramid, ScaleSchedule};
use crate::grid::{combine, LatentGrid};
use crate::parallel::Exec;
use crate::velocity::{patchify, ConditionBundle, Scalar, VelocityConfig, VelocityParams};

/// Examples per forward/backward pass. Gradients are reduced over chunks
/// in chunk order, so results do not depend on the execution mode.
const TRAIN_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// 0 trains the base scale alone; 1 trains every scale jointly.
    pub stage: u8,
    /// Examples drawn per step for each scale.
    pub batch_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// Probability of replacing the class with the null token.
    pub cfg_dropout_prob: f64,
    pub steps: usize,
    pub seed: u64,
    pub loss_weights: Vec<f64>,
    /// Permits stage 1 without a stage-0 checkpoint.
    pub joint_from_scratch: bool,
    /// Stop before `steps` once the loss curve plateaus.
    pub stop_on_plateau: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 0,
            batch_sizes: vec![64, 32],
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            cfg_dropout_prob: 0.1,
            steps: 3000,
            seed: 0,
            loss_weights: vec![1.0, 1.0],
            joint_from_scratch: false,
            stop_on_plateau: false,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    /// Scales trained in this stage.
    pub fn active_scales(&self, num_scales: usize) -> std::ops::Range<usize> {
        if self.stage == 0 {
            0..1
        } else {
            0..num_scales
        }
    }

    pub fn validate(&self, num_scales: usize) -> Result<()> {
        if self.stage > 1 {
            bail!(Config, "stage must be 0 or 1, got {}", self.stage);
        }
        if self.steps == 0 {
            bail!(Config, "steps must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            bail!(Config, "learning rate must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout_prob) {
            bail!(Config, "cfg dropout probability must lie in [0, 1]");
        }
        let active = self.active_scales(num_scales).end;
        if self.batch_sizes.len() < active || self.batch_sizes[..active].contains(&0) {
            bail!(Config, "need a positive batch size for each of {active} scales, got {:?}", self.batch_sizes);
        }
        if self.loss_weights.len() < active || self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            bail!(Config, "need a finite non-negative loss weight for each of {active} scales");
        }
        Ok(())
    }
}

/// One teacher-forced training pair at a single scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub scale_index: usize,
    pub z0: LatentGrid,
    pub z1: LatentGrid,
    pub t: f64,
    pub z_t: LatentGrid,
    pub target: LatentGrid,
    pub cond: ConditionBundle,
}

impl TrainingExample {
    /// Builds the interpolant and target; `cond.t` is set to `t`.
    pub fn new(z0: LatentGrid, z1: LatentGrid, t: f64, mut cond: ConditionBundle) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            bail!(InvalidArgument, "time {t} outside [0, 1]");
        }
        let z_t = combine(t, &z1, 1.0 - t, &z0)?;
        let target = combine(1.0, &z1, -1.0, &z0)?;
        cond.t = t;
        Ok(Self {
            scale_index: cond.scale_index,
            z0,
            z1,
            t,
            z_t,
            target,
            cond,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ExampleOptions {
    pub cfg_dropout_prob: f64,
    pub null_class: usize,
}

/// Draws `t ~ U[0, 1)`, `z1 ~ N(0, I)` and (with the configured
/// probability) drops the class to the null token. The prior is the
/// ground-truth accumulated prior, never a model prediction.
pub fn make_example<R: Rng + ?Sized>(
    pyramid: &ResidualPyramid,
    priors: &PriorSet,
    class_id: usize,
    scale_index: usize,
    options: ExampleOptions,
    rng: &mut R,
) -> Result<TrainingExample> {
    if scale_index >= pyramid.residuals().len() {
        bail!(InvalidArgument, "scale {scale_index} out of range");
    }
    if pyramid.schedule() != priors.schedule() {
        bail!(InvalidArgument, "pyramid and priors use different schedules");
    }
    let dropped = rng.random::<f64>() < options.cfg_dropout_prob;
    let t = rng.random::<f64>();
    let z0 = pyramid.residuals()[scale_index].clone();
    let (h, w, c) = z0.shape();
    let z1 = LatentGrid::from_fn(h, w, c, |_, _, _| rng.sample::<f64, _>(StandardNormal) as f32)?;
    let cond = ConditionBundle {
        class_id: if dropped { options.null_class } else { class_id },
        t,
        scale_index,
        prior: priors.prior(scale_index).cloned(),
    };
    TrainingExample::new(z0, z1, t, cond)
}

/// Loss value with gradients kept per scale so each scale's contribution
/// can be inspected.
#[derive(Clone, Debug)]
pub struct LossReport<F = f32> {
    pub loss: f64,
    /// Unweighted mean squared error per scale (`None` when absent).
    pub scale_losses: Vec<Option<f64>>,
    /// Weighted gradient contribution of each scale.
    pub scale_grads: Vec<Option<VelocityParams<F>>>,
}

impl<F: Scalar> LossReport<F> {
    pub fn total_grad(&self) -> Option<VelocityParams<F>> {
        let mut it = self.scale_grads.iter().flatten();
        let mut total = it.next()?.clone();
        for g in it {
            total.add_assign(g);
        }
        Some(total)
    }
}

/// Mean squared velocity error per scale, weighted and summed, with
/// reverse-mode gradients.
pub fn rf_loss<F: Scalar>(
    params: &VelocityParams<F>,
    batch: &[TrainingExample],
    loss_weights: &[f64],
    exec: Exec,
) -> Result<LossReport<F>> {
    if batch.is_empty() {
        bail!(InvalidArgument, "empty batch");
    }
    let cfg = params.config();
    let n_scales = cfg.num_scales();
    let mut scale_losses = vec![None; n_scales];
    let mut scale_grads = vec![None; n_scales];
    let mut loss = 0.0;
    for s in 0..n_scales {
        let group: Vec<&TrainingExample> = batch.iter().filter(|e| e.scale_index == s).collect();
        if group.is_empty() {
            continue;
        }
        let weight = loss_weights.get(s).copied().unwrap_or(1.0);
        let elems = group[0].z0.len();
        let inv = 1.0 / (group.len() * elems) as f64;
        let chunks: Vec<&[&TrainingExample]> = group.chunks(TRAIN_CHUNK).collect();
        let results = exec.map(&chunks, |chunk| chunk_loss_grad(params, chunk, F::of(weight * inv)));
        let mut sse = 0.0;
        let mut grads: Option<VelocityParams<F>> = None;
        for r in results {
            let (chunk_sse, g) = r?;
            sse += chunk_sse;
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
        let mse = sse * inv;
        loss += weight * mse;
        scale_losses[s] = Some(mse);
        scale_grads[s] = grads;
    }
    if scale_losses.iter().all(Option::is_none) {
        bail!(InvalidArgument, "batch has no example at a configured scale");
    }
    Ok(LossReport {
        loss,
        scale_losses,
        scale_grads,
    })
}

/// Sum of squared errors over the chunk and the gradient of
/// `coef · SSE`.
fn chunk_loss_grad<F: Scalar>(
    params: &VelocityParams<F>,
    chunk: &[&TrainingExample],
    coef: F,
) -> Result<(f64, VelocityParams<F>)> {
    let inputs: Vec<_> = chunk.iter().map(|e| (&e.z_t, &e.cond)).collect();
    let packed = params.pack(&inputs)?;
    let (out, cache) = params.forward_packed(&packed);
    let spec = params.config().scales[packed.scale];
    let c = params.config().channels;
    let mut target = Vec::with_capacity(out.len());
    for e in chunk {
        let vals: Vec<F> = e.target.as_slice().iter().map(|&v| F::of(v as f64)).collect();
        patchify(&vals, spec.height, spec.width, spec.patch, c, &mut target);
    }
    let mut sse = 0.0;
    let two = F::of(2.0) * coef;
    let d_out: Vec<F> = out
        .iter()
        .zip(&target)
        .map(|(&o, &y)| {
            let diff = o - y;
            sse += (diff * diff).f64();
            two * diff
        })
        .collect();
    let mut grads = params.zeros_like();
    params.backward(&packed, &cache, &d_out, &mut grads);
    Ok((sse, grads))
}

pub struct Adam {
    config: AdamConfig,
    m: VelocityParams<f32>,
    v: VelocityParams<f32>,
    step: i32,
}

impl Adam {
    pub fn new(params: &VelocityParams<f32>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut VelocityParams<f32>, grads: &VelocityParams<f32>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i] as f64;
                let mi = beta1 * m.data[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * v.data[i] as f64 + (1.0 - beta2) * gi * gi;
                m.data[i] = mi as f32;
                v.data[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                p.data[i] = (p.data[i] as f64 - update) as f32;
            }
        }
    }
}

/// A training item: ground-truth pyramid, its priors, and the class.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub pyramid: ResidualPyramid,
    pub priors: PriorSet,
    pub class_id: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub items: Vec<TrainItem>,
}

impl TrainingSet {
    /// Decomposes every `(image, class)` pair.
    pub fn from_images(images: &[(LatentGrid, usize)], schedule: &ScaleSchedule, codec: Codec) -> Result<Self> {
        let items = images
            .iter()
            .map(|(img, class_id)| {
                let pyramid = extract_residuals(img, None, schedule, codec)?;
                let priors = extract_priors(&pyramid)?;
                Ok(TrainItem {
                    pyramid,
                    priors,
                    class_id: *class_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub enum StartFrom {
    Scratch { config: VelocityConfig, seed: u64 },
    Checkpoint(VelocityParams<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub loss: f64,
    pub scale_losses: Vec<Option<f64>>,
}

pub struct TrainOutcome {
    pub params: VelocityParams<f32>,
    pub curve: Vec<StepLoss>,
    pub plateaued: bool,
}

/// Checks the start condition without doing any work.
pub fn check_start(start: &StartFrom, config: &TrainConfig) -> Result<()> {
    if config.stage == 1 && matches!(start, StartFrom::Scratch { .. }) && !config.joint_from_scratch {
        bail!(
            Config,
            "stage 1 needs a stage-0 checkpoint (or joint_from_scratch = true)"
        );
    }
    Ok(())
}

pub fn train_stage(start: StartFrom, data: &TrainingSet, config: &TrainConfig) -> Result<TrainOutcome> {
    check_start(&start, config)?;
    let mut params = match start {
        StartFrom::Scratch { config, seed } => VelocityParams::init(&config, seed)?,
        StartFrom::Checkpoint(p) => p,
    };
    let num_scales = params.config().num_scales();
    config.validate(num_scales)?;
    if data.is_empty() {
        bail!(InvalidArgument, "empty training set");
    }
    let schedule = params.config().schedule()?;
    if data.items[0].pyramid.schedule() != &schedule {
        bail!(Config, "training data schedule {} does not match the model's {}", data.items[0].pyramid.schedule(), schedule);
    }
    let options = ExampleOptions {
        cfg_dropout_prob: config.cfg_dropout_prob,
        null_class: params.null_class(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&params, config.adam);
    let mut curve = Vec::with_capacity(config.steps);
    let mut plateaued = false;
    for step in 0..config.steps {
        let mut batch = Vec::new();
        for s in config.active_scales(num_scales) {
            for _ in 0..config.batch_sizes[s] {
                let item = &data.items[rng.random_range(0..data.len())];
                batch.push(make_example(&item.pyramid, &item.priors, item.class_id, s, options, &mut rng)?);
            }
        }
        let report = rf_loss(&params, &batch, &config.loss_weights, config.exec)?;
        let scale_losses: Vec<f64> = report.scale_losses.iter().map(|l| l.unwrap_or(0.0)).collect();
        if !report.loss.is_finite() {
            return Err(MsfError::Diverged { step, scale_losses });
        }
        let grads = report.total_grad().expect("non-empty batch");
        adam.step(&mut params, &grads, config.learning_rate);
        if !params.all_finite() {
            return Err(MsfError::Diverged { step, scale_losses });
        }
        curve.push(StepLoss {
            step,
            loss: report.loss,
            scale_losses: report.scale_losses,
        });
        plateaued = has_plateaued(&curve);
        if config.stop_on_plateau && plateaued && curve.len() >= 100 {
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        curve,
        plateaued,
    })
}

/// Relative improvement below 1% across the last 20% of the curve,
/// comparing mean loss over the first and last quarters of that window.
pub fn has_plateaued(curve: &[StepLoss]) -> bool {
    let window = curve.len() / 5;
    if window < 8 {
        return false;
    }
    let tail = &curve[curve.len() - window..];
    let q = window / 4;
    let mean = |s: &[StepLoss]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
    let (early, late) = (mean(&tail[..q]), mean(&tail[window - q..]));
    early <= 0.0 || (early - late) / early < 0.01
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (ResidualPyramid, PriorSet) {
        let s: ScaleSchedule = "4x4,8x8".parse().unwrap();
        let img = LatentGrid::from_fn(8, 8, 1, |r, c, _| (r as f32 - c as f32) * 0.1).unwrap();
        let p = extract_residuals(&img, None, &s, Codec::Identity).unwrap();
        let pr = extract_priors(&p).unwrap();
        (p, pr)
    }

    fn opts() -> ExampleOptions {
        ExampleOptions {
            cfg_dropout_prob: 0.1,
            null_class: 3,
        }
    }

    #[test]
    fn interpolant_endpoints_are_exact() {
        let (p, pr) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = make_example(&p, &pr, 1, 1, opts(), &mut rng).unwrap();
        let at0 = TrainingExample::new(e.z0.clone(), e.z1.clone(), 0.0, e.cond.clone()).unwrap();
        assert_eq!(at0.z_t, at0.z0);
        let at1 = TrainingExample::new(e.z0.clone(), e.z1.clone(), 1.0, e.cond.clone()).unwrap();
        assert_eq!(at1.z_t, at1.z1);
        assert!(TrainingExample::new(e.z0.clone(), e.z1.clone(), 1.5, e.cond).is_err());
    }

    #[test]
    fn examples_are_reproducible_and_teacher_forced() {
        let (p, pr) = toy();
        let a = make_example(&p, &pr, 2, 1, opts(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_example(&p, &pr, 2, 1, opts(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cond.prior.as_ref(), pr.prior(1));
        assert_eq!(a.z0, p.residuals()[1]);
        assert_eq!(a.cond.t, a.t);
        let base = make_example(&p, &pr, 2, 0, opts(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(base.cond.prior.is_none());
        assert!(make_example(&p, &pr, 2, 2, opts(), &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn dropout_frequency() {
        let (p, pr) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dropped = (0..10_000)
            .filter(|_| make_example(&p, &pr, 0, 0, opts(), &mut rng).unwrap().cond.class_id == 3)
            .count();
        let frac = dropped as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&frac), "null fraction {frac}");
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate(2).is_ok());
        c.stage = 2;
        assert!(c.validate(2).is_err());
        let c = TrainConfig {
            stage: 1,
            batch_sizes: vec![4],
            ..TrainConfig::default()
        };
        assert!(c.validate(2).is_err());
        let c = TrainConfig {
            cfg_dropout_prob: 1.5,
            ..TrainConfig::default()
        };
        assert!(c.validate(2).is_err());
    }

    #[test]
    fn plateau_detection() {
        let flat: Vec<StepLoss> = (0..100)
            .map(|step| StepLoss {
                step,
                loss: 1.0,
                scale_losses: vec![],
            })
            .collect();
        assert!(has_plateaued(&flat));
        let falling: Vec<StepLoss> = (0..100)
            .map(|step| StepLoss {
                step,
                loss: 1.0 / (1.0 + step as f64),
                scale_losses: vec![],
            })
            .collect();
        assert!(!has_plateaued(&falling));
        assert!(!has_plateaued(&flat[..10]));
    }
}
