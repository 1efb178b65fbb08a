//! Helpers shared by the integration test binaries.
#![allow(dead_code)]

use msf::training::{make_example, rf_loss, ExampleOptions, TrainingExample};
use msf::{extract_priors, extract_residuals, Codec, Exec, LatentGrid, ScaleSchedule, VelocityConfig, VelocityParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config() -> VelocityConfig {
    let schedule: ScaleSchedule = "4x4,8x8".parse().unwrap();
    VelocityConfig::new(1, 3, &schedule).with_size(16, 1, 2)
}

pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LatentGrid {
    LatentGrid::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap()
}

pub fn batch(seed: u64, config: &VelocityConfig) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = config.schedule().unwrap();
    let (h, w) = schedule.full();
    let opts = ExampleOptions {
        cfg_dropout_prob: 0.3,
        null_class: config.num_classes,
    };
    let mut out = Vec::new();
    for i in 0..6 {
        let img = random_grid(&mut rng, h, w, config.channels);
        let p = extract_residuals(&img, None, &schedule, Codec::Identity).unwrap();
        let pr = extract_priors(&p).unwrap();
        out.push(make_example(&p, &pr, i % 3, i % 2, opts, &mut rng).unwrap());
    }
    out
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖)` per named tensor, comparing the
/// analytic gradient with central differences of the loss.
pub fn gradient_check(params: &VelocityParams<f64>, examples: &[TrainingExample], weights: &[f64]) -> Vec<(String, f64)> {
    let report = rf_loss(params, examples, weights, Exec::Sequential).unwrap();
    let grads = report.total_grad().unwrap();
    let h = 1e-4;
    let mut probe = params.clone();
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let analytic = grads.tensors()[ti].1.data.clone();
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let orig = probe.tensors()[ti].1.data[i];
            probe.tensors_mut()[ti].1.data[i] = orig + h;
            let plus = rf_loss(&probe, examples, weights, Exec::Sequential).unwrap().loss;
            probe.tensors_mut()[ti].1.data[i] = orig - h;
            let minus = rf_loss(&probe, examples, weights, Exec::Sequential).unwrap().loss;
            probe.tensors_mut()[ti].1.data[i] = orig;
            numeric[i] = (plus - minus) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom < 1e-12 { 0.0 } else { diff / denom };
        out.push((name.clone(), rel));
    }
    out
}
