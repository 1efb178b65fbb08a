//! Distribution distances between a sample set and a reference set.

use crate::error::{bail, Result};
use crate::factorize::{extract_residuals, reconstruct, Codec, ScaleSchedule};
use crate::grid::LatentGrid;
use crate::parallel::Exec;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Classes present in both sets, ascending.
    pub classes: Vec<usize>,
    /// Per class: mean over elements of |sample mean − reference mean|.
    pub mean_error: Vec<f64>,
    /// Per class: Frobenius norm of the covariance difference.
    pub cov_error: Vec<f64>,
    /// Unbiased RBF-kernel MMD² over the pooled sets. Can dip slightly
    /// below zero when the distributions match.
    pub mmd2: f64,
    pub bandwidth: f64,
    /// Standard deviation of every reference element, pooled over classes.
    pub reference_std: f64,
    pub reconstruction_error: Option<f64>,
}

impl MetricsReport {
    /// Per-class mean errors divided by the pooled reference deviation.
    pub fn normalized_mean_error(&self) -> Vec<f64> {
        self.mean_error.iter().map(|e| e / self.reference_std).collect()
    }

    pub fn max_normalized_mean_error(&self) -> f64 {
        self.normalized_mean_error().into_iter().fold(0.0, f64::max)
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:.9e}")).collect::<Vec<_>>().join(",");
        s += &format!("classes = {}\n", self.classes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        s += &format!("mean_error = {}\n", list(&self.mean_error));
        s += &format!("normalized_mean_error = {}\n", list(&self.normalized_mean_error()));
        s += &format!("max_normalized_mean_error = {:.9e}\n", self.max_normalized_mean_error());
        s += &format!("cov_error = {}\n", list(&self.cov_error));
        s += &format!("mmd2 = {:.9e}\n", self.mmd2);
        s += &format!("bandwidth = {:.9e}\n", self.bandwidth);
        s += &format!("reference_std = {:.9e}\n", self.reference_std);
        if let Some(r) = self.reconstruction_error {
            s += &format!("reconstruction_error = {r:.9e}\n");
        }
        s
    }
}

/// Sorts by class then by element values, so every statistic below sums in
/// the same order however the caller shuffled the set.
fn canonical(set: &[(LatentGrid, usize)]) -> Vec<(&[f32], usize)> {
    let mut v: Vec<(&[f32], usize)> = set.iter().map(|(g, k)| (g.as_slice(), *k)).collect();
    v.sort_by(|a, b| {
        a.1.cmp(&b.1).then_with(|| {
            a.0.iter()
                .zip(b.0)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    v
}

fn check_sets(samples: &[(LatentGrid, usize)], reference: &[(LatentGrid, usize)]) -> Result<(usize, usize, usize)> {
    if samples.is_empty() || reference.is_empty() {
        bail!(InvalidArgument, "metrics need non-empty sample and reference sets");
    }
    let shape = reference[0].0.shape();
    if let Some((g, _)) = samples.iter().chain(reference).find(|(g, _)| g.shape() != shape) {
        bail!(Shape, "grid {:?} differs from reference shape {shape:?}", g.shape());
    }
    Ok(shape)
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            lanes[l] += d * d;
        }
    }
    let mut s: f64 = lanes.iter().map(|&v| v as f64).sum();
    for (x, y) in ra.iter().zip(rb) {
        s += ((x - y) * (x - y)) as f64;
    }
    s
}

/// Sum of `k(x_i, y_j)` over all pairs, or over `i ≠ j` when `same`.
fn kernel_sum(x: &[&[f32]], y: &[&[f32]], same: bool, gamma: f64, exec: Exec) -> f64 {
    let rows = exec.map_range(x.len(), |i| {
        let mut s = 0.0;
        let start = if same { i + 1 } else { 0 };
        for yj in &y[start..] {
            s += (-gamma * sq_dist(x[i], yj)).exp();
        }
        s
    });
    let total: f64 = rows.iter().sum();
    if same {
        2.0 * total
    } else {
        total
    }
}

/// Unbiased MMD² with kernel `exp(−‖x − y‖² / (2·bandwidth²))`.
pub fn mmd2(x: &[&[f32]], y: &[&[f32]], bandwidth: f64, exec: Exec) -> Result<f64> {
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        bail!(InvalidArgument, "unbiased MMD needs at least two items per set, got {m} and {n}");
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        bail!(InvalidArgument, "kernel bandwidth must be positive, got {bandwidth}");
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let kxx = kernel_sum(x, x, true, gamma, exec) / (m * (m - 1)) as f64;
    let kyy = kernel_sum(y, y, true, gamma, exec) / (n * (n - 1)) as f64;
    let kxy = kernel_sum(x, y, false, gamma, exec) / (m * n) as f64;
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Median distance between reference items of the same class, using at
/// most the first 128 canonical items per class. Pooled pairs would be
/// dominated by the gaps between class templates and leave a kernel too
/// wide to see anything within a class.
pub fn median_bandwidth(reference: &[(LatentGrid, usize)]) -> Result<f64> {
    let set = canonical(reference);
    let mut classes: Vec<usize> = set.iter().map(|(_, k)| *k).collect();
    classes.dedup();
    let mut d = Vec::new();
    for k in classes {
        let members: Vec<&[f32]> = by_class(&set, k).into_iter().take(128).collect();
        for i in 0..members.len() {
            for j in 0..i {
                d.push(sq_dist(members[i], members[j]).sqrt());
            }
        }
    }
    if d.is_empty() {
        bail!(InvalidArgument, "median bandwidth needs two reference items of one class");
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    Ok(if med > 0.0 { med } else { 1.0 })
}

fn by_class<'a>(set: &[(&'a [f32], usize)], k: usize) -> Vec<&'a [f32]> {
    set.iter().filter(|(_, c)| *c == k).map(|(g, _)| *g).collect()
}

fn moments(set: &[&[f32]]) -> (Vec<f64>, Vec<f64>) {
    let n = set.len();
    let dim = set[0].len();
    let mut mean = vec![0.0; dim];
    for x in set {
        for (m, &v) in mean.iter_mut().zip(*x) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for x in set {
        for ((c, &v), m) in centered.iter_mut().zip(*x).zip(&mean) {
            *c = v as f64 - m;
        }
        for (a, &ca) in centered.iter().enumerate() {
            let row = &mut cov[a * dim..(a + 1) * dim];
            for (r, &cb) in row.iter_mut().zip(&centered) {
                *r += ca * cb;
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    (mean, cov)
}

/// Compares class-wise moments and the pooled distribution of `samples`
/// against `reference`. Classes missing from either set are skipped.
pub fn eval_metrics(
    samples: &[(LatentGrid, usize)],
    reference: &[(LatentGrid, usize)],
    bandwidth: f64,
    exec: Exec,
) -> Result<MetricsReport> {
    check_sets(samples, reference)?;
    let (s, r) = (canonical(samples), canonical(reference));
    let mut classes: Vec<usize> = r.iter().map(|(_, k)| *k).filter(|k| s.iter().any(|(_, c)| c == k)).collect();
    classes.dedup();
    if classes.is_empty() {
        bail!(InvalidArgument, "sample and reference sets share no class");
    }
    for &k in &classes {
        let (ns, nr) = (by_class(&s, k).len(), by_class(&r, k).len());
        if ns < 2 || nr < 2 {
            bail!(InvalidArgument, "class {k} has {ns} samples and {nr} references; covariance needs two of each");
        }
    }

    let per_class = exec.map(&classes, |&k| {
        let (ms, cs) = moments(&by_class(&s, k));
        let (mr, cr) = moments(&by_class(&r, k));
        let mean_err = ms.iter().zip(&mr).map(|(a, b)| (a - b).abs()).sum::<f64>() / ms.len() as f64;
        let cov_err = cs.iter().zip(&cr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        (mean_err, cov_err)
    });

    let all_r: Vec<&[f32]> = r.iter().map(|(g, _)| *g).collect();
    let all_s: Vec<&[f32]> = s.iter().map(|(g, _)| *g).collect();
    let count = (all_r.len() * all_r[0].len()) as f64;
    let mean = all_r.iter().flat_map(|g| g.iter()).map(|&v| v as f64).sum::<f64>() / count;
    let var = all_r.iter().flat_map(|g| g.iter()).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / count;

    Ok(MetricsReport {
        classes,
        mean_error: per_class.iter().map(|p| p.0).collect(),
        cov_error: per_class.iter().map(|p| p.1).collect(),
        mmd2: mmd2(&all_s, &all_r, bandwidth, exec)?,
        bandwidth,
        reference_std: var.sqrt(),
        reconstruction_error: None,
    })
}

/// Largest relative L2 error of decompose-then-reconstruct over `images`.
pub fn reconstruction_error(images: &[(LatentGrid, usize)], schedule: &ScaleSchedule, codec: Codec) -> Result<f64> {
    let mut worst = 0.0f64;
    for (img, _) in images {
        let latent = codec.encode(img)?;
        let rec = reconstruct(&extract_residuals(img, None, schedule, codec)?)?;
        worst = worst.max(rec.relative_error(&latent));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(n: usize, offset: f32, seed: u64) -> Vec<(LatentGrid, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let g = LatentGrid::from_fn(4, 4, 1, |_, _, _| offset + rng.random_range(-1.0f32..1.0)).unwrap();
                (g, i % 2)
            })
            .collect()
    }

    #[test]
    fn identical_sets_have_near_zero_mmd() {
        let a = set(200, 0.0, 1);
        let r = eval_metrics(&a, &a, 1.0, Exec::Sequential).unwrap();
        assert!(r.mmd2.abs() < 3.0 / (200f64).sqrt());
        assert!(r.mean_error.iter().chain(&r.cov_error).all(|&e| e == 0.0));
    }

    #[test]
    fn disjoint_constants_reach_the_kernel_limit() {
        let h = 0.5;
        // two 16-element constants whose distance is 10h
        let c = (10.0 * h / 4.0) as f32;
        let a: Vec<_> = (0..6).map(|i| (LatentGrid::filled(4, 4, 1, 0.0).unwrap(), i % 2)).collect();
        let b: Vec<_> = (0..6).map(|i| (LatentGrid::filled(4, 4, 1, c).unwrap(), i % 2)).collect();
        let r = eval_metrics(&a, &b, h, Exec::Sequential).unwrap();
        let expect = 2.0 * (1.0 - (-50f64).exp());
        assert!((r.mmd2 - expect).abs() < 1e-3, "{}", r.mmd2);
    }

    #[test]
    fn permutation_leaves_the_report_unchanged() {
        let (a, b) = (set(60, 0.0, 1), set(50, 0.3, 2));
        let base = eval_metrics(&a, &b, 0.8, Exec::Sequential).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut pa, mut pb) = (a.clone(), b.clone());
        pa.shuffle(&mut rng);
        pb.shuffle(&mut rng);
        assert_eq!(eval_metrics(&pa, &pb, 0.8, Exec::Sequential).unwrap(), base);
        assert_eq!(eval_metrics(&a, &b, 0.8, Exec::Parallel).unwrap(), base);
        assert!(base.mmd2 > 0.0);
        assert!(base.mean_error.iter().chain(&base.cov_error).all(|&e| e >= 0.0));
    }

    #[test]
    fn shifted_means_show_up_in_the_mean_error() {
        let (a, b) = (set(400, 0.0, 1), set(400, 0.5, 2));
        let r = eval_metrics(&a, &b, 1.0, Exec::Sequential).unwrap();
        for e in &r.mean_error {
            assert!((e - 0.5).abs() < 0.1, "{e}");
        }
    }

    #[test]
    fn empty_and_mismatched_sets_are_rejected() {
        let a = set(4, 0.0, 1);
        assert!(eval_metrics(&[], &a, 1.0, Exec::Sequential).is_err());
        assert!(eval_metrics(&a, &[], 1.0, Exec::Sequential).is_err());
        let odd = vec![(LatentGrid::zeros(2, 2, 1).unwrap(), 0); 4];
        assert!(eval_metrics(&a, &odd, 1.0, Exec::Sequential).is_err());
        assert!(eval_metrics(&a, &a, 0.0, Exec::Sequential).is_err());
    }

    fn shifted(g: &LatentGrid, by: f32) -> LatentGrid {
        let (h, w, c) = g.shape();
        LatentGrid::from_vec(h, w, c, g.as_slice().iter().map(|v| v + by).collect()).unwrap()
    }

    #[test]
    fn median_bandwidth_is_positive() {
        let a = set(20, 0.0, 1);
        assert!(median_bandwidth(&a).unwrap() > 0.0);
        assert!(median_bandwidth(&a[..2]).is_err());
        // far-apart classes do not inflate the bandwidth
        let mut b = set(20, 0.0, 2);
        b.iter_mut().filter(|(_, k)| *k == 1).for_each(|(g, _)| {
            *g = shifted(g, 100.0);
        });
        let (wa, wb) = (median_bandwidth(&a).unwrap(), median_bandwidth(&b).unwrap());
        assert!(wb < 2.0 * wa, "{wa} vs {wb}");
    }
}
