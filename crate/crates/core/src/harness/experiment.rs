//! End-to-end runs: data, both training stages, sampling and scoring, with
//! every artifact written under one directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{bail, Result};
use crate::grid::LatentGrid;
use crate::harness::config::ExperimentConfig;
use crate::harness::cost::{flops_cost, speedup};
use crate::harness::dataset::synth_dataset;
use crate::harness::metrics::{eval_metrics, median_bandwidth, reconstruction_error, MetricsReport};
use crate::sampler::{generate_batch, generate_batch_from, GenerationTrace, SampleConfig};
use crate::training::{check_start, train_stage, StartFrom, StepLoss, TrainOutcome, TrainingSet};
use crate::velocity::{load_checkpoint, save_checkpoint};
use crate::velocity::VelocityParams;

/// `step,loss,scale0,...` rows; inactive scales are left empty.
pub fn write_loss_log(path: &Path, curve: &[StepLoss]) -> Result<()> {
    let scales = curve.first().map_or(0, |s| s.scale_losses.len());
    let mut s = String::from("step,loss");
    for i in 0..scales {
        let _ = write!(s, ",scale{i}");
    }
    s.push('\n');
    for row in curve {
        let _ = write!(s, "{},{:.9e}", row.step, row.loss);
        for l in &row.scale_losses {
            match l {
                Some(v) => {
                    let _ = write!(s, ",{v:.9e}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Where a training stage starts from.
pub enum StageStart {
    Scratch,
    Resume(PathBuf),
    Params(VelocityParams),
}

pub struct StageRun {
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub manifest: PathBuf,
    pub seconds: f64,
}

/// Trains one stage on the configured dataset, writing
/// `stage{n}.msfc`, `loss_stage{n}.csv` and `train_stage{n}.txt` to `out`.
pub fn run_training(
    config: &ExperimentConfig,
    stage: u8,
    start: StageStart,
    data: Option<&TrainingSet>,
    out: &Path,
) -> Result<StageRun> {
    let tc = config.train_config(stage);
    let vc = config.velocity_config();
    let resumed = match &start {
        StageStart::Resume(p) => Some(p.clone()),
        _ => None,
    };
    let start = match start {
        StageStart::Scratch => StartFrom::Scratch {
            config: vc.clone(),
            seed: config.model.init_seed,
        },
        StageStart::Resume(p) => StartFrom::Checkpoint(load_checkpoint(&p, Some(&vc))?),
        StageStart::Params(p) => StartFrom::Checkpoint(p),
    };
    check_start(&start, &tc)?;
    tc.validate(vc.num_scales())?;
    fs::create_dir_all(out)?;

    let owned;
    let data = match data {
        Some(d) => d,
        None => {
            let images = synth_dataset(&config.dataset, config.exec())?;
            owned = TrainingSet::from_images(&images, &config.model.schedule, config.model.codec)?;
            &owned
        }
    };
    let t0 = Instant::now();
    let outcome = train_stage(start, data, &tc)?;
    let seconds = t0.elapsed().as_secs_f64();

    let checkpoint = out.join(format!("stage{stage}.msfc"));
    let loss_log = out.join(format!("loss_stage{stage}.csv"));
    let manifest = out.join(format!("train_stage{stage}.txt"));
    save_checkpoint(&outcome.params, &checkpoint)?;
    write_loss_log(&loss_log, &outcome.curve)?;

    let mut m = config.to_text();
    let _ = writeln!(m, "\n[run]");
    let _ = writeln!(m, "stage = {stage}\ntrain_seed = {}", tc.seed);
    if let Some(p) = resumed {
        let _ = writeln!(m, "resumed_from = {}", p.display());
    }
    let _ = writeln!(m, "steps_run = {}\nplateaued = {}", outcome.curve.len(), outcome.plateaued);
    if let Some(last) = outcome.curve.last() {
        let _ = writeln!(m, "final_loss = {:.9e}", last.loss);
    }
    let _ = writeln!(m, "loss_log = {}\ncheckpoint = {}", loss_log.display(), checkpoint.display());
    let _ = writeln!(m, "wall_seconds = {seconds:.3}");
    fs::write(&manifest, m)?;
    Ok(StageRun {
        outcome,
        checkpoint,
        loss_log,
        manifest,
        seconds,
    })
}

#[derive(Clone, Debug)]
pub struct SampleRun {
    pub config: SampleConfig,
    pub traces: Vec<GenerationTrace>,
    /// Network evaluations actually performed.
    pub evaluations: u64,
    pub metrics: MetricsReport,
    pub seconds: f64,
}

pub struct ExperimentReport {
    pub dir: PathBuf,
    pub stage0_curve: Vec<StepLoss>,
    pub stage1_curve: Vec<StepLoss>,
    pub primary: SampleRun,
    pub compare: Option<SampleRun>,
    pub reconstruction_error: f64,
    pub cost_ratio: f64,
}

impl ExperimentReport {
    /// MMD² of the primary run over that of the comparison run.
    pub fn mmd_ratio(&self) -> Option<f64> {
        self.compare.as_ref().map(|c| self.primary.metrics.mmd2 / c.metrics.mmd2)
    }
}

fn sample_classes(config: &ExperimentConfig) -> Vec<usize> {
    (0..config.dataset.num_classes)
        .flat_map(|k| std::iter::repeat_n(k, config.sample.per_class))
        .collect()
}

fn save_samples(dir: &Path, traces: &[GenerationTrace], classes: &[usize], per_class: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut seen = std::collections::BTreeMap::<usize, usize>::new();
    let mut paths = Vec::new();
    for (t, &k) in traces.iter().zip(classes) {
        let j = seen.entry(k).or_default();
        if *j < per_class {
            let p = dir.join(format!("class{k}_{j:03}.lgrid"));
            t.image.save(&p)?;
            paths.push(p);
        }
        *j += 1;
    }
    Ok(paths)
}

/// Runs the full pipeline into `out`. On failure the manifest records the
/// error before it is returned.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), config.to_text())?;
    let mut log = String::new();
    match run_inner(config, out, &mut log) {
        Ok(report) => {
            let _ = writeln!(log, "\n[status]\nstatus = ok");
            fs::write(out.join("manifest.txt"), log)?;
            Ok(report)
        }
        Err(e) => {
            let _ = writeln!(log, "\n[status]\nstatus = failed\nerror = {e}");
            fs::write(out.join("manifest.txt"), log)?;
            Err(e)
        }
    }
}

fn run_inner(config: &ExperimentConfig, out: &Path, log: &mut String) -> Result<ExperimentReport> {
    config.validate()?;
    let t = &config.train;
    // settle where stage 1 starts before any compute
    let stage1_start = if t.stage0_steps > 0 {
        None
    } else if let Some(p) = &t.stage0_checkpoint {
        if !p.exists() {
            bail!(Config, "stage-0 checkpoint {} does not exist", p.display());
        }
        Some(StageStart::Resume(p.clone()))
    } else if t.joint_from_scratch {
        Some(StageStart::Scratch)
    } else {
        bail!(Config, "stage 0 is skipped but no stage0_checkpoint is given and joint_from_scratch is off");
    };

    let exec = config.exec();
    let _ = writeln!(log, "[artifacts]\nconfig = config.txt");
    let images = synth_dataset(&config.dataset, exec)?;
    let recon = reconstruction_error(&images, &config.model.schedule, config.model.codec)?;
    let data = TrainingSet::from_images(&images, &config.model.schedule, config.model.codec)?;

    let (stage1_start, stage0_curve) = match stage1_start {
        Some(s) => (s, Vec::new()),
        None => {
            let run = run_training(config, 0, StageStart::Scratch, Some(&data), out)?;
            let _ = writeln!(log, "stage0_checkpoint = stage0.msfc\nstage0_loss = loss_stage0.csv\nstage0_manifest = train_stage0.txt");
            let _ = writeln!(log, "stage0_seconds = {:.3}", run.seconds);
            (StageStart::Params(run.outcome.params), run.outcome.curve)
        }
    };
    let run1 = run_training(config, 1, stage1_start, Some(&data), out)?;
    let _ = writeln!(log, "stage1_checkpoint = stage1.msfc\nstage1_loss = loss_stage1.csv\nstage1_manifest = train_stage1.txt");
    let _ = writeln!(log, "stage1_seconds = {:.3}", run1.seconds);
    let params = run1.outcome.params;

    let reference = synth_dataset(&config.reference_spec(), exec)?;
    let bandwidth = match config.sample.bandwidth {
        Some(b) => b,
        None => median_bandwidth(&reference)?,
    };
    let classes = sample_classes(config);
    let channels = config.dataset.channels;
    let score = |traces: &[GenerationTrace]| -> Result<MetricsReport> {
        let pairs: Vec<(LatentGrid, usize)> = traces.iter().map(|t| t.image.clone()).zip(classes.iter().copied()).collect();
        let mut m = eval_metrics(&pairs, &reference, bandwidth, exec)?;
        m.reconstruction_error = Some(recon);
        Ok(m)
    };

    let sc = config.sample_config(&config.sample.steps);
    let t0 = Instant::now();
    let (traces, evaluations) = generate_batch(&params, &classes, &sc, channels)?;
    let seconds = t0.elapsed().as_secs_f64();
    let metrics = score(&traces)?;
    save_samples(&out.join("samples"), &traces, &classes, config.sample.save_per_class)?;
    fs::write(out.join("metrics.txt"), metrics.to_text())?;
    let primary = SampleRun { config: sc, traces, evaluations, metrics, seconds };

    let compare = match &config.sample.compare_steps {
        None => None,
        Some(steps) => {
            let cc = config.sample_config(steps);
            // scales whose settings match reuse the primary run's residuals
            let shared = (0..steps.len())
                .take_while(|&i| steps[i] == primary.config.steps[i])
                .count()
                .min(steps.len() - 1);
            let t0 = Instant::now();
            let (traces, evaluations) = generate_batch_from(&params, &classes, &cc, channels, &primary.traces, shared)?;
            let seconds = t0.elapsed().as_secs_f64();
            let metrics = score(&traces)?;
            save_samples(&out.join("samples_compare"), &traces, &classes, config.sample.save_per_class)?;
            fs::write(out.join("metrics_compare.txt"), metrics.to_text())?;
            Some(SampleRun { config: cc, traces, evaluations, metrics, seconds })
        }
    };

    let cost = config.cost_params()?;
    let cost_ratio = speedup(&cost, &config.cost.baseline, &config.cost.stages)?;

    let _ = writeln!(log, "samples = samples/\nmetrics = metrics.txt");
    if compare.is_some() {
        let _ = writeln!(log, "compare_samples = samples_compare/\ncompare_metrics = metrics_compare.txt");
    }
    let _ = writeln!(log, "\n[sampling]");
    let _ = writeln!(log, "samples = {}", classes.len());
    let _ = writeln!(log, "evaluations_per_sample = {}", primary.config.evaluations_per_sample());
    let _ = writeln!(log, "evaluations = {}\nseconds = {:.3}", primary.evaluations, primary.seconds);
    if let Some(c) = &compare {
        let _ = writeln!(log, "compare_evaluations_per_sample = {}", c.config.evaluations_per_sample());
        let _ = writeln!(log, "compare_evaluations = {}\ncompare_seconds = {:.3}", c.evaluations, c.seconds);
    }
    let _ = writeln!(log, "\n[metrics]");
    let _ = writeln!(log, "max_normalized_mean_error = {:.9e}", primary.metrics.max_normalized_mean_error());
    let _ = writeln!(log, "mmd2 = {:.9e}\nbandwidth = {bandwidth:.9e}", primary.metrics.mmd2);
    let _ = writeln!(log, "reconstruction_error = {recon:.9e}");
    if let Some(c) = &compare {
        let _ = writeln!(log, "compare_mmd2 = {:.9e}", c.metrics.mmd2);
        let _ = writeln!(log, "mmd_ratio = {:.9e}", primary.metrics.mmd2 / c.metrics.mmd2);
    }
    let _ = writeln!(log, "\n[cost]");
    let _ = writeln!(log, "baseline_flops = {}", flops_cost(&cost, &config.cost.baseline)?);
    let _ = writeln!(log, "flops = {}", flops_cost(&cost, &config.cost.stages)?);
    let _ = writeln!(log, "ratio = {cost_ratio:.6}");

    Ok(ExperimentReport {
        dir: out.to_path_buf(),
        stage0_curve,
        stage1_curve: run1.outcome.curve,
        primary,
        compare,
        reconstruction_error: recon,
        cost_ratio,
    })
}
