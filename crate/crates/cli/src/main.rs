use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use msf::harness::cost::{parse_stages, speedup};
use msf::harness::metrics::median_bandwidth;
use msf::harness::{eval_metrics, flops_cost, run_experiment, run_training, CostModelParams, ExperimentConfig, StageStart};
use msf::sampler::{generate_batch, SampleConfig};
use msf::velocity::load_checkpoint;
use msf::{extract_residuals, reconstruct, Codec, Exec, LatentGrid, ResidualPyramid, ScaleSchedule};

#[derive(Parser)]
#[command(name = "msf", version, about = "Multi-scale residual latent generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a grid into a base latent and per-scale residuals.
    Factorize {
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated scale sizes, e.g. 8x8,16x16.
        #[arg(long)]
        scales: ScaleSchedule,
        #[arg(long, default_value = "identity")]
        codec: Codec,
        /// Genuinely low-resolution version of the input for the base scale.
        #[arg(long)]
        low: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sum a residual pyramid back into a full latent.
    Reconstruct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage on the dataset described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
        stage: u8,
        /// Checkpoint to start from (stage 1 needs one unless the config
        /// sets joint_from_scratch).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate samples of one class from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        class: usize,
        /// Euler steps per scale.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        /// Guidance scale per scale.
        #[arg(long, value_delimiter = ',')]
        cfg: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "identity")]
        codec: Codec,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Run single-threaded.
        #[arg(long)]
        sequential: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two directories of grid files (class read from a `class<k>_`
    /// file name prefix, else 0).
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// RBF bandwidth; the median within-class reference distance if omitted.
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic FLOPs of sampling schedules and their ratio.
    Cost {
        #[arg(long, default_value_t = 28)]
        depth: u64,
        #[arg(long, default_value_t = 1152)]
        width: u64,
        /// Stages as tokens:steps[:cfg], comma-separated.
        #[arg(long, default_value = "1024:100:cfg")]
        baseline: String,
        #[arg(long, default_value = "144:100:cfg,1024:20")]
        stages: String,
    },
    /// Full pipeline: data, both training stages, sampling, metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Factorize { input, scales, codec, low, out } => {
            let image = LatentGrid::load(&input).with_context(|| format!("reading {}", input.display()))?;
            let low = low.map(LatentGrid::load).transpose()?;
            let pyramid = extract_residuals(&image, low.as_ref(), &scales, codec)?;
            pyramid.save(&out)?;
            println!("wrote {} scales to {}", scales.len(), out.display());
        }
        Command::Reconstruct { input, out } => {
            let pyramid = ResidualPyramid::load(&input).with_context(|| format!("reading {}", input.display()))?;
            reconstruct(&pyramid)?.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Train { config, stage, resume, out } => {
            let config = ExperimentConfig::load(&config)?;
            let start = match resume {
                Some(p) => StageStart::Resume(p),
                None => StageStart::Scratch,
            };
            let run = run_training(&config, stage, start, None, &out)?;
            let last = run.outcome.curve.last().map_or(f64::NAN, |s| s.loss);
            println!(
                "stage {stage}: {} steps, final loss {last:.6}, checkpoint {}",
                run.outcome.curve.len(),
                run.checkpoint.display()
            );
        }
        Command::Sample { ckpt, class, steps, cfg, seed, codec, count, sequential, out } => {
            sample(&ckpt, class, steps, cfg, seed, codec, count, sequential, &out)?;
        }
        Command::Eval { samples, reference, bandwidth, out } => {
            let s = load_set(&samples)?;
            let r = load_set(&reference)?;
            let bandwidth = match bandwidth {
                Some(b) => b,
                None => median_bandwidth(&r)?,
            };
            let report = eval_metrics(&s, &r, bandwidth, Exec::default())?;
            let text = report.to_text();
            print!("{text}");
            if let Some(p) = out {
                fs::write(p, text)?;
            }
        }
        Command::Cost { depth, width, baseline, stages } => {
            let cost = CostModelParams::transformer(depth, width)?;
            let (baseline, stages) = (parse_stages(&baseline)?, parse_stages(&stages)?);
            println!("baseline_flops = {}", flops_cost(&cost, &baseline)?);
            println!("flops = {}", flops_cost(&cost, &stages)?);
            println!("ratio = {:.6}", speedup(&cost, &baseline, &stages)?);
        }
        Command::Run { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let report = run_experiment(&config, &out)?;
            println!("max normalized mean error = {:.6}", report.primary.metrics.max_normalized_mean_error());
            println!("mmd2 = {:.6e}", report.primary.metrics.mmd2);
            if let Some(r) = report.mmd_ratio() {
                println!("mmd ratio vs comparison steps = {r:.4}");
            }
            println!("flop ratio = {:.4}", report.cost_ratio);
            println!("artifacts in {}", out.display());
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample(
    ckpt: &Path,
    class: usize,
    steps: Vec<usize>,
    cfg: Vec<f64>,
    seed: u64,
    codec: Codec,
    count: usize,
    sequential: bool,
    out: &Path,
) -> Result<()> {
    if count == 0 {
        bail!("--count must be positive");
    }
    let params = load_checkpoint(ckpt, None)?;
    let vc = params.config().clone();
    if class >= vc.num_classes {
        bail!("class {class} is out of range for a {}-class checkpoint", vc.num_classes);
    }
    let config = SampleConfig {
        steps,
        guidance: cfg,
        seed,
        schedule: vc.schedule()?,
        codec,
        exec: if sequential { Exec::Sequential } else { Exec::default() },
    };
    config.validate()?;
    let t0 = Instant::now();
    let (traces, evaluations) = generate_batch(&params, &vec![class; count], &config, vc.channels)?;
    let wall = t0.elapsed().as_secs_f64();

    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for (j, t) in traces.iter().enumerate() {
        let dir = if count == 1 { out.to_path_buf() } else { out.join(format!("sample{j:03}")) };
        fs::create_dir_all(&dir)?;
        let mut save = |name: String, g: &LatentGrid| -> Result<()> {
            g.save(dir.join(&name))?;
            files.push(dir.join(name).strip_prefix(out).map(Path::to_path_buf).unwrap_or_default());
            Ok(())
        };
        save("latent.lgrid".into(), &t.latent)?;
        save("image.lgrid".into(), &t.image)?;
        for (i, r) in t.residuals.iter().enumerate() {
            save(format!("residual{i}.lgrid"), r)?;
        }
        for (i, p) in t.priors.iter().enumerate() {
            save(format!("prior{}.lgrid", i + 1), p)?;
        }
    }
    let manifest = json!({
        "checkpoint": ckpt.display().to_string(),
        "class": class,
        "count": count,
        "seed": seed,
        "steps": config.steps,
        "guidance": config.guidance,
        "codec": codec.to_string(),
        "evaluations_per_sample": config.evaluations_per_sample(),
        "evaluations": evaluations,
        "wall_seconds": wall,
        "files": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("{count} sample(s), {evaluations} evaluations, {wall:.2}s -> {}", out.display());
    Ok(())
}

/// Every `.lgrid` file directly under `dir`, in name order.
fn load_set(dir: &Path) -> Result<Vec<(LatentGrid, usize)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "lgrid"));
    paths.sort();
    if paths.is_empty() {
        bail!("no .lgrid files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let class = p
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_prefix("class"))
                .and_then(|s| s.split('_').next())
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            Ok((LatentGrid::load(p).with_context(|| format!("reading {}", p.display()))?, class))
        })
        .collect()
}
