//! Experiment configuration files: `key = value` lines under `[section]`
//! headers. `#` starts a comment. Unknown sections and keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{bail, MsfError, Result};
use crate::factorize::{Codec, ScaleSchedule};
use crate::harness::cost::{parse_stages, CostModelParams, CostStage};
use crate::harness::dataset::{DatasetSpec, GeneratorKind};
use crate::parallel::Exec;
use crate::sampler::SampleConfig;
use crate::training::{AdamConfig, TrainConfig};
use crate::velocity::VelocityConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub schedule: ScaleSchedule,
    pub codec: Codec,
    /// One patch size per scale.
    pub patches: Vec<usize>,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub stage0_steps: usize,
    pub stage1_steps: usize,
    pub batch_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub cfg_dropout_prob: f64,
    pub seed: u64,
    pub loss_weights: Vec<f64>,
    pub joint_from_scratch: bool,
    pub stop_on_plateau: bool,
    /// Stage-0 weights to start stage 1 from when stage 0 is skipped.
    pub stage0_checkpoint: Option<PathBuf>,
    /// Single-threaded execution for the whole run.
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSection {
    pub per_class: usize,
    pub steps: Vec<usize>,
    pub guidance: Vec<f64>,
    pub seed: u64,
    /// A second step schedule to sample and score against the same reference.
    pub compare_steps: Option<Vec<usize>>,
    /// Seed of the held-out reference set drawn from the dataset generator.
    pub reference_seed: u64,
    pub reference_per_class: usize,
    /// Kernel bandwidth; the median within-class reference distance when absent.
    pub bandwidth: Option<f64>,
    /// Samples per class written out as grid files.
    pub save_per_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostSection {
    pub depth: u64,
    pub width: u64,
    pub baseline: Vec<CostStage>,
    pub stages: Vec<CostStage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub cost: CostSection,
}

impl Default for ExperimentConfig {
    /// The 16×16 checker-frequencies toy run.
    fn default() -> Self {
        let schedule: ScaleSchedule = "8x8,16x16".parse().expect("valid schedule");
        Self {
            dataset: DatasetSpec {
                height: 16,
                width: 16,
                channels: 1,
                num_classes: 8,
                kind: GeneratorKind::CheckerFrequencies,
                samples_per_class: 256,
                noise: 0.1,
                seed: 0,
            },
            model: ModelSection {
                schedule,
                codec: Codec::Identity,
                patches: vec![VelocityConfig::DEFAULT_PATCH; 2],
                hidden: VelocityConfig::DEFAULT_HIDDEN,
                depth: VelocityConfig::DEFAULT_DEPTH,
                heads: VelocityConfig::DEFAULT_HEADS,
                init_seed: 0,
            },
            train: {
                let t = TrainConfig::default();
                TrainSection {
                    stage0_steps: 3000,
                    stage1_steps: 1000,
                    batch_sizes: t.batch_sizes,
                    learning_rate: t.learning_rate,
                    cfg_dropout_prob: t.cfg_dropout_prob,
                    seed: t.seed,
                    loss_weights: t.loss_weights,
                    joint_from_scratch: false,
                    stop_on_plateau: false,
                    stage0_checkpoint: None,
                    deterministic: false,
                }
            },
            sample: SampleSection {
                per_class: 256,
                steps: vec![50, 8],
                guidance: vec![1.3, 1.0],
                seed: 0,
                compare_steps: Some(vec![50, 50]),
                reference_seed: 1,
                reference_per_class: 256,
                bandwidth: None,
                save_per_class: 4,
            },
            cost: CostSection {
                depth: 28,
                width: 1152,
                baseline: parse_stages("1024:100:cfg").expect("valid stages"),
                stages: parse_stages("144:100:cfg,1024:20").expect("valid stages"),
            },
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| MsfError::Config(format!("bad value {v:?} for {key}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| value(key, p.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses a config file body; keys that are absent keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "dataset" | "model" | "train" | "sample" | "cost") {
                    bail!(Config, "line {}: unknown section [{section}]", n + 1);
                }
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "line {}: expected key = value, got {line:?}", n + 1);
            };
            let (k, v) = (k.trim(), v.trim());
            c.set(&section, k, v).map_err(|e| match e {
                MsfError::Config(m) => MsfError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, section: &str, k: &str, v: &str) -> Result<()> {
        let key = format!("{section}.{k}");
        let key = key.as_str();
        let (d, m, t, s, c) = (
            &mut self.dataset,
            &mut self.model,
            &mut self.train,
            &mut self.sample,
            &mut self.cost,
        );
        match key {
            "dataset.kind" => d.kind = v.parse()?,
            "dataset.height" => d.height = value(key, v)?,
            "dataset.width" => d.width = value(key, v)?,
            "dataset.channels" => d.channels = value(key, v)?,
            "dataset.classes" => d.num_classes = value(key, v)?,
            "dataset.samples_per_class" => d.samples_per_class = value(key, v)?,
            "dataset.noise" => d.noise = value(key, v)?,
            "dataset.seed" => d.seed = value(key, v)?,
            "model.schedule" => m.schedule = v.parse()?,
            "model.codec" => m.codec = v.parse()?,
            "model.patch" => m.patches = list(key, v)?,
            "model.hidden" => m.hidden = value(key, v)?,
            "model.depth" => m.depth = value(key, v)?,
            "model.heads" => m.heads = value(key, v)?,
            "model.init_seed" => m.init_seed = value(key, v)?,
            "train.stage0_steps" => t.stage0_steps = value(key, v)?,
            "train.stage1_steps" => t.stage1_steps = value(key, v)?,
            "train.batch" => t.batch_sizes = list(key, v)?,
            "train.lr" => t.learning_rate = value(key, v)?,
            "train.cfg_dropout" => t.cfg_dropout_prob = value(key, v)?,
            "train.seed" => t.seed = value(key, v)?,
            "train.loss_weights" => t.loss_weights = list(key, v)?,
            "train.joint_from_scratch" => t.joint_from_scratch = value(key, v)?,
            "train.stop_on_plateau" => t.stop_on_plateau = value(key, v)?,
            "train.stage0_checkpoint" => t.stage0_checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train.deterministic" => t.deterministic = value(key, v)?,
            "sample.per_class" => s.per_class = value(key, v)?,
            "sample.steps" => s.steps = list(key, v)?,
            "sample.cfg" => s.guidance = list(key, v)?,
            "sample.seed" => s.seed = value(key, v)?,
            "sample.compare_steps" => {
                s.compare_steps = if v.is_empty() || v == "none" { None } else { Some(list(key, v)?) }
            }
            "sample.reference_seed" => s.reference_seed = value(key, v)?,
            "sample.reference_per_class" => s.reference_per_class = value(key, v)?,
            "sample.bandwidth" => {
                s.bandwidth = if v == "auto" { None } else { Some(value(key, v)?) }
            }
            "sample.save_per_class" => s.save_per_class = value(key, v)?,
            "cost.depth" => c.depth = value(key, v)?,
            "cost.width" => c.width = value(key, v)?,
            "cost.baseline" => c.baseline = parse_stages(v)?,
            "cost.stages" => c.stages = parse_stages(v)?,
            _ if section.is_empty() => bail!(Config, "key {k:?} appears before any section"),
            _ => bail!(Config, "unknown key {k:?} in [{section}]"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let n = self.model.schedule.len();
        if (self.dataset.height, self.dataset.width)
            != (self.model.schedule.full().0 * self.model.codec.downsample_ratio(),
                self.model.schedule.full().1 * self.model.codec.downsample_ratio())
        {
            bail!(
                Config,
                "dataset grid {}x{} does not encode to the schedule's final scale {}",
                self.dataset.height,
                self.dataset.width,
                self.model.schedule
            );
        }
        if self.model.patches.len() != n {
            bail!(Config, "need {n} patch sizes, got {}", self.model.patches.len());
        }
        self.velocity_config().validate()?;
        if self.train.stage0_steps > 0 {
            self.train_config(0).validate(n)?;
        }
        self.train_config(1).validate(n)?;
        self.sample_config(&self.sample.steps).validate()?;
        if let Some(steps) = &self.sample.compare_steps {
            self.sample_config(steps).validate()?;
        }
        if self.sample.per_class < 2 || self.sample.reference_per_class < 2 {
            bail!(Config, "metrics need at least two samples and references per class");
        }
        if matches!(self.sample.bandwidth, Some(b) if !(b > 0.0)) {
            bail!(Config, "bandwidth must be positive");
        }
        CostModelParams::transformer(self.cost.depth, self.cost.width)?;
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.train.deterministic {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }

    pub fn velocity_config(&self) -> VelocityConfig {
        VelocityConfig::new(self.dataset.channels, self.dataset.num_classes, &self.model.schedule)
            .with_size(self.model.hidden, self.model.depth, self.model.heads)
            .with_patches(&self.model.patches)
    }

    pub fn train_config(&self, stage: u8) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stage,
            batch_sizes: t.batch_sizes.clone(),
            learning_rate: t.learning_rate,
            adam: AdamConfig::default(),
            cfg_dropout_prob: t.cfg_dropout_prob,
            steps: if stage == 0 { t.stage0_steps } else { t.stage1_steps },
            // stage 1 draws a different example stream from stage 0
            seed: t.seed.wrapping_add(stage as u64),
            loss_weights: t.loss_weights.clone(),
            joint_from_scratch: t.joint_from_scratch,
            stop_on_plateau: t.stop_on_plateau,
            exec: self.exec(),
        }
    }

    pub fn sample_config(&self, steps: &[usize]) -> SampleConfig {
        SampleConfig {
            steps: steps.to_vec(),
            guidance: self.sample.guidance.clone(),
            seed: self.sample.seed,
            schedule: self.model.schedule.clone(),
            codec: self.model.codec,
            exec: self.exec(),
        }
    }

    pub fn reference_spec(&self) -> DatasetSpec {
        DatasetSpec {
            samples_per_class: self.sample.reference_per_class,
            seed: self.sample.reference_seed,
            ..self.dataset.clone()
        }
    }

    pub fn cost_params(&self) -> Result<CostModelParams> {
        CostModelParams::transformer(self.cost.depth, self.cost.width)
    }

    /// A config file body that parses back to `self`.
    pub fn to_text(&self) -> String {
        let (d, m, t, s, c) = (&self.dataset, &self.model, &self.train, &self.sample, &self.cost);
        let mut o = String::new();
        let _ = writeln!(o, "[dataset]");
        let _ = writeln!(o, "kind = {}", d.kind);
        let _ = writeln!(o, "height = {}\nwidth = {}\nchannels = {}", d.height, d.width, d.channels);
        let _ = writeln!(o, "classes = {}\nsamples_per_class = {}", d.num_classes, d.samples_per_class);
        let _ = writeln!(o, "noise = {:?}\nseed = {}", d.noise, d.seed);
        let _ = writeln!(o, "\n[model]");
        let _ = writeln!(o, "schedule = {}\ncodec = {}\npatch = {}", m.schedule, m.codec, join(&m.patches));
        let _ = writeln!(o, "hidden = {}\ndepth = {}\nheads = {}\ninit_seed = {}", m.hidden, m.depth, m.heads, m.init_seed);
        let _ = writeln!(o, "\n[train]");
        let _ = writeln!(o, "stage0_steps = {}\nstage1_steps = {}", t.stage0_steps, t.stage1_steps);
        let _ = writeln!(o, "batch = {}\nlr = {:?}\ncfg_dropout = {:?}", join(&t.batch_sizes), t.learning_rate, t.cfg_dropout_prob);
        let weights: Vec<String> = t.loss_weights.iter().map(|w| format!("{w:?}")).collect();
        let _ = writeln!(o, "seed = {}\nloss_weights = {}", t.seed, weights.join(","));
        let _ = writeln!(o, "joint_from_scratch = {}\nstop_on_plateau = {}", t.joint_from_scratch, t.stop_on_plateau);
        if let Some(p) = &t.stage0_checkpoint {
            let _ = writeln!(o, "stage0_checkpoint = {}", p.display());
        }
        let _ = writeln!(o, "deterministic = {}", t.deterministic);
        let _ = writeln!(o, "\n[sample]");
        let guidance: Vec<String> = s.guidance.iter().map(|g| format!("{g:?}")).collect();
        let _ = writeln!(o, "per_class = {}\nsteps = {}\ncfg = {}\nseed = {}", s.per_class, join(&s.steps), guidance.join(","), s.seed);
        let _ = writeln!(
            o,
            "compare_steps = {}",
            s.compare_steps.as_deref().map(join).unwrap_or_else(|| "none".into())
        );
        let _ = writeln!(o, "reference_seed = {}\nreference_per_class = {}", s.reference_seed, s.reference_per_class);
        let _ = writeln!(o, "bandwidth = {}", s.bandwidth.map(|b| format!("{b:?}")).unwrap_or_else(|| "auto".into()));
        let _ = writeln!(o, "save_per_class = {}", s.save_per_class);
        let _ = writeln!(o, "\n[cost]");
        let _ = writeln!(o, "depth = {}\nwidth = {}\nbaseline = {}\nstages = {}", c.depth, c.width, join(&c.baseline), join(&c.stages));
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_text() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        let mut c2 = c.clone();
        c2.sample.bandwidth = Some(2.5);
        c2.sample.compare_steps = None;
        c2.train.stage0_checkpoint = Some("runs/a/stage0.msfc".into());
        c2.train.learning_rate = 2e-3;
        assert_eq!(ExperimentConfig::parse(&c2.to_text()).unwrap(), c2);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = ExperimentConfig::parse("# toy\n[train]\nstage0_steps = 10 # short\n\n[sample]\nsteps = 5,2\n").unwrap();
        assert_eq!(c.train.stage0_steps, 10);
        assert_eq!(c.sample.steps, vec![5, 2]);
        assert_eq!(c.dataset, ExperimentConfig::default().dataset);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        for text in [
            "[train]\nlearning_rate = 0.1\n",
            "[optim]\nlr = 0.1\n",
            "lr = 0.1\n",
            "[train]\nlr\n",
            "[train]\nlr = fast\n",
            "[model]\npatch = 2\n",
            "[dataset]\nheight = 12\n",
        ] {
            let e = ExperimentConfig::parse(text).unwrap_err();
            assert!(matches!(e, MsfError::Config(_)), "{text:?} gave {e}");
        }
    }
}
