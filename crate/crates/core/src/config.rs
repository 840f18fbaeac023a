//! Run configuration: a flat, typed key-value text format with section
//! prefixes (`schedule.T=1000`). Flags mirror config keys; environment
//! variables override only paths and the seed.

use std::path::{Path, PathBuf};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::hspace::{
    build_gamma_schedule, BlendKind, FeatureMask, GammaScheduleKind, GammaSpec, InjectionConfig,
    StandardizeMode,
};
use crate::schedule::{make_schedule, NoiseSchedule, ScheduleKind, TimestepPlan};
use crate::toyset::{Shape, ToyConfig};

/// Labeled sub-seed derivation (splitmix64); every random stream in a run is
/// derived from the single config seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Fixed stream labels for [`derive_seed`].
pub mod streams {
    /// Training dataset generation.
    pub const TRAIN_SET: u64 = 0;
    /// Training loop (batch sampling, noise draws).
    pub const TRAIN: u64 = 1;
    /// Injection-run rng (quality boosting noise).
    pub const RUN: u64 = 2;
    /// Diagnostics sample set.
    pub const DIAGNOSE_SET: u64 = 3;
    /// Evaluation pool backing `toyset:N` references and benchmark pairs.
    pub const EVAL_SET: u64 = 4;
    /// Base for per-run sweep sub-seeds; run `i` uses `SWEEP_BASE + i`.
    pub const SWEEP_BASE: u64 = 100;
}

#[derive(Debug, Clone)]
pub struct ScheduleBlock {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
    pub eta: f64,
    pub inference_steps: usize,
}

#[derive(Debug, Clone)]
pub struct InjectionBlock {
    pub gamma: f64,
    /// Optional `kind:total` schedule; overrides the constant gamma.
    pub gamma_schedule: Option<(GammaScheduleKind, f64)>,
    pub omega: f64,
    /// Absolute editing threshold; defaults to 0.4 T when unset.
    pub t_edit: Option<usize>,
    /// Absolute boosting threshold; defaults to 0.2 T when unset.
    pub t_boost: Option<usize>,
    pub mask_path: Option<PathBuf>,
    pub blend_kind: BlendKind,
    pub standardize: StandardizeMode,
    pub boost: bool,
    pub boost_sigma_squared: bool,
}

#[derive(Debug, Clone)]
pub struct TrainBlock {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct ToyBlock {
    pub count: usize,
    pub pairs: usize,
    pub fixed_shape: Option<Shape>,
    pub min_contrast: f64,
}

#[derive(Debug, Clone)]
pub struct PathsBlock {
    pub checkpoint: PathBuf,
    pub dataset: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RunBlock {
    /// Informational: the command a manifest was written by.
    pub command: Option<String>,
    pub input: Option<String>,
    pub original: Option<String>,
    pub content: Option<String>,
    pub diagnose_samples: usize,
    pub sweep_gamma: Vec<f64>,
    pub sweep_omega: Vec<f64>,
    /// Write the per-step trace CSV during inject.
    pub trace: bool,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleBlock,
    pub denoiser: DenoiserConfig,
    pub injection: InjectionBlock,
    pub train: TrainBlock,
    pub toyset: ToyBlock,
    pub paths: PathsBlock,
    pub run: RunBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            schedule: ScheduleBlock {
                t_max: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
                kind: ScheduleKind::Linear,
                eta: 0.0,
                inference_steps: 50,
            },
            denoiser: DenoiserConfig::default(),
            injection: InjectionBlock {
                gamma: 0.6,
                gamma_schedule: None,
                omega: 0.3,
                t_edit: None,
                t_boost: None,
                mask_path: None,
                blend_kind: BlendKind::Slerp,
                standardize: StandardizeMode::StdMatch,
                boost: true,
                boost_sigma_squared: false,
            },
            train: TrainBlock { steps: 3000, batch_size: 8, lr: 2e-4 },
            toyset: ToyBlock { count: 256, pairs: 32, fixed_shape: None, min_contrast: 0.4 },
            paths: PathsBlock {
                checkpoint: PathBuf::from("out/model.ckpt"),
                dataset: None,
                output: PathBuf::from("out"),
            },
            run: RunBlock {
                command: None,
                input: None,
                original: None,
                content: None,
                diagnose_samples: 64,
                sweep_gamma: Vec::new(),
                sweep_omega: Vec::new(),
                trace: false,
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num::<f64>(key, s.trim()))
        .collect()
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "schedule.T" => self.schedule.t_max = parse_num(key, v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse_num(key, v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse_num(key, v)?,
            "schedule.kind" => {
                self.schedule.kind = match v {
                    "linear" => ScheduleKind::Linear,
                    other => return Err(Error::Config(format!("schedule.kind: unknown kind {other}"))),
                }
            }
            "schedule.eta" => self.schedule.eta = parse_num(key, v)?,
            "schedule.inference_steps" => self.schedule.inference_steps = parse_num(key, v)?,
            "denoiser.resolution" => self.denoiser.resolution = parse_num(key, v)?,
            "denoiser.in_channels" => self.denoiser.in_channels = parse_num(key, v)?,
            "denoiser.widths" => {
                self.denoiser.widths = v
                    .split(',')
                    .map(|s| parse_num::<usize>(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "denoiser.bottleneck_channels" => self.denoiser.bottleneck_channels = parse_num(key, v)?,
            "denoiser.emb_dim" => self.denoiser.emb_dim = parse_num(key, v)?,
            "denoiser.groups" => self.denoiser.groups = parse_num(key, v)?,
            "injection.gamma" => self.injection.gamma = parse_num(key, v)?,
            "injection.gamma_schedule" => {
                if v.is_empty() {
                    self.injection.gamma_schedule = None;
                } else {
                    let (kind, total) = v.split_once(':').ok_or_else(|| {
                        Error::Config(format!("{key}: expected kind:total, got {v:?}"))
                    })?;
                    self.injection.gamma_schedule =
                        Some((GammaScheduleKind::parse(kind)?, parse_num(key, total)?));
                }
            }
            "injection.omega" => self.injection.omega = parse_num(key, v)?,
            "injection.t_edit" => {
                self.injection.t_edit = if v.is_empty() { None } else { Some(parse_num(key, v)?) }
            }
            "injection.t_boost" => {
                self.injection.t_boost = if v.is_empty() { None } else { Some(parse_num(key, v)?) }
            }
            "injection.mask_path" => {
                self.injection.mask_path = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            "injection.blend_kind" => self.injection.blend_kind = BlendKind::parse(v)?,
            "injection.standardize" => self.injection.standardize = StandardizeMode::parse(v)?,
            "injection.boost" => self.injection.boost = parse_bool(key, v)?,
            "injection.boost_sigma_squared" => {
                self.injection.boost_sigma_squared = parse_bool(key, v)?
            }
            "train.steps" => self.train.steps = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.lr" => self.train.lr = parse_num(key, v)?,
            "toyset.count" => self.toyset.count = parse_num(key, v)?,
            "toyset.pairs" => self.toyset.pairs = parse_num(key, v)?,
            "toyset.fixed_shape" => {
                self.toyset.fixed_shape = if v.is_empty() { None } else { Some(Shape::parse(v)?) }
            }
            "toyset.min_contrast" => self.toyset.min_contrast = parse_num(key, v)?,
            "paths.checkpoint" => self.paths.checkpoint = PathBuf::from(v),
            "paths.dataset" => {
                self.paths.dataset = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            "paths.output" => self.paths.output = PathBuf::from(v),
            "run.command" => {
                self.run.command = if v.is_empty() { None } else { Some(v.to_string()) }
            }
            "run.input" => self.run.input = if v.is_empty() { None } else { Some(v.to_string()) },
            "run.original" => {
                self.run.original = if v.is_empty() { None } else { Some(v.to_string()) }
            }
            "run.content" => {
                self.run.content = if v.is_empty() { None } else { Some(v.to_string()) }
            }
            "run.diagnose_samples" => self.run.diagnose_samples = parse_num(key, v)?,
            "run.sweep_gamma" => self.run.sweep_gamma = parse_list(key, v)?,
            "run.sweep_omega" => self.run.sweep_omega = parse_list(key, v)?,
            "run.trace" => self.run.trace = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Parses a config file of `key=value` lines with `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Environment overrides; only paths and the seed are honored.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("HINJECT_SEED") {
            self.set("seed", &v)?;
        }
        if let Ok(v) = std::env::var("HINJECT_CHECKPOINT") {
            self.set("paths.checkpoint", &v)?;
        }
        if let Ok(v) = std::env::var("HINJECT_DATASET") {
            self.set("paths.dataset", &v)?;
        }
        if let Ok(v) = std::env::var("HINJECT_OUTPUT") {
            self.set("paths.output", &v)?;
        }
        Ok(())
    }

    pub fn t_edit(&self) -> usize {
        self.injection.t_edit.unwrap_or(2 * self.schedule.t_max / 5)
    }

    pub fn t_boost(&self) -> usize {
        self.injection.t_boost.unwrap_or(self.schedule.t_max / 5)
    }

    /// Cross-field validation, run before any compute.
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if !(0.0..=1.0).contains(&self.injection.gamma) {
            return Err(Error::Config(format!(
                "injection.gamma must be in [0,1], got {}",
                self.injection.gamma
            )));
        }
        let (t_edit, t_boost) = (self.t_edit(), self.t_boost());
        if !(t_boost < t_edit && t_edit <= self.schedule.t_max) {
            return Err(Error::Config(format!(
                "need injection.t_boost < injection.t_edit <= schedule.T, got {t_boost}, {t_edit}, {}",
                self.schedule.t_max
            )));
        }
        if self.schedule.inference_steps < 1 || self.schedule.inference_steps > self.schedule.t_max {
            return Err(Error::Config(format!(
                "schedule.inference_steps must be in [1, T], got {}",
                self.schedule.inference_steps
            )));
        }
        if let Some(p) = &self.injection.mask_path {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "injection.mask_path {} does not exist",
                    p.display()
                )));
            }
        }
        if self.toyset.count < 1 {
            return Err(Error::Config("toyset.count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(
            self.schedule.t_max,
            self.schedule.beta_start,
            self.schedule.beta_end,
            self.schedule.kind,
        )?
        .with_eta(self.schedule.eta)
    }

    pub fn build_plan(&self) -> Result<TimestepPlan> {
        TimestepPlan::respaced(
            self.schedule.t_max,
            self.schedule.inference_steps,
            self.t_edit(),
            self.t_boost(),
        )
    }

    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            resolution: self.denoiser.resolution,
            fixed_shape: self.toyset.fixed_shape,
            min_luma_contrast: self.toyset.min_contrast,
            supersample: 4,
        }
    }

    /// Builds the injection configuration, loading the mask and building the
    /// gamma schedule for `n_inject` steps when configured.
    pub fn build_injection(&self, n_inject: usize) -> Result<InjectionConfig> {
        let side = self.denoiser.bottleneck_side();
        let mask = match &self.injection.mask_path {
            Some(p) => {
                let m = FeatureMask::load(p)?;
                if m.shape() != (side, side) {
                    return Err(Error::Config(format!(
                        "injection.mask_path: mask is {:?}, bottleneck grid is {side}x{side}",
                        m.shape()
                    )));
                }
                m
            }
            None => FeatureMask::full(side, side),
        };
        let gamma = match self.injection.gamma_schedule {
            Some((kind, total)) => GammaSpec::Schedule(build_gamma_schedule(kind, total, n_inject)?),
            None => GammaSpec::Constant(self.injection.gamma),
        };
        let cfg = InjectionConfig {
            gamma,
            omega: self.injection.omega,
            t_edit: self.t_edit(),
            t_boost: self.t_boost(),
            mask,
            blend_kind: self.injection.blend_kind,
            standardize: self.injection.standardize,
            boost: self.injection.boost,
            boost_sigma_squared: self.injection.boost_sigma_squared,
        };
        cfg.validate(self.schedule.t_max)?;
        Ok(cfg)
    }

    /// Serializes every key in a fixed order; parsing this text reproduces
    /// the configuration exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let widths = self
            .denoiser
            .widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let opt_str = |p: &Option<String>| p.clone().unwrap_or_default();
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("schedule.T={}\n", self.schedule.t_max));
        s.push_str(&format!("schedule.beta_start={}\n", self.schedule.beta_start));
        s.push_str(&format!("schedule.beta_end={}\n", self.schedule.beta_end));
        s.push_str("schedule.kind=linear\n");
        s.push_str(&format!("schedule.eta={}\n", self.schedule.eta));
        s.push_str(&format!("schedule.inference_steps={}\n", self.schedule.inference_steps));
        s.push_str(&format!("denoiser.resolution={}\n", self.denoiser.resolution));
        s.push_str(&format!("denoiser.in_channels={}\n", self.denoiser.in_channels));
        s.push_str(&format!("denoiser.widths={widths}\n"));
        s.push_str(&format!(
            "denoiser.bottleneck_channels={}\n",
            self.denoiser.bottleneck_channels
        ));
        s.push_str(&format!("denoiser.emb_dim={}\n", self.denoiser.emb_dim));
        s.push_str(&format!("denoiser.groups={}\n", self.denoiser.groups));
        s.push_str(&format!("injection.gamma={}\n", self.injection.gamma));
        match self.injection.gamma_schedule {
            Some((kind, total)) => {
                let name = match kind {
                    GammaScheduleKind::Constant => "constant",
                    GammaScheduleKind::Decreasing => "decreasing",
                    GammaScheduleKind::Increasing => "increasing",
                };
                s.push_str(&format!("injection.gamma_schedule={name}:{total}\n"));
            }
            None => s.push_str("injection.gamma_schedule=\n"),
        }
        s.push_str(&format!("injection.omega={}\n", self.injection.omega));
        s.push_str(&format!(
            "injection.t_edit={}\n",
            self.injection.t_edit.map(|v| v.to_string()).unwrap_or_default()
        ));
        s.push_str(&format!(
            "injection.t_boost={}\n",
            self.injection.t_boost.map(|v| v.to_string()).unwrap_or_default()
        ));
        s.push_str(&format!("injection.mask_path={}\n", opt_path(&self.injection.mask_path)));
        s.push_str(&format!("injection.blend_kind={}\n", self.injection.blend_kind.name()));
        s.push_str(&format!("injection.standardize={}\n", self.injection.standardize.name()));
        s.push_str(&format!("injection.boost={}\n", self.injection.boost));
        s.push_str(&format!(
            "injection.boost_sigma_squared={}\n",
            self.injection.boost_sigma_squared
        ));
        s.push_str(&format!("train.steps={}\n", self.train.steps));
        s.push_str(&format!("train.batch_size={}\n", self.train.batch_size));
        s.push_str(&format!("train.lr={}\n", self.train.lr));
        s.push_str(&format!("toyset.count={}\n", self.toyset.count));
        s.push_str(&format!("toyset.pairs={}\n", self.toyset.pairs));
        s.push_str(&format!(
            "toyset.fixed_shape={}\n",
            self.toyset.fixed_shape.map(|s| s.name().to_string()).unwrap_or_default()
        ));
        s.push_str(&format!("toyset.min_contrast={}\n", self.toyset.min_contrast));
        s.push_str(&format!("paths.checkpoint={}\n", self.paths.checkpoint.display()));
        s.push_str(&format!("paths.dataset={}\n", opt_path(&self.paths.dataset)));
        s.push_str(&format!("paths.output={}\n", self.paths.output.display()));
        s.push_str(&format!("run.command={}\n", opt_str(&self.run.command)));
        s.push_str(&format!("run.input={}\n", opt_str(&self.run.input)));
        s.push_str(&format!("run.original={}\n", opt_str(&self.run.original)));
        s.push_str(&format!("run.content={}\n", opt_str(&self.run.content)));
        s.push_str(&format!("run.diagnose_samples={}\n", self.run.diagnose_samples));
        s.push_str(&format!("run.sweep_gamma={}\n", list(&self.run.sweep_gamma)));
        s.push_str(&format!("run.sweep_omega={}\n", list(&self.run.sweep_omega)));
        s.push_str(&format!("run.trace={}\n", self.run.trace));
        s
    }
}
