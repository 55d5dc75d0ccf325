//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Every key has a default and
//! unknown keys are rejected. [`RunConfig::to_text`] writes every effective
//! value in a fixed order so an echoed file reloads to the same config.

use std::fmt::Display;
use std::str::FromStr;

use distillflow::engine::{OptimizerConfig, PyramidSpec, TrainConfig};
use distillflow::transform::TransformPolicy;
use distillflow::{LossConfig, PhotometricKind};

/// A rejected config; `line` is 0 for whole-config validation failures.
#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            0 => write!(f, "config: {}", self.message),
            n => write!(f, "config line {n}: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthMotion {
    Random,
    Horizontal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub layers: usize,
    pub max_shift: i32,
    pub motion: SynthMotion,
    /// Background shift for horizontal scenes, in pixels to the left.
    pub horizontal_base: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Pretraining length; `None` means a tenth of `iterations_per_level`.
    pub pretrain_override: Option<usize>,
    pub policy: TransformPolicy,
    pub teacher_runs: usize,
    pub synth: SynthSettings,
    /// Fraction of pixels that keep their label during fine-tuning.
    pub label_density: f64,
    /// Iterations per presentation in semi-supervised fine-tuning.
    pub finetune_iterations: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            pretrain_override: None,
            policy: TransformPolicy::default(),
            teacher_runs: 2,
            synth: SynthSettings {
                count: 1,
                height: 64,
                width: 96,
                layers: 2,
                max_shift: 4,
                motion: SynthMotion::Random,
                horizontal_base: 2,
            },
            label_density: 1.0,
            finetune_iterations: 100,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| format!("cannot parse {value:?}: {e}"))
}

fn parse_pair<T: FromStr>(value: &str) -> Result<(T, T), String>
where
    T::Err: Display,
{
    let (a, b) = value.split_once(',').ok_or_else(|| format!("expected two comma-separated values, got {value:?}"))?;
    Ok((parse(a.trim())?, parse(b.trim())?))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {value:?}")),
    }
}

fn parse_schedule(value: &str) -> Result<Vec<(f64, f64)>, String> {
    if value == "none" {
        return Ok(vec![]);
    }
    value
        .split(',')
        .map(|step| {
            let (at, factor) = step.split_once(':').ok_or_else(|| format!("schedule step {step:?} is not fraction:factor"))?;
            Ok((parse(at.trim())?, parse(factor.trim())?))
        })
        .collect()
}

fn pair<T: Display>(p: &(T, T)) -> String {
    format!("{},{}", p.0, p.1)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError { line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("key {key} repeated")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.finish().map_err(|message| ConfigError { line: 0, message })?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let loss = &mut self.train.loss;
        let opt = &mut self.train.optimizer;
        let pyr = &mut self.train.pyramid;
        let pol = &mut self.policy;
        let syn = &mut self.synth;
        match key {
            "seed" => self.seed = parse(v)?,
            "loss.epsilon" => loss.epsilon = parse(v)?,
            "loss.q_exponent" => loss.q_exponent = parse(v)?,
            "loss.beta" => loss.beta = parse(v)?,
            "loss.smooth_weight" => loss.smooth_weight = parse(v)?,
            "loss.photometric" => loss.photometric_kind = parse::<PhotometricKind>(v)?,
            "loss.alpha1" => loss.alpha1 = parse(v)?,
            "loss.alpha2" => loss.alpha2 = parse(v)?,
            "loss.census_radius" => loss.census_radius = parse(v)?,
            "loss.census_softness" => loss.census_softness = parse(v)?,
            "loss.ssim_window" => loss.ssim_window = parse(v)?,
            "opt.step_size" => opt.step_size = parse(v)?,
            "opt.beta1" => opt.beta1 = parse(v)?,
            "opt.beta2" => opt.beta2 = parse(v)?,
            "opt.eps" => opt.eps_adam = parse(v)?,
            "opt.iterations" => opt.iterations_per_level = parse(v)?,
            "opt.refresh_interval" => opt.occlusion_refresh_interval = parse(v)?,
            "opt.pretrain_iterations" => self.pretrain_override = Some(parse(v)?),
            "opt.schedule" => opt.schedule = parse_schedule(v)?,
            "opt.init_noise" => opt.init_noise = parse(v)?,
            "pyramid.levels" => pyr.levels = parse(v)?,
            "pyramid.scale_factor" => pyr.scale_factor = parse(v)?,
            "pyramid.min_size" => pyr.min_size = parse(v)?,
            "train.checkpoints" => self.train.checkpoints = parse(v)?,
            "train.student_init_from_teacher" => self.train.student_init_from_teacher = parse_bool(v)?,
            "teacher.runs" => self.teacher_runs = parse(v)?,
            "transform.crop_probability" => pol.crop_probability = parse(v)?,
            "transform.crop_fraction" => pol.crop_fraction = parse_pair(v)?,
            "transform.geometric_probability" => pol.geometric_probability = parse(v)?,
            "transform.scale_range" => pol.scale_range = parse_pair(v)?,
            "transform.rotation_range" => pol.rotation_range = parse_pair(v)?,
            "transform.noise_probability" => pol.noise_probability = parse(v)?,
            "transform.superpixels" => pol.superpixels = parse(v)?,
            "transform.compactness" => pol.compactness = parse(v)?,
            "transform.noise_count" => pol.noise_count = parse_pair(v)?,
            "transform.color_probability" => pol.color_probability = parse(v)?,
            "transform.contrast_range" => pol.contrast_range = parse_pair(v)?,
            "transform.brightness_range" => pol.brightness_range = parse_pair(v)?,
            "transform.saturation_range" => pol.saturation_range = parse_pair(v)?,
            "transform.hue_range" => pol.hue_range = parse_pair(v)?,
            "transform.gamma_range" => pol.gamma_range = parse_pair(v)?,
            "synth.count" => syn.count = parse(v)?,
            "synth.height" => syn.height = parse(v)?,
            "synth.width" => syn.width = parse(v)?,
            "synth.layers" => syn.layers = parse(v)?,
            "synth.max_shift" => syn.max_shift = parse(v)?,
            "synth.motion" => {
                syn.motion = match v {
                    "random" => SynthMotion::Random,
                    "horizontal" => SynthMotion::Horizontal,
                    _ => return Err(format!("synth.motion must be random or horizontal, got {v:?}")),
                }
            }
            "synth.horizontal_base" => syn.horizontal_base = parse(v)?,
            "finetune.label_density" => self.label_density = parse(v)?,
            "finetune.iterations" => self.finetune_iterations = parse(v)?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// Resolves derived defaults and validates everything.
    fn finish(&mut self) -> Result<(), String> {
        let opt = &mut self.train.optimizer;
        opt.pretrain_iterations = self.pretrain_override.unwrap_or(opt.iterations_per_level / 10);
        self.train.validate().map_err(|e| e.to_string())?;
        self.policy.validate().map_err(|e| e.to_string())?;
        if self.teacher_runs == 0 {
            return Err("teacher.runs must be >= 1".into());
        }
        if !(self.label_density > 0.0 && self.label_density <= 1.0) {
            return Err(format!("finetune.label_density {} must be in (0, 1]", self.label_density));
        }
        if self.finetune_iterations == 0 || self.synth.count == 0 {
            return Err("finetune.iterations and synth.count must be >= 1".into());
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> RunConfig {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn loss(&self) -> &LossConfig {
        &self.train.loss
    }

    pub fn to_text(&self) -> String {
        let l = &self.train.loss;
        let o: &OptimizerConfig = &self.train.optimizer;
        let p: &PyramidSpec = &self.train.pyramid;
        let t = &self.policy;
        let s = &self.synth;
        let schedule = if o.schedule.is_empty() {
            "none".to_string()
        } else {
            o.schedule.iter().map(|(a, f)| format!("{a}:{f}")).collect::<Vec<_>>().join(",")
        };
        let motion = match s.motion {
            SynthMotion::Random => "random",
            SynthMotion::Horizontal => "horizontal",
        };
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("loss.epsilon", l.epsilon.to_string()),
            ("loss.q_exponent", l.q_exponent.to_string()),
            ("loss.beta", l.beta.to_string()),
            ("loss.smooth_weight", l.smooth_weight.to_string()),
            ("loss.photometric", l.photometric_kind.to_string()),
            ("loss.alpha1", l.alpha1.to_string()),
            ("loss.alpha2", l.alpha2.to_string()),
            ("loss.census_radius", l.census_radius.to_string()),
            ("loss.census_softness", l.census_softness.to_string()),
            ("loss.ssim_window", l.ssim_window.to_string()),
            ("opt.step_size", o.step_size.to_string()),
            ("opt.beta1", o.beta1.to_string()),
            ("opt.beta2", o.beta2.to_string()),
            ("opt.eps", o.eps_adam.to_string()),
            ("opt.iterations", o.iterations_per_level.to_string()),
            ("opt.refresh_interval", o.occlusion_refresh_interval.to_string()),
            ("opt.pretrain_iterations", o.pretrain_iterations.to_string()),
            ("opt.schedule", schedule),
            ("opt.init_noise", o.init_noise.to_string()),
            ("pyramid.levels", p.levels.to_string()),
            ("pyramid.scale_factor", p.scale_factor.to_string()),
            ("pyramid.min_size", p.min_size.to_string()),
            ("train.checkpoints", self.train.checkpoints.to_string()),
            ("train.student_init_from_teacher", self.train.student_init_from_teacher.to_string()),
            ("teacher.runs", self.teacher_runs.to_string()),
            ("transform.crop_probability", t.crop_probability.to_string()),
            ("transform.crop_fraction", pair(&t.crop_fraction)),
            ("transform.geometric_probability", t.geometric_probability.to_string()),
            ("transform.scale_range", pair(&t.scale_range)),
            ("transform.rotation_range", pair(&t.rotation_range)),
            ("transform.noise_probability", t.noise_probability.to_string()),
            ("transform.superpixels", t.superpixels.to_string()),
            ("transform.compactness", t.compactness.to_string()),
            ("transform.noise_count", pair(&t.noise_count)),
            ("transform.color_probability", t.color_probability.to_string()),
            ("transform.contrast_range", pair(&t.contrast_range)),
            ("transform.brightness_range", pair(&t.brightness_range)),
            ("transform.saturation_range", pair(&t.saturation_range)),
            ("transform.hue_range", pair(&t.hue_range)),
            ("transform.gamma_range", pair(&t.gamma_range)),
            ("synth.count", s.count.to_string()),
            ("synth.height", s.height.to_string()),
            ("synth.width", s.width.to_string()),
            ("synth.layers", s.layers.to_string()),
            ("synth.max_shift", s.max_shift.to_string()),
            ("synth.motion", motion.to_string()),
            ("synth.horizontal_base", s.horizontal_base.to_string()),
            ("finetune.label_density", self.label_density.to_string()),
            ("finetune.iterations", self.finetune_iterations.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
